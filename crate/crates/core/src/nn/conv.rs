use rand::Rng;

use super::{matmul, Module, Param, ParamKind, Real, Tensor};

/// Mirror index for reflection padding (edge sample not repeated).
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    // one reflection suffices while pad < len, loop covers tiny toy inputs
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// 1-D convolution over `[batch, channels, length]` with reflection padding to
/// keep the output length equal to the input length.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv1d<T> {
    pub fn new<R: Rng>(name: &str, in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::fan_in_uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel],
                ParamKind::Weight,
                fan_in,
                rng,
            ),
            bias: Param::fan_in_uniform(format!("{name}.bias"), &[out_channels], ParamKind::Bias, fan_in, rng),
            cache: None,
        }
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// `col[(c * k + j), t] = x_padded[c, t + j]` for one batch item.
    fn im2col(&self, x: &[T], len: usize, col: &mut [T]) {
        let k = self.kernel;
        let left = self.pad_left() as isize;
        for c in 0..self.in_channels {
            let xc = &x[c * len..(c + 1) * len];
            for j in 0..k {
                let row = &mut col[(c * k + j) * len..(c * k + j + 1) * len];
                let off = j as isize - left;
                // interior region copies directly
                let lo = (-off).clamp(0, len as isize) as usize;
                let hi = (len as isize - off).clamp(0, len as isize) as usize;
                if lo < hi {
                    let s = (lo as isize + off) as usize;
                    row[lo..hi].copy_from_slice(&xc[s..s + (hi - lo)]);
                }
                for t in (0..lo).chain(hi..len) {
                    row[t] = xc[reflect(t as isize + off, len)];
                }
            }
        }
    }

    fn col2im_add(&self, col: &[T], len: usize, dx: &mut [T]) {
        let k = self.kernel;
        let left = self.pad_left() as isize;
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * len..(c + 1) * len];
            for j in 0..k {
                let row = &col[(c * k + j) * len..(c * k + j + 1) * len];
                let off = j as isize - left;
                let lo = (-off).clamp(0, len as isize) as usize;
                let hi = (len as isize - off).clamp(0, len as isize) as usize;
                if lo < hi {
                    let s = (lo as isize + off) as usize;
                    for (d, &g) in dxc[s..s + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                        *d += g;
                    }
                }
                for t in (0..lo).chain(hi..len) {
                    dxc[reflect(t as isize + off, len)] += row[t];
                }
            }
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, c, len) = x.dims3();
        assert_eq!(c, self.in_channels, "conv input channels");
        let rows = self.in_channels * self.kernel;
        let mut col = vec![T::zero(); rows * len];
        let mut out = Tensor::zeros(&[b, self.out_channels, len]);
        for i in 0..b {
            self.im2col(&x.data[i * c * len..(i + 1) * c * len], len, &mut col);
            let y = &mut out.data[i * self.out_channels * len..(i + 1) * self.out_channels * len];
            for (o, chunk) in y.chunks_mut(len).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            matmul(false, false, self.out_channels, rows, len, T::one(), &self.weight.value, &col, T::one(), y);
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("conv backward without forward");
        let (b, c, len) = x.dims3();
        let rows = self.in_channels * self.kernel;
        let mut col = vec![T::zero(); rows * len];
        let mut dcol = vec![T::zero(); rows * len];
        let mut dx = Tensor::zeros(&[b, c, len]);
        let oc = self.out_channels;
        for i in 0..b {
            self.im2col(&x.data[i * c * len..(i + 1) * c * len], len, &mut col);
            let g = &dy.data[i * oc * len..(i + 1) * oc * len];
            // dW += dY colᵀ
            matmul(false, true, oc, len, rows, T::one(), g, &col, T::one(), &mut self.weight.grad);
            for (o, chunk) in g.chunks(len).enumerate() {
                self.bias.grad[o] += chunk.iter().copied().sum::<T>();
            }
            // dcol = Wᵀ dY
            matmul(true, false, rows, oc, len, T::one(), &self.weight.value, g, T::zero(), &mut dcol);
            self.col2im_add(&dcol, len, &mut dx.data[i * c * len..(i + 1) * c * len]);
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv1d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Parallel convolutions with different kernel sizes, concatenated along channels.
#[derive(Debug, Clone)]
pub struct ParallelConv<T> {
    pub branches: Vec<Conv1d<T>>,
}

impl<T: Real> ParallelConv<T> {
    pub fn new<R: Rng>(name: &str, in_channels: usize, filters: usize, kernels: &[usize], rng: &mut R) -> Self {
        let branches = kernels
            .iter()
            .map(|&k| Conv1d::new(&format!("{name}.k{k}"), in_channels, filters, k, rng))
            .collect();
        Self { branches }
    }

    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.out_channels).sum()
    }

    fn concat(&self, parts: Vec<Tensor<T>>) -> Tensor<T> {
        let (b, _, len) = parts[0].dims3();
        let total = self.out_channels();
        let mut out = Tensor::zeros(&[b, total, len]);
        for i in 0..b {
            let mut off = 0;
            for p in &parts {
                let pc = p.shape[1];
                let src = &p.data[i * pc * len..(i + 1) * pc * len];
                out.data[(i * total + off) * len..(i * total + off + pc) * len].copy_from_slice(src);
                off += pc;
            }
        }
        out
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.concat(self.branches.iter().map(|b| b.infer(x)).collect())
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let parts = self.branches.iter_mut().map(|b| b.forward(x)).collect();
        self.concat(parts)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (b, total, len) = dy.dims3();
        let mut dx: Option<Tensor<T>> = None;
        let mut off = 0;
        for br in self.branches.iter_mut() {
            let pc = br.out_channels;
            let mut part = Tensor::zeros(&[b, pc, len]);
            for i in 0..b {
                part.data[i * pc * len..(i + 1) * pc * len]
                    .copy_from_slice(&dy.data[(i * total + off) * len..(i * total + off + pc) * len]);
            }
            off += pc;
            let g = br.backward(&part);
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => dx = Some(g),
            }
        }
        dx.expect("parallel conv has branches")
    }
}

impl<T: Real> Module<T> for ParallelConv<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.branches.iter().for_each(|b| b.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.branches.iter_mut().for_each(|b| b.visit_params_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflect_matches_mirror_padding() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1usize, 4, 5, 8] {
            let conv: Conv1d<f64> = Conv1d::new("c", 2, 3, k, &mut rng);
            let len = 11;
            let x = Tensor::from_vec(&[1, 2, len], (0..2 * len).map(|i| ((i * 7) % 5) as f64 - 2.0).collect());
            let y = conv.infer(&x);
            let left = (k as isize - 1) / 2;
            for o in 0..3 {
                for t in 0..len {
                    let mut s = conv.bias.value[o];
                    for c in 0..2 {
                        for j in 0..k {
                            let src = reflect(t as isize + j as isize - left, len);
                            s += conv.weight.value[(o * 2 + c) * k + j] * x.data[c * len + src];
                        }
                    }
                    assert!((y.data[o * len + t] - s).abs() < 1e-12);
                }
            }
        }
    }
}
