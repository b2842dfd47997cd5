use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul, Buffer, Module, Param, ParamKind, Real, Tensor};

/// Views a rank-2 or rank-3 tensor as `(batch, channels, length)`.
fn bcl<T: Real>(x: &Tensor<T>) -> (usize, usize, usize) {
    match x.shape.len() {
        2 => (x.shape[0], x.shape[1], 1),
        3 => x.dims3(),
        _ => panic!("expected rank-2 or rank-3 tensor, got {:?}", x.shape),
    }
}

/// Batch normalization over the batch (and time) axes of each channel.
///
/// Training mode normalizes with batch statistics and updates running
/// averages; evaluation mode uses the running averages.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Buffer<T>,
    pub running_var: Buffer<T>,
    pub momentum: f64,
    pub eps: f64,
    pub training: bool,
    /// When false the layer has no affine parameters.
    pub affine: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::constant(format!("{name}.gamma"), &[channels], ParamKind::Norm, 1.0),
            beta: Param::constant(format!("{name}.beta"), &[channels], ParamKind::Norm, 0.0),
            running_mean: Buffer { name: format!("{name}.running_mean"), value: vec![T::zero(); channels] },
            running_var: Buffer { name: format!("{name}.running_var"), value: vec![T::one(); channels] },
            momentum: 0.1,
            eps: 1e-5,
            training: true,
            affine: true,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn batch_stats(x: &Tensor<T>, ch: usize) -> (Vec<f64>, Vec<f64>) {
        let (b, c, l) = bcl(x);
        assert_eq!(c, ch, "batch-norm channel mismatch");
        let n = (b * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..b {
            for (ci, m) in mean.iter_mut().enumerate() {
                *m += x.data[(i * c + ci) * l..(i * c + ci + 1) * l].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for i in 0..b {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] +=
                    x.data[(i * c + ci) * l..(i * c + ci + 1) * l].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[f64], var: &[f64]) -> (Tensor<T>, Tensor<T>, Vec<T>) {
        let (b, c, l) = bcl(x);
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + self.eps).sqrt())).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..b {
            for ci in 0..c {
                let m = T::of(mean[ci]);
                let s = inv_std[ci];
                let (g, bt) = if self.affine {
                    (self.gamma.value[ci], self.beta.value[ci])
                } else {
                    (T::one(), T::zero())
                };
                let range = (i * c + ci) * l..(i * c + ci + 1) * l;
                for (xh, yv) in xhat.data[range.clone()].iter_mut().zip(y.data[range].iter_mut()) {
                    *xh = (*xh - m) * s;
                    *yv = *xh * g + bt;
                }
            }
        }
        (y, xhat, inv_std)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mean: Vec<f64> = self.running_mean.value.iter().map(|v| v.as_f64()).collect();
        let var: Vec<f64> = self.running_var.value.iter().map(|v| v.as_f64()).collect();
        self.normalize(x, &mean, &var).0
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (b, _, l) = bcl(x);
        let n = b * l;
        let use_batch = self.training && n > 1;
        let (mean, var) = if use_batch {
            let (mean, var) = Self::batch_stats(x, self.channels());
            let unbias = n as f64 / (n as f64 - 1.0);
            let mom = self.momentum;
            for ci in 0..self.channels() {
                let rm = &mut self.running_mean.value[ci];
                *rm = T::of((1.0 - mom) * rm.as_f64() + mom * mean[ci]);
                let rv = &mut self.running_var.value[ci];
                *rv = T::of((1.0 - mom) * rv.as_f64() + mom * var[ci] * unbias);
            }
            (mean, var)
        } else {
            (
                self.running_mean.value.iter().map(|v| v.as_f64()).collect(),
                self.running_var.value.iter().map(|v| v.as_f64()).collect(),
            )
        };
        let (y, xhat, inv_std) = self.normalize(x, &mean, &var);
        self.cache = Some(BnCache { xhat, inv_std, batch_stats: use_batch });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("batch-norm backward without forward");
        let (b, c, l) = bcl(dy);
        let n = T::of((b * l) as f64);
        let mut dx = dy.clone();
        for ci in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..b {
                let range = (i * c + ci) * l..(i * c + ci + 1) * l;
                for (g, xh) in dy.data[range.clone()].iter().zip(&cache.xhat.data[range]) {
                    sum_dy += *g;
                    sum_dy_xhat += *g * *xh;
                }
            }
            let gamma = if self.affine { self.gamma.value[ci] } else { T::one() };
            if self.affine {
                self.gamma.grad[ci] += sum_dy_xhat;
                self.beta.grad[ci] += sum_dy;
            }
            let scale = gamma * cache.inv_std[ci];
            for i in 0..b {
                let range = (i * c + ci) * l..(i * c + ci + 1) * l;
                for (d, xh) in dx.data[range.clone()].iter_mut().zip(&cache.xhat.data[range]) {
                    *d = if cache.batch_stats {
                        scale * (*d - sum_dy / n - *xh * sum_dy_xhat / n)
                    } else {
                        scale * *d
                    };
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        if self.affine {
            f(&self.gamma);
            f(&self.beta);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if self.affine {
            f(&mut self.gamma);
            f(&mut self.beta);
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
    fn set_training(&mut self, training: bool) {
        self.training = training;
    }
}

/// Exponential linear unit (alpha = 1).
#[derive(Debug, Clone, Default)]
pub struct Elu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Real> Elu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    fn apply(v: T) -> T {
        if v > T::zero() {
            v
        } else {
            v.exp() - T::one()
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| Self::apply(v)).collect() }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.cache.take().expect("elu backward without forward");
        let data = dy
            .data
            .iter()
            .zip(&y.data)
            .map(|(&g, &yv)| if yv > T::zero() { g } else { g * (yv + T::one()) })
            .collect();
        Tensor { shape: dy.shape.clone(), data }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(T::zero())).collect() }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let y = self.cache.take().expect("relu backward without forward");
        let data =
            dy.data.iter().zip(&y.data).map(|(&g, &yv)| if yv > T::zero() { g } else { T::zero() }).collect();
        Tensor { shape: dy.shape.clone(), data }
    }
}

/// Non-overlapping max pooling along time (kernel = stride = `size`, floor).
#[derive(Debug, Clone)]
pub struct MaxPool1d {
    pub size: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(size: usize) -> Self {
        assert!(size >= 1);
        Self { size, cache: None }
    }

    pub fn output_len(&self, len: usize) -> usize {
        len / self.size
    }

    fn run<T: Real>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
        let (b, c, l) = x.dims3();
        let ol = self.output_len(l);
        let mut out = Tensor::zeros(&[b, c, ol]);
        let mut idx = vec![0usize; b * c * ol];
        for row in 0..b * c {
            let src = &x.data[row * l..(row + 1) * l];
            for t in 0..ol {
                let start = t * self.size;
                let mut best = start;
                for j in start + 1..start + self.size {
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                out.data[row * ol + t] = src[best];
                idx[row * ol + t] = row * l + best;
            }
        }
        (out, idx)
    }

    pub fn infer<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, idx) = self.run(x);
        self.cache = Some((idx, x.shape.clone()));
        y
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (idx, shape) = self.cache.take().expect("maxpool backward without forward");
        let mut dx = Tensor::zeros(&shape);
        for (&i, &g) in idx.iter().zip(&dy.data) {
            dx.data[i] += g;
        }
        dx
    }
}

/// Mean over the time axis: `[B, C, L] -> [B, C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    len: usize,
}

impl GlobalAvgPool {
    pub fn infer<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, c, l) = x.dims3();
        let inv = T::of(1.0 / l as f64);
        let data = x.data.chunks(l).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        Tensor::from_vec(&[b, c], data)
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.len = x.shape[2];
        self.infer(x)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (b, c) = dy.dims2();
        let l = self.len;
        let inv = T::of(1.0 / l as f64);
        let mut dx = Tensor::zeros(&[b, c, l]);
        for (row, &g) in dy.data.iter().enumerate() {
            dx.data[row * l..(row + 1) * l].iter_mut().for_each(|d| *d = g * inv);
        }
        dx
    }
}

/// Fully connected layer, `y = x Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::fan_in_uniform(format!("{name}.weight"), &[output, input], ParamKind::Weight, input, rng),
            bias: Param::fan_in_uniform(format!("{name}.bias"), &[output], ParamKind::Bias, input, rng),
            cache: None,
        }
    }

    pub fn zeros(name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: Param::constant(format!("{name}.weight"), &[output, input], ParamKind::Weight, 0.0),
            bias: Param::constant(format!("{name}.bias"), &[output], ParamKind::Bias, 0.0),
            cache: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (b, i) = x.dims2();
        assert_eq!(i, self.input_dim(), "linear input dim");
        let o = self.output_dim();
        let mut y = Tensor::zeros(&[b, o]);
        for row in y.data.chunks_mut(o) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(false, true, b, i, o, T::one(), &x.data, &self.weight.value, T::one(), &mut y.data);
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("linear backward without forward");
        let (b, i) = x.dims2();
        let o = self.output_dim();
        matmul(true, false, o, b, i, T::one(), &dy.data, &x.data, T::one(), &mut self.weight.grad);
        for row in dy.data.chunks(o) {
            for (g, &v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = Tensor::zeros(&[b, i]);
        matmul(false, false, b, o, i, T::one(), &dy.data, &self.weight.value, T::zero(), &mut dx.data);
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Inverted dropout driven by its own seeded stream.
#[derive(Debug, Clone)]
pub struct Dropout<T> {
    pub p: f64,
    pub training: bool,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p));
        Self { p, training: true, rng: ChaCha8Rng::seed_from_u64(seed), mask: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        if !self.training || self.p == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = T::of(1.0 / (1.0 - self.p));
        let mask: Vec<T> =
            (0..x.len()).map(|_| if self.rng.random::<f64>() < self.p { T::zero() } else { keep }).collect();
        let data = x.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.mask = Some(mask);
        Tensor { shape: x.shape.clone(), data }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self.mask.take() {
            Some(mask) => {
                Tensor { shape: dy.shape.clone(), data: dy.data.iter().zip(&mask).map(|(&g, &m)| g * m).collect() }
            }
            None => dy.clone(),
        }
    }
}

/// One stage of a fully connected stack.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Elu(Elu<T>),
    Relu(Relu<T>),
    Dropout(Dropout<T>),
}

/// Sequential stack over rank-2 activations.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = match l {
                Layer::Linear(m) => m.infer(&h),
                Layer::BatchNorm(m) => m.infer(&h),
                Layer::Elu(m) => m.infer(&h),
                Layer::Relu(m) => m.infer(&h),
                Layer::Dropout(m) => m.infer(&h),
            };
        }
        h
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in self.layers.iter_mut() {
            h = match l {
                Layer::Linear(m) => m.forward(&h),
                Layer::BatchNorm(m) => m.forward(&h),
                Layer::Elu(m) => m.forward(&h),
                Layer::Relu(m) => m.forward(&h),
                Layer::Dropout(m) => m.forward(&h),
            };
        }
        h
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = match l {
                Layer::Linear(m) => m.backward(&g),
                Layer::BatchNorm(m) => m.backward(&g),
                Layer::Elu(m) => m.backward(&g),
                Layer::Relu(m) => m.backward(&g),
                Layer::Dropout(m) => m.backward(&g),
            };
        }
        g
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Linear(m) => Some(m.output_dim()),
                _ => None,
            })
            .expect("sequential has a linear layer")
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Linear(m) => Some(m.input_dim()),
                _ => None,
            })
            .expect("sequential has a linear layer")
    }
}

impl<T: Real> Module<T> for Sequential<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.layers {
            match l {
                Layer::Linear(m) => m.visit_params(f),
                Layer::BatchNorm(m) => m.visit_params(f),
                _ => {}
            }
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in self.layers.iter_mut() {
            match l {
                Layer::Linear(m) => m.visit_params_mut(f),
                Layer::BatchNorm(m) => m.visit_params_mut(f),
                _ => {}
            }
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        for l in &self.layers {
            if let Layer::BatchNorm(m) = l {
                m.visit_buffers(f);
            }
        }
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        for l in self.layers.iter_mut() {
            if let Layer::BatchNorm(m) = l {
                m.visit_buffers_mut(f);
            }
        }
    }
    fn set_training(&mut self, training: bool) {
        for l in self.layers.iter_mut() {
            match l {
                Layer::BatchNorm(m) => m.training = training,
                Layer::Dropout(m) => m.training = training,
                _ => {}
            }
        }
    }
}
