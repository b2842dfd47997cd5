use rand::Rng;

use super::{matmul, Module, Param, ParamKind, Real, Tensor};

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[derive(Debug, Clone)]
struct Step<T> {
    x: Tensor<T>,
    h_prev: Tensor<T>,
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
}

/// Gated recurrent unit run over a sequence of `[batch, input]` steps.
///
/// Gate order in the stacked weights is reset, update, candidate.
#[derive(Debug, Clone)]
pub struct Gru<T> {
    pub hidden: usize,
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub b_ih: Param<T>,
    pub b_hh: Param<T>,
    cache: Vec<Step<T>>,
}

impl<T: Real> Gru<T> {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let h3 = 3 * hidden;
        Self {
            hidden,
            w_ih: Param::fan_in_uniform(format!("{name}.w_ih"), &[h3, input], ParamKind::Weight, hidden, rng),
            w_hh: Param::fan_in_uniform(format!("{name}.w_hh"), &[h3, hidden], ParamKind::Weight, hidden, rng),
            b_ih: Param::fan_in_uniform(format!("{name}.b_ih"), &[h3], ParamKind::Bias, hidden, rng),
            b_hh: Param::fan_in_uniform(format!("{name}.b_hh"), &[h3], ParamKind::Bias, hidden, rng),
            cache: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.shape[1]
    }

    fn affine(x: &Tensor<T>, w: &Param<T>, b: &Param<T>) -> Vec<T> {
        let (rows, i) = x.dims2();
        let o = w.shape[0];
        let mut out = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            out.extend_from_slice(&b.value);
        }
        matmul(false, true, rows, i, o, T::one(), &x.data, &w.value, T::one(), &mut out);
        out
    }

    fn step(&self, x: &Tensor<T>, h: &Tensor<T>) -> Step<T> {
        let (b, hd) = h.dims2();
        let gi = Self::affine(x, &self.w_ih, &self.b_ih);
        let gh = Self::affine(h, &self.w_hh, &self.b_hh);
        let mut r = vec![T::zero(); b * hd];
        let mut z = vec![T::zero(); b * hd];
        let mut n = vec![T::zero(); b * hd];
        let mut hn = vec![T::zero(); b * hd];
        for i in 0..b {
            for j in 0..hd {
                let base = i * 3 * hd;
                let k = i * hd + j;
                r[k] = sigmoid(gi[base + j] + gh[base + j]);
                z[k] = sigmoid(gi[base + hd + j] + gh[base + hd + j]);
                hn[k] = gh[base + 2 * hd + j];
                n[k] = (gi[base + 2 * hd + j] + r[k] * hn[k]).tanh();
            }
        }
        Step { x: x.clone(), h_prev: h.clone(), r, z, n, hn }
    }

    fn next_hidden(s: &Step<T>) -> Tensor<T> {
        let data = (0..s.n.len()).map(|k| (T::one() - s.z[k]) * s.n[k] + s.z[k] * s.h_prev.data[k]).collect();
        Tensor { shape: s.h_prev.shape.clone(), data }
    }

    /// Final hidden state after consuming `xs` from a zero state.
    pub fn infer(&self, xs: &[Tensor<T>]) -> Tensor<T> {
        let b = xs[0].dims2().0;
        let mut h = Tensor::zeros(&[b, self.hidden]);
        for x in xs {
            h = Self::next_hidden(&self.step(x, &h));
        }
        h
    }

    pub fn forward(&mut self, xs: &[Tensor<T>]) -> Tensor<T> {
        assert!(!xs.is_empty(), "gru needs at least one step");
        let b = xs[0].dims2().0;
        let mut h = Tensor::zeros(&[b, self.hidden]);
        self.cache.clear();
        for x in xs {
            let s = self.step(x, &h);
            h = Self::next_hidden(&s);
            self.cache.push(s);
        }
        h
    }

    /// Gradients w.r.t. each input step given the gradient of the final hidden state.
    pub fn backward(&mut self, dh_final: &Tensor<T>) -> Vec<Tensor<T>> {
        let steps = std::mem::take(&mut self.cache);
        let hd = self.hidden;
        let mut dh = dh_final.clone();
        let mut dxs = vec![Tensor::zeros(&[0, 0]); steps.len()];
        for (t, s) in steps.iter().enumerate().rev() {
            let (b, _) = dh.dims2();
            let mut gi = vec![T::zero(); b * 3 * hd];
            let mut gh = vec![T::zero(); b * 3 * hd];
            let mut dh_prev = vec![T::zero(); b * hd];
            for i in 0..b {
                for j in 0..hd {
                    let k = i * hd + j;
                    let base = i * 3 * hd;
                    let g = dh.data[k];
                    let (r, z, n, hn) = (s.r[k], s.z[k], s.n[k], s.hn[k]);
                    let dn = g * (T::one() - z);
                    let dz = g * (s.h_prev.data[k] - n);
                    dh_prev[k] = g * z;
                    let dn_pre = dn * (T::one() - n * n);
                    let dr = dn_pre * hn;
                    let dz_pre = dz * z * (T::one() - z);
                    let dr_pre = dr * r * (T::one() - r);
                    gi[base + j] = dr_pre;
                    gi[base + hd + j] = dz_pre;
                    gi[base + 2 * hd + j] = dn_pre;
                    gh[base + j] = dr_pre;
                    gh[base + hd + j] = dz_pre;
                    gh[base + 2 * hd + j] = dn_pre * r;
                }
            }
            let input = self.input_dim();
            matmul(true, false, 3 * hd, b, input, T::one(), &gi, &s.x.data, T::one(), &mut self.w_ih.grad);
            matmul(true, false, 3 * hd, b, hd, T::one(), &gh, &s.h_prev.data, T::one(), &mut self.w_hh.grad);
            for i in 0..b {
                for q in 0..3 * hd {
                    self.b_ih.grad[q] += gi[i * 3 * hd + q];
                    self.b_hh.grad[q] += gh[i * 3 * hd + q];
                }
            }
            let mut dx = Tensor::zeros(&[b, input]);
            matmul(false, false, b, 3 * hd, input, T::one(), &gi, &self.w_ih.value, T::zero(), &mut dx.data);
            matmul(false, false, b, 3 * hd, hd, T::one(), &gh, &self.w_hh.value, T::one(), &mut dh_prev);
            dxs[t] = dx;
            dh = Tensor::from_vec(&[b, hd], dh_prev);
        }
        dxs
    }
}

impl<T: Real> Module<T> for Gru<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.w_ih);
        f(&self.w_hh);
        f(&self.b_ih);
        f(&self.b_hh);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w_ih);
        f(&mut self.w_hh);
        f(&mut self.b_ih);
        f(&mut self.b_hh);
    }
}
