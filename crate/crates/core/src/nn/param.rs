use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::Real;

/// Role of a parameter tensor; bias and normalization parameters are exempt
/// from layer-wise adaptation and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], kind: ParamKind, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape/value mismatch");
        let grad = vec![T::zero(); value.len()];
        Self { name: name.into(), shape: shape.to_vec(), kind, value, grad }
    }

    pub fn constant(name: impl Into<String>, shape: &[usize], kind: ParamKind, v: f64) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, kind, vec![T::of(v); n])
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(
        name: impl Into<String>,
        shape: &[usize],
        kind: ParamKind,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        Self::new(name, shape, kind, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Non-trainable state carried in checkpoints (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

/// Parameter traversal shared by every layer and model.
///
/// Visit order is deterministic; optimizers and checkpoints rely on it.
pub trait Module<T: Real> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
    fn visit_buffers(&self, _f: &mut dyn FnMut(&Buffer<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&mut Buffer<T>)) {}
    fn set_training(&mut self, _training: bool) {}

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Copies of all parameter values, in visit order.
    fn param_values(&self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value.clone()));
        out
    }
}

/// Calls `f(target, online)` for every parameter pair of two identically
/// structured modules.
pub fn zip_params<T: Real>(
    target: &mut dyn Module<T>,
    online: &dyn Module<T>,
    f: &mut dyn FnMut(&mut Param<T>, &Param<T>),
) {
    let mut src = Vec::new();
    online.visit_params(&mut |p| src.push(p.clone()));
    let mut i = 0;
    target.visit_params_mut(&mut |p| {
        let o = &src[i];
        assert_eq!(p.shape, o.shape, "module structure mismatch at {}", p.name);
        f(p, o);
        i += 1;
    });
    assert_eq!(i, src.len(), "module structure mismatch");
}
