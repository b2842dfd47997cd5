use rand::Rng;

use crate::nn::{BatchNorm, Buffer, Conv1d, Elu, GlobalAvgPool, MaxPool1d, Module, ParallelConv, Param, Real, Tensor};
use crate::{Error, Result};

/// Bipolar channels fed to the encoder.
pub const DEFAULT_IN_CHANNELS: usize = 20;
pub const DEFAULT_KERNELS: [usize; 3] = [4, 8, 16];
pub const DEFAULT_FILTERS: usize = 32;

/// Pool sizes per stage for each supported crop length in samples at 100 Hz.
pub fn pool_sizes_for(input_len: usize) -> Option<[usize; 4]> {
    match input_len {
        500 | 1000 | 2000 => Some([3; 4]),
        3000 | 6000 => Some([4; 4]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub input_len: usize,
    pub kernel_sizes: Vec<usize>,
    pub filters_per_branch: usize,
    pub pool_sizes: Vec<usize>,
    pub residual: bool,
}

impl EncoderSpec {
    /// Standard configuration for a crop of `input_len` samples.
    pub fn for_input_len(input_len: usize, filters_per_branch: usize) -> Result<Self> {
        let pools = pool_sizes_for(input_len).ok_or_else(|| {
            Error::InvalidArgument(format!("no pooling schedule for input length {input_len} (expected 500, 1000, 2000, 3000 or 6000)"))
        })?;
        Ok(Self {
            in_channels: DEFAULT_IN_CHANNELS,
            input_len,
            kernel_sizes: DEFAULT_KERNELS.to_vec(),
            filters_per_branch,
            pool_sizes: pools.to_vec(),
            residual: true,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.filters_per_branch * self.kernel_sizes.len()
    }

    /// Temporal length after each pooling stage.
    pub fn intermediate_dims(&self) -> Vec<usize> {
        let mut len = self.input_len;
        self.pool_sizes
            .iter()
            .map(|p| {
                len /= p;
                len
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Stage<T> {
    conv1: ParallelConv<T>,
    bn1: BatchNorm<T>,
    act1: Elu<T>,
    conv2: ParallelConv<T>,
    bn2: BatchNorm<T>,
    skip: Option<Conv1d<T>>,
    act_out: Elu<T>,
    pool: MaxPool1d,
}

impl<T: Real> Stage<T> {
    fn new<R: Rng>(name: &str, width: usize, spec: &EncoderSpec, pool: usize, rng: &mut R) -> Self {
        let f = spec.filters_per_branch;
        Self {
            conv1: ParallelConv::new(&format!("{name}.conv1"), width, f, &spec.kernel_sizes, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), width),
            act1: Elu::new(),
            conv2: ParallelConv::new(&format!("{name}.conv2"), width, f, &spec.kernel_sizes, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), width),
            skip: spec.residual.then(|| Conv1d::new(&format!("{name}.skip"), width, width, 1, rng)),
            act_out: Elu::new(),
            pool: MaxPool1d::new(pool),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = self.bn2.infer(&self.conv2.infer(&self.act1.infer(&self.bn1.infer(&self.conv1.infer(x)))));
        if let Some(skip) = &self.skip {
            y.add_assign(&skip.infer(x));
        }
        self.pool.infer(&self.act_out.infer(&y))
    }

    fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let a = self.conv1.forward(x);
        let a = self.bn1.forward(&a);
        let a = self.act1.forward(&a);
        let a = self.conv2.forward(&a);
        let mut y = self.bn2.forward(&a);
        if let Some(skip) = self.skip.as_mut() {
            y.add_assign(&skip.forward(x));
        }
        let y = self.act_out.forward(&y);
        self.pool.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.pool.backward(dy);
        let d = self.act_out.backward(&d);
        let skip_dx = self.skip.as_mut().map(|s| s.backward(&d));
        let a = self.bn2.backward(&d);
        let a = self.conv2.backward(&a);
        let a = self.act1.backward(&a);
        let a = self.bn1.backward(&a);
        let mut dx = self.conv1.backward(&a);
        if let Some(s) = skip_dx {
            dx.add_assign(&s);
        }
        dx
    }
}

impl<T: Real> Module<T> for Stage<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(s) = &self.skip {
            s.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
        if let Some(s) = self.skip.as_mut() {
            s.visit_params_mut(f);
        }
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
    }
    fn set_training(&mut self, training: bool) {
        self.bn1.set_training(training);
        self.bn2.set_training(training);
    }
}

/// Convolutional EEG encoder: multi-kernel stem followed by residual
/// multi-kernel stages with max pooling and a global average over time.
#[derive(Debug, Clone)]
pub struct EegEncoder<T> {
    pub spec: EncoderSpec,
    stem: ParallelConv<T>,
    stem_bn: BatchNorm<T>,
    stem_act: Elu<T>,
    stages: Vec<Stage<T>>,
    gap: GlobalAvgPool,
}

impl<T: Real> EegEncoder<T> {
    pub fn new<R: Rng>(spec: EncoderSpec, rng: &mut R) -> Self {
        let width = spec.output_dim();
        let stem = ParallelConv::new("encoder.stem", spec.in_channels, spec.filters_per_branch, &spec.kernel_sizes, rng);
        let stages = spec
            .pool_sizes
            .iter()
            .enumerate()
            .map(|(i, &p)| Stage::new(&format!("encoder.stage{i}"), width, &spec, p, rng))
            .collect();
        Self {
            stem,
            stem_bn: BatchNorm::new("encoder.stem_bn", width),
            stem_act: Elu::new(),
            stages,
            gap: GlobalAvgPool::default(),
            spec,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Rejects inputs whose channel count or length does not match the encoder layout.
    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape.len() != 3 {
            return Err(Error::ShapeMismatch { what: "input rank".into(), expected: 3, actual: x.shape.len() });
        }
        if x.shape[1] != self.spec.in_channels {
            return Err(Error::ShapeMismatch { what: "input channels".into(), expected: self.spec.in_channels, actual: x.shape[1] });
        }
        if x.shape[2] != self.spec.input_len {
            return Err(Error::ShapeMismatch { what: "input length".into(), expected: self.spec.input_len, actual: x.shape[2] });
        }
        Ok(())
    }

    /// Encodes `[B, C, L]` crops into `[B, output_dim]` features without touching caches.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.infer(x))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.stem_act.infer(&self.stem_bn.infer(&self.stem.infer(x)));
        for s in &self.stages {
            h = s.infer(&h);
        }
        self.gap.infer(&h)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.stem.forward(x);
        let h = self.stem_bn.forward(&h);
        let mut h = self.stem_act.forward(&h);
        for s in self.stages.iter_mut() {
            h = s.forward(&h);
        }
        self.gap.forward(&h)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, dh: &Tensor<T>) -> Tensor<T> {
        let mut d = self.gap.backward(dh);
        for s in self.stages.iter_mut().rev() {
            d = s.backward(&d);
        }
        let d = self.stem_act.backward(&d);
        let d = self.stem_bn.backward(&d);
        self.stem.backward(&d)
    }
}

impl<T: Real> Module<T> for EegEncoder<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem.visit_params(f);
        self.stem_bn.visit_params(f);
        self.stages.iter().for_each(|s| s.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params_mut(f);
        self.stem_bn.visit_params_mut(f);
        self.stages.iter_mut().for_each(|s| s.visit_params_mut(f));
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.stem_bn.visit_buffers(f);
        self.stages.iter().for_each(|s| s.visit_buffers(f));
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.stem_bn.visit_buffers_mut(f);
        self.stages.iter_mut().for_each(|s| s.visit_buffers_mut(f));
    }
    fn set_training(&mut self, training: bool) {
        self.stem_bn.set_training(training);
        self.stages.iter_mut().for_each(|s| s.set_training(training));
    }
}
