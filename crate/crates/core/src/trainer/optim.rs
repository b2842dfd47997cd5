use crate::nn::{Module, Param, ParamKind, Real};
use crate::{Error, Result};

pub const LARS_MOMENTUM: f64 = 0.9;
pub const LARS_EPS: f64 = 1e-9;

/// Linear warmup to `base_lr * batch_size / 256`, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    pub fn peak(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_epochs * self.steps_per_epoch;
        let total = self.total_steps();
        if step < warm {
            return self.peak() * step as f64 / warm as f64;
        }
        if total <= warm {
            return self.peak();
        }
        let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
        self.peak() * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Fails on the first parameter holding a non-finite gradient.
pub fn check_finite<T: Real>(modules: &[&dyn Module<T>]) -> Result<()> {
    let mut bad = None;
    for m in modules {
        m.visit_params(&mut |p| {
            if bad.is_none() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
    }
    bad.map_or(Ok(()), |name| Err(Error::NonFiniteGradient(name)))
}

fn adapts(p: &Param<impl Real>) -> bool {
    p.kind == ParamKind::Weight
}

/// Layer-wise adaptive rate scaling with momentum. Bias and normalization
/// parameters take plain momentum steps without weight decay.
#[derive(Debug, Clone, Default)]
pub struct Lars {
    velocity: Vec<Vec<f64>>,
}

impl Lars {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step<T: Real>(&mut self, modules: &mut [&mut dyn Module<T>], lr: f64, weight_decay: f64) -> Result<()> {
        check_finite(&modules.iter().map(|m| &**m as &dyn Module<T>).collect::<Vec<_>>())?;
        let mut i = 0;
        for m in modules.iter_mut() {
            m.visit_params_mut(&mut |p| {
                if self.velocity.len() <= i {
                    self.velocity.push(vec![0.0; p.len()]);
                }
                let v = &mut self.velocity[i];
                i += 1;
                let w: Vec<f64> = p.value.iter().map(|x| x.as_f64()).collect();
                let mut g: Vec<f64> = p.grad.iter().map(|x| x.as_f64()).collect();
                let mut local = lr;
                if adapts(p) {
                    g.iter_mut().zip(&w).for_each(|(g, w)| *g += weight_decay * w);
                    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let gn = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if wn > 0.0 && gn > 0.0 {
                        local = lr * wn / (gn + LARS_EPS);
                    }
                }
                for ((val, vel), (g, w)) in p.value.iter_mut().zip(v.iter_mut()).zip(g.iter().zip(&w)) {
                    *vel = LARS_MOMENTUM * *vel + local * g;
                    *val = T::of(w - *vel);
                }
            });
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn step<T: Real>(&mut self, modules: &mut [&mut dyn Module<T>], lr: f64, weight_decay: f64) -> Result<()> {
        check_finite(&modules.iter().map(|m| &**m as &dyn Module<T>).collect::<Vec<_>>())?;
        self.t += 1;
        let (b1, b2, eps, t) = (self.beta1, self.beta2, self.eps, self.t);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut i = 0;
        for module in modules.iter_mut() {
            module.visit_params_mut(&mut |p| {
                if self.m.len() <= i {
                    self.m.push(vec![0.0; p.len()]);
                    self.v.push(vec![0.0; p.len()]);
                }
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                i += 1;
                let wd = if adapts(p) { weight_decay } else { 0.0 };
                for k in 0..p.len() {
                    let w = p.value[k].as_f64();
                    let g = p.grad[k].as_f64() + wd * w;
                    m[k] = b1 * m[k] + (1.0 - b1) * g;
                    v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                    p.value[k] = T::of(w - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps));
                }
            });
        }
        Ok(())
    }
}

/// `target <- decay * target + (1 - decay) * online`, parameter by parameter.
pub fn ema_update<T: Real>(target: &mut dyn Module<T>, online: &dyn Module<T>, decay: f64) {
    crate::nn::zip_params(target, online, &mut |t, o| {
        for (a, b) in t.value.iter_mut().zip(&o.value) {
            *a = T::of(decay * a.as_f64() + (1.0 - decay) * b.as_f64());
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use proptest::prelude::*;

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit_params(&self, f: &mut dyn FnMut(&Param<f64>)) {
            f(&self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
            f(&mut self.0)
        }
    }

    fn one(kind: ParamKind, w: &[f64], g: &[f64]) -> One {
        let mut p = Param::new("p", &[w.len()], kind, w.to_vec());
        p.grad = g.to_vec();
        One(p)
    }

    fn sched(steps_per_epoch: usize) -> Schedule {
        Schedule { base_lr: 0.06, batch_size: 2048, warmup_epochs: 4, epochs: 50, steps_per_epoch }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched(10);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(40) - 0.48).abs() < 1e-12);
        assert!(s.lr_at(s.total_steps() - 1) < 1e-4 * 0.48);
        assert!(s.lr_at(s.total_steps()).abs() < 1e-15);
        let (a, b) = (s.lr_at(39), s.lr_at(41));
        assert!((a - 0.48).abs() < 0.02 && (b - 0.48).abs() < 0.02);
    }

    #[test]
    fn lars_fixed_point_and_zero_lr() {
        let mut m = one(ParamKind::Weight, &[1.0, -2.0], &[0.0, 0.0]);
        Lars::new().step(&mut [&mut m as &mut dyn Module<f64>], 0.5, 0.0).unwrap();
        assert_eq!(m.0.value, vec![1.0, -2.0]);
        let mut m = one(ParamKind::Weight, &[1.0, -2.0], &[0.3, 0.1]);
        Lars::new().step(&mut [&mut m as &mut dyn Module<f64>], 0.0, 1e-4).unwrap();
        assert_eq!(m.0.value, vec![1.0, -2.0]);
    }

    #[test]
    fn lars_scalar_matches_closed_form() {
        // One weight w with gradient g: w - lr * |w| / (|g + wd w| + eps) * (g + wd w).
        let (w, g, lr, wd) = (1.5, -0.2, 0.1, 0.01);
        let mut m = one(ParamKind::Weight, &[w], &[g]);
        Lars::new().step(&mut [&mut m as &mut dyn Module<f64>], lr, wd).unwrap();
        let gg: f64 = g + wd * w;
        let expect = w - lr * w.abs() / (gg.abs() + LARS_EPS) * gg;
        assert!((m.0.value[0] - expect).abs() < 1e-12);
        // Bias parameters take a plain step without decay.
        let mut b = one(ParamKind::Bias, &[w], &[g]);
        Lars::new().step(&mut [&mut b as &mut dyn Module<f64>], lr, wd).unwrap();
        assert!((b.0.value[0] - (w - lr * g)).abs() < 1e-12);
    }

    #[test]
    fn lars_rejects_nonfinite() {
        let mut m = one(ParamKind::Weight, &[1.0], &[f64::NAN]);
        assert!(matches!(
            Lars::new().step(&mut [&mut m as &mut dyn Module<f64>], 0.1, 0.0),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn ema_recurrence() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut online = Linear::<f64>::new("l", 3, 2, &mut rng);
        let mut target = online.clone();
        let mut expect: Vec<f64> = target.weight.value.clone();
        for k in 0..5 {
            online.weight.value.iter_mut().for_each(|v| *v += 0.1 * k as f64);
            for (e, o) in expect.iter_mut().zip(&online.weight.value) {
                *e = 0.9 * *e + 0.1 * o;
            }
            ema_update(&mut target, &online, 0.9);
        }
        for (a, b) in target.weight.value.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn lars_trust_ratio_invariance(c in 0.1f64..10.0, w0 in 0.5f64..2.0, g0 in -1.0f64..1.0) {
            let w = [w0, -0.5 * w0, 0.25];
            let g = [g0, 0.3, -0.2];
            let mut a = one(ParamKind::Weight, &w, &g);
            let ws: Vec<f64> = w.iter().map(|v| v * c).collect();
            let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
            let mut b = one(ParamKind::Weight, &ws, &gs);
            Lars::new().step(&mut [&mut a as &mut dyn Module<f64>], 0.1, 0.01).unwrap();
            Lars::new().step(&mut [&mut b as &mut dyn Module<f64>], 0.1, 0.01).unwrap();
            for i in 0..3 {
                let da = a.0.value[i] - w[i];
                let db = b.0.value[i] - ws[i];
                prop_assert!((db - c * da).abs() < 1e-9 * c.max(1.0));
            }
        }

        #[test]
        fn schedule_is_bounded(step in 0usize..600) {
            let s = sched(12);
            let lr = s.lr_at(step);
            prop_assert!(lr >= 0.0 && lr <= s.peak() + 1e-12);
        }
    }
}
