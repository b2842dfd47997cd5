//! Batch construction, optimizers and the pretraining loop for every objective.

mod config;
mod data;
mod model;
mod optim;

use std::collections::HashMap;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{ExperimentConfig, Objective};
pub use data::{crops_tensor, standardized_signal, CropDataset, DataOptions, RecordingCrops, SubjectEntry, CACHE_ENV};
pub use model::{Bilinear, Checkpoint, Heads, Model, NUM_CLASSES};
pub use optim::{check_finite, ema_update, Adam, Lars, Schedule, LARS_EPS, LARS_MOMENTUM};

use crate::corpus::Label;
use crate::encoders::TextEncoder;
use crate::linalg::{logsumexp, softmax, Matrix};
use crate::losses::{infonce, mflag_loss, mil_infonce, similarity, MilOptions, PositiveSets};
use crate::nn::{Linear, Module, Tensor};
use crate::ssl::{self, augment, sample_rp, sample_ts, LogisticHead};
use crate::{Error, Result};

/// Crops and report units for one contrastive step.
#[derive(Debug, Clone)]
pub struct MultimodalBatch {
    pub crops: Vec<(usize, usize)>,
    pub eeg_subjects: Vec<String>,
    pub texts: Vec<String>,
    pub text_subjects: Vec<String>,
    pub pos: PositiveSets,
}

/// Per-epoch shuffled walk over a subject pool.
#[derive(Debug, Clone)]
pub struct SubjectQueue {
    pool: Vec<usize>,
    order: Vec<usize>,
    next: usize,
}

impl SubjectQueue {
    pub fn new(pool: Vec<usize>) -> Self {
        Self { order: Vec::new(), next: 0, pool }
    }

    /// `k` distinct subjects; reshuffles when fewer than `k` remain in the current pass.
    pub fn take<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Vec<usize> {
        let k = k.min(self.pool.len());
        if self.next + k > self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.next = 0;
        }
        let out = self.order[self.next..self.next + k].to_vec();
        self.next += k;
        out
    }
}

/// Draws `subjects` subjects without replacement, then up to `n` crops and
/// `m` text units per subject, also without replacement.
pub fn build_batch<R: Rng + ?Sized>(
    ds: &CropDataset,
    queue: &mut SubjectQueue,
    subjects: usize,
    n: usize,
    m: usize,
    rng: &mut R,
) -> MultimodalBatch {
    let mut b = MultimodalBatch {
        crops: Vec::new(),
        eeg_subjects: Vec::new(),
        texts: Vec::new(),
        text_subjects: Vec::new(),
        pos: PositiveSets::diagonal(0),
    };
    for si in queue.take(subjects, rng) {
        let s = &ds.subjects[si];
        for i in index::sample(rng, s.crops.len(), n.min(s.crops.len())) {
            b.crops.push(s.crops[i]);
            b.eeg_subjects.push(s.id.clone());
        }
        for i in index::sample(rng, s.texts.len(), m.min(s.texts.len())) {
            b.texts.push(s.texts[i].clone());
            b.text_subjects.push(s.id.clone());
        }
    }
    b.pos = PositiveSets::from_subjects(&b.eeg_subjects, &b.text_subjects);
    b
}

/// Memoized frozen text features.
pub struct TextCache<'a> {
    encoder: &'a dyn TextEncoder,
    map: HashMap<String, Vec<f64>>,
}

impl<'a> TextCache<'a> {
    pub fn new(encoder: &'a dyn TextEncoder) -> Self {
        Self { encoder, map: HashMap::new() }
    }

    pub fn get(&mut self, texts: &[String]) -> Vec<Vec<f64>> {
        texts.iter().map(|t| self.map.entry(t.clone()).or_insert_with(|| self.encoder.embed(t)).clone()).collect()
    }
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f32> {
    Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect::<Vec<_>>())
}

fn split_half(m: &Matrix) -> (Matrix, Matrix) {
    let h = m.rows / 2;
    let c = m.cols;
    (Matrix::from_vec(h, c, m.data[..h * c].to_vec()), Matrix::from_vec(m.rows - h, c, m.data[h * c..].to_vec()))
}

fn stack(parts: &[&Matrix]) -> Tensor<f32> {
    let cols = parts[0].cols;
    let rows: usize = parts.iter().map(|p| p.rows).sum();
    Tensor::from_vec(&[rows, cols], parts.iter().flat_map(|p| p.data.iter().map(|&v| v as f32)).collect())
}

fn add_head_grads(head: &mut Linear<f32>, d_w: &[f64], d_b: f64) {
    head.weight.grad.iter_mut().zip(d_w).for_each(|(g, d)| *g += *d as f32);
    head.bias.grad[0] += d_b as f32;
}

fn logistic_head(head: &Linear<f32>) -> LogisticHead {
    LogisticHead { w: head.weight.value.iter().map(|&v| v as f64).collect(), b: head.bias.value[0] as f64 }
}

/// Mean softmax cross-entropy over logits rows; returns the loss and dlogits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows as f64;
    let mut loss = 0.0;
    let mut g = Matrix::zeros(logits.rows, logits.cols);
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        loss += (logsumexp(row) - row[y]) / n;
        let mut p = softmax(row);
        p[y] -= 1.0;
        g.row_mut(r).iter_mut().zip(&p).for_each(|(d, v)| *d = v / n);
    }
    (loss, g)
}

pub fn label_index(l: Label) -> Option<usize> {
    match l {
        Label::Normal => Some(0),
        Label::Abnormal => Some(1),
        Label::Unknown => None,
    }
}

/// One forward/backward pass; gradients are accumulated on `model`.
struct Stepper<'a, 'b> {
    cfg: &'a ExperimentConfig,
    ds: &'a CropDataset,
    texts: TextCache<'b>,
    queue: SubjectQueue,
    all_crops: Vec<(usize, usize)>,
    labeled: Vec<((usize, usize), usize)>,
    temporal: Vec<usize>,
    sequences: Vec<(usize, usize)>,
    batch: usize,
}

impl<'a, 'b> Stepper<'a, 'b> {
    fn new(cfg: &'a ExperimentConfig, ds: &'a CropDataset, text: &'b dyn TextEncoder) -> Result<Self> {
        let all_crops = ds.all_crops();
        let obj = cfg.objective;
        let mut s = Self {
            cfg,
            ds,
            texts: TextCache::new(text),
            queue: SubjectQueue::new(Vec::new()),
            labeled: Vec::new(),
            temporal: Vec::new(),
            sequences: Vec::new(),
            batch: cfg.batch_size.min(all_crops.len()),
            all_crops,
        };
        if s.all_crops.is_empty() {
            return Err(Error::Degenerate("training split has no crops".into()));
        }
        if obj.is_multimodal() {
            let pool = ds.multimodal_subjects();
            if pool.len() < 2 {
                return Err(Error::BatchTooSmall { what: "multimodal training (subjects with text)", needed: 2, got: pool.len() });
            }
            s.queue = SubjectQueue::new(pool);
        }
        match obj {
            Objective::Supervised => {
                s.labeled = s
                    .all_crops
                    .iter()
                    .filter_map(|&c| ds.recordings[c.0].label.and_then(label_index).map(|y| (c, y)))
                    .collect();
                if s.labeled.len() < 2 {
                    return Err(Error::BatchTooSmall { what: "supervised training (labeled crops)", needed: 2, got: s.labeled.len() });
                }
                s.batch = s.batch.min(s.labeled.len());
            }
            Objective::Rp | Objective::Ts => {
                let need = if obj == Objective::Rp { 2 } else { 3 };
                s.temporal = (0..ds.recordings.len()).filter(|&r| ds.recordings[r].crops.len() >= need).collect();
                if s.temporal.is_empty() {
                    return Err(Error::Degenerate(format!("no recording has {need} crops for {obj}")));
                }
            }
            Objective::Cpc => {
                let span = cfg.cpc_context + cfg.cpc_steps;
                for (r, rec) in ds.recordings.iter().enumerate() {
                    for start in 0..(rec.crops.len() + 1).saturating_sub(span) {
                        s.sequences.push((r, start));
                    }
                }
                if s.sequences.len() < 2 {
                    return Err(Error::Degenerate(format!("fewer than two {span}-crop sequences for cpc")));
                }
            }
            _ => {}
        }
        Ok(s)
    }

    fn steps_per_epoch(&self) -> usize {
        let total = if self.cfg.objective == Objective::Supervised { self.labeled.len() } else { self.all_crops.len() };
        (total / self.batch).max(1)
    }

    /// Runs one step and returns the loss and the subject ids involved.
    fn step<R: Rng>(&mut self, model: &mut Model, rng: &mut R) -> Result<(f64, Vec<String>)> {
        match self.cfg.objective {
            o if o.is_multimodal() => self.multimodal(model, rng),
            Objective::Byol | Objective::Vicreg | Objective::Contrawr => self.two_view(model, rng),
            Objective::Rp | Objective::Ts => self.temporal_step(model, rng),
            Objective::Cpc => self.cpc(model, rng),
            _ => self.supervised(model, rng),
        }
    }

    fn multimodal<R: Rng>(&mut self, model: &mut Model, rng: &mut R) -> Result<(f64, Vec<String>)> {
        let cfg = self.cfg;
        let (subjects, n, m) = match cfg.objective.mil_direction() {
            Some(_) => (cfg.subjects_per_batch(), cfg.n_crops, cfg.m_texts),
            None => (cfg.batch_size, 1, 1),
        };
        let batch = build_batch(self.ds, &mut self.queue, subjects, n, m, rng);
        let feats = self.texts.get(&batch.texts);
        let x = self.ds.tensor(&batch.crops);
        let h = model.encoder.forward(&x);
        let loss = match &mut model.heads {
            Heads::Elm { eeg, text } => {
                let e = eeg.forward(&h);
                let l = text.forward(&to_tensor(&feats));
                let s = similarity(&Matrix::from_tensor(&e), &Matrix::from_tensor(&l), cfg.tau)?;
                let lg = match cfg.objective.mil_direction() {
                    Some(direction) => mil_infonce(
                        &s,
                        &batch.pos,
                        &MilOptions { direction, aggregation: cfg.aggregation, per_subject_weighting: cfg.per_subject_weighting },
                    )?,
                    None => infonce(&s)?,
                };
                let (de, dl) = s.backward(&lg.grad);
                text.backward(&dl.to_tensor());
                let dh = eeg.backward(&de.to_tensor());
                model.encoder.backward(&dh);
                lg.loss
            }
            Heads::Mflag { eeg } => {
                let e = eeg.forward(&h);
                let r = mflag_loss(&Matrix::from_tensor(&h), &Matrix::from_tensor(&e), &Matrix::from_rows(&feats))?;
                let mut dh = eeg.backward(&r.d_e.to_tensor());
                dh.add_assign(&r.d_h.to_tensor());
                model.encoder.backward(&dh);
                r.total
            }
            _ => unreachable!("multimodal objective with unimodal heads"),
        };
        let mut ids = batch.eeg_subjects;
        ids.dedup();
        Ok((loss, ids))
    }

    fn two_view<R: Rng>(&mut self, model: &mut Model, rng: &mut R) -> Result<(f64, Vec<String>)> {
        let idx: Vec<(usize, usize)> =
            index::sample(rng, self.all_crops.len(), self.batch).into_iter().map(|i| self.all_crops[i]).collect();
        let mut views = Vec::with_capacity(2 * idx.len());
        for &c in &idx {
            views.push(augment(self.ds.crop(c), rng));
        }
        for &c in &idx {
            views.push(augment(self.ds.crop(c), rng));
        }
        let x = crops_tensor(&views.iter().collect::<Vec<_>>());
        let h = model.encoder.forward(&x);
        let cfg = self.cfg;
        let loss = match &mut model.heads {
            Heads::Byol { proj, pred, target_encoder, target_proj } => {
                let z = proj.forward(&h);
                let p = pred.forward(&z);
                // Batch statistics in the target too; its running averages are overwritten from the online network after the step.
                let zt = Matrix::from_tensor(&target_proj.forward(&target_encoder.forward(&x)));
                let (t1, t2) = split_half(&zt);
                let swapped = Matrix::from_vec(zt.rows, zt.cols, [t2.data, t1.data].concat());
                let lg = ssl::byol_loss(&Matrix::from_tensor(&p), &swapped)?;
                let dz = pred.backward(&lg.grad.to_tensor());
                let dh = proj.backward(&dz);
                model.encoder.backward(&dh);
                lg.loss
            }
            Heads::Vicreg { proj } | Heads::Contrawr { proj } => {
                let z = Matrix::from_tensor(&proj.forward(&h));
                let (z1, z2) = split_half(&z);
                let r = if cfg.objective == Objective::Vicreg {
                    ssl::vicreg_loss(&z1, &z2, &cfg.vicreg)?
                } else {
                    ssl::contrawr_loss(&z1, &z2, cfg.contrawr_tau)?
                };
                let dh = proj.backward(&stack(&[&r.d_a, &r.d_b]));
                model.encoder.backward(&dh);
                r.loss
            }
            _ => unreachable!("two-view objective with other heads"),
        };
        Ok((loss, idx.iter().map(|c| self.ds.recordings[c.0].subject_id.clone()).collect()))
    }

    fn temporal_step<R: Rng>(&mut self, model: &mut Model, rng: &mut R) -> Result<(f64, Vec<String>)> {
        let is_rp = self.cfg.objective == Objective::Rp;
        let per = if is_rp { 2 } else { 3 };
        let samples_n = (self.batch / per).max(2);
        let fixed = (!self.cfg.between_subject).then(|| self.temporal[rng.random_range(0..self.temporal.len())]);
        let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); per];
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        let mut guard = 0;
        while labels.len() < samples_n && guard < 100 * samples_n {
            guard += 1;
            let r = fixed.unwrap_or_else(|| self.temporal[rng.random_range(0..self.temporal.len())]);
            let n = self.ds.recordings[r].crops.len();
            let s = if is_rp { sample_rp(n, self.cfg.temporal_windows, rng) } else { sample_ts(n, rng) };
            if let Some(s) = s {
                for (g, &i) in groups.iter_mut().zip(&s.indices) {
                    g.push((r, i));
                }
                labels.push(s.label);
                ids.push(self.ds.recordings[r].subject_id.clone());
            }
        }
        if labels.len() < 2 {
            return Err(Error::Degenerate("could not draw temporal samples".into()));
        }
        let all: Vec<(usize, usize)> = groups.concat();
        let h = Matrix::from_tensor(&model.encoder.forward(&self.ds.tensor(&all)));
        let b = labels.len();
        let parts: Vec<Matrix> =
            (0..per).map(|k| Matrix::from_vec(b, h.cols, h.data[k * b * h.cols..(k + 1) * b * h.cols].to_vec())).collect();
        let (Heads::Rp { head } | Heads::Ts { head }) = &mut model.heads else { unreachable!("temporal heads") };
        let r = if is_rp {
            ssl::rp_loss(&parts[0], &parts[1], &labels, &logistic_head(head))?
        } else {
            ssl::ts_loss(&parts[0], &parts[1], &parts[2], &labels, &logistic_head(head))?
        };
        add_head_grads(head, &r.d_w, r.d_b);
        model.encoder.backward(&stack(&r.d_inputs.iter().collect::<Vec<_>>()));
        ids.dedup();
        Ok((r.loss, ids))
    }

    fn cpc<R: Rng>(&mut self, model: &mut Model, rng: &mut R) -> Result<(f64, Vec<String>)> {
        let (ctx, k) = (self.cfg.cpc_context, self.cfg.cpc_steps);
        let span = ctx + k;
        let b = (self.batch / span).clamp(2, self.sequences.len());
        let seqs: Vec<(usize, usize)> =
            index::sample(rng, self.sequences.len(), b).into_iter().map(|i| self.sequences[i]).collect();
        let idx: Vec<(usize, usize)> = seqs.iter().flat_map(|&(r, s)| (s..s + span).map(move |c| (r, c))).collect();
        let h = Matrix::from_tensor(&model.encoder.forward(&self.ds.tensor(&idx)));
        let d = h.cols;
        let row = |i: usize, t: usize| h.row(i * span + t);
        let Heads::Cpc { gru, bilinear } = &mut model.heads else { unreachable!("cpc heads") };
        let xs: Vec<Tensor<f32>> = (0..ctx)
            .map(|t| Tensor::from_vec(&[b, d], (0..b).flat_map(|i| row(i, t).iter().map(|&v| v as f32)).collect()))
            .collect();
        let c = Matrix::from_tensor(&gru.forward(&xs));
        let ws: Vec<Matrix> = (0..k).map(|s| bilinear.step(s)).collect();
        let mut dh = Matrix::zeros(h.rows, d);
        let mut dc = Matrix::zeros(b, d);
        let mut dw = vec![0.0f64; bilinear.w.len()];
        let mut loss = 0.0;
        let bf = b as f64;
        for i in 0..b {
            let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
            let chosen: Vec<usize> =
                index::sample(rng, others.len(), self.cfg.cpc_negatives.min(others.len())).into_iter().map(|j| others[j]).collect();
            let future = Matrix::from_rows(&(0..k).map(|s| row(i, ctx + s).to_vec()).collect::<Vec<_>>());
            let negs: Vec<Matrix> =
                (0..k).map(|s| Matrix::from_rows(&chosen.iter().map(|&j| row(j, ctx + s).to_vec()).collect::<Vec<_>>())).collect();
            let g = ssl::cpc_loss(c.row(i), &future, &negs, &ws)?;
            loss += g.loss / bf;
            dc.row_mut(i).iter_mut().zip(&g.d_context).for_each(|(a, v)| *a += v / bf);
            for s in 0..k {
                dh.row_mut(i * span + ctx + s).iter_mut().zip(g.d_future.row(s)).for_each(|(a, v)| *a += v / bf);
                for (n, &j) in chosen.iter().enumerate() {
                    dh.row_mut(j * span + ctx + s).iter_mut().zip(g.d_negatives[s].row(n)).for_each(|(a, v)| *a += v / bf);
                }
                let off = s * d * d;
                dw[off..off + d * d].iter_mut().zip(&g.d_w[s].data).for_each(|(a, v)| *a += v / bf);
            }
        }
        bilinear.w.grad.iter_mut().zip(&dw).for_each(|(g, v)| *g += *v as f32);
        let dxs = gru.backward(&dc.to_tensor());
        for (t, dx) in dxs.iter().enumerate() {
            for i in 0..b {
                dh.row_mut(i * span + t).iter_mut().zip(dx.row(i)).for_each(|(a, v)| *a += *v as f64);
            }
        }
        model.encoder.backward(&dh.to_tensor());
        let mut ids: Vec<String> = seqs.iter().map(|&(r, _)| self.ds.recordings[r].subject_id.clone()).collect();
        ids.dedup();
        Ok((loss, ids))
    }

    fn supervised<R: Rng>(&mut self, model: &mut Model, rng: &mut R) -> Result<(f64, Vec<String>)> {
        let pick: Vec<((usize, usize), usize)> =
            index::sample(rng, self.labeled.len(), self.batch).into_iter().map(|i| self.labeled[i]).collect();
        let (loss, ids) = supervised_step(model, self.ds, &pick)?;
        Ok((loss, ids))
    }
}

/// Cross-entropy step of encoder plus classification head on labeled crops.
pub fn supervised_step(model: &mut Model, ds: &CropDataset, pick: &[((usize, usize), usize)]) -> Result<(f64, Vec<String>)> {
    let idx: Vec<(usize, usize)> = pick.iter().map(|p| p.0).collect();
    let labels: Vec<usize> = pick.iter().map(|p| p.1).collect();
    let h = model.encoder.forward(&ds.tensor(&idx));
    let Heads::Supervised { mlp } = &mut model.heads else {
        return Err(Error::InvalidArgument("supervised step needs a supervised model".into()));
    };
    let logits = Matrix::from_tensor(&mlp.forward(&h));
    let (loss, g) = cross_entropy(&logits, &labels);
    let dh = mlp.backward(&g.to_tensor());
    model.encoder.backward(&dh);
    Ok((loss, idx.iter().map(|c| ds.recordings[c.0].subject_id.clone()).collect()))
}

/// Result of a pretraining run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f64>,
    pub steps_per_epoch: usize,
    pub rng: ChaCha8Rng,
}

fn copy_buffers(target: &mut dyn Module<f32>, online: &dyn Module<f32>) {
    let mut src = Vec::new();
    online.visit_buffers(&mut |b| src.push(b.value.clone()));
    let mut i = 0;
    target.visit_buffers_mut(&mut |b| {
        b.value.clone_from(&src[i]);
        i += 1;
    });
}

/// Trains a fresh model for `cfg.epochs` epochs on `ds`. The text encoder is
/// only read. Each step's loss is appended to `log` as `step epoch lr loss`.
pub fn pretrain(
    cfg: &ExperimentConfig,
    ds: &CropDataset,
    text: &dyn TextEncoder,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let shuffled;
    let ds = if cfg.shuffle_reports && cfg.objective.is_multimodal() {
        let mut copy = ds.clone();
        copy.shuffle_reports(&mut rng);
        shuffled = copy;
        &shuffled
    } else {
        ds
    };
    let mut model = Model::new(cfg)?;
    model.set_training(true);
    let mut stepper = Stepper::new(cfg, ds, text)?;
    let steps_per_epoch = stepper.steps_per_epoch();
    let schedule = Schedule {
        base_lr: cfg.base_lr,
        batch_size: cfg.batch_size,
        warmup_epochs: cfg.warmup_epochs,
        epochs: cfg.epochs,
        steps_per_epoch,
    };
    let mut lars = Lars::new();
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(schedule.total_steps());
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "step\tepoch\tlr\tloss").map_err(|e| Error::io("<log>", e))?;
    }
    for step in 0..schedule.total_steps() {
        let epoch = step / steps_per_epoch;
        for m in model.trainable() {
            m.zero_grad();
        }
        let (loss, ids) = stepper.step(&mut model, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss, batch: ids.join(",") });
        }
        let lr = if cfg.objective == Objective::Supervised { cfg.base_lr } else { schedule.lr_at(step) };
        let mut trainable = model.trainable();
        if cfg.objective == Objective::Supervised {
            adam.step(&mut trainable, lr, cfg.weight_decay)?;
        } else {
            lars.step(&mut trainable, lr, cfg.weight_decay)?;
        }
        if let Heads::Byol { proj, target_encoder, target_proj, .. } = &mut model.heads {
            ema_update(target_encoder.as_mut(), &model.encoder, cfg.ema_decay);
            ema_update(target_proj, &*proj, cfg.ema_decay);
            copy_buffers(target_encoder.as_mut(), &model.encoder);
            copy_buffers(target_proj, &*proj);
        }
        losses.push(loss);
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{step}\t{epoch}\t{lr}\t{loss}").map_err(|e| Error::io("<log>", e))?;
        }
        log::debug!("step {step} epoch {epoch} lr {lr:.5} loss {loss:.5}");
    }
    model.set_training(false);
    Ok(TrainOutcome { model, losses, steps_per_epoch, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::encoders::StubTextEncoder;
    use crate::synth::{generate, SynthSpec};

    fn corpus(n_subjects: usize, duration_s: f64) -> (tempfile::TempDir, CropDataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_subjects,
            duration_s,
            pretrain_fraction: 1.0,
            train_fraction: 0.0,
            val_fraction: 0.0,
            ..SynthSpec::default()
        };
        let manifest = generate(&spec, dir.path()).unwrap();
        let cfg = small(Objective::ElmMilEL);
        let ds = CropDataset::load(&manifest, &[Split::Pretrain], &DataOptions::from_config(&cfg)).unwrap();
        (dir, ds)
    }

    fn small(objective: Objective) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(objective);
        c.crop_seconds = 5.0;
        c.width = 4;
        c.n_crops = 4;
        c.m_texts = 2;
        c.batch_size = 32;
        c.epochs = 2;
        c.warmup_epochs = 0;
        c.cpc_context = 3;
        c.cpc_steps = 2;
        c.min_duration_s = 10.0;
        c
    }

    fn toy_dataset(crops_per_subject: &[usize]) -> CropDataset {
        let mut recs = Vec::new();
        let mut texts = std::collections::BTreeMap::new();
        for (s, &n) in crops_per_subject.iter().enumerate() {
            let id = format!("s{s}");
            let crop = crate::eegprep::Crop {
                subject_id: id.clone(),
                session_id: "1".into(),
                crop_index: 0,
                channels: 1,
                len: 1,
                data: vec![0.0],
            };
            recs.push(RecordingCrops {
                subject_id: id.clone(),
                session_id: "1".into(),
                label: None,
                split: Split::Pretrain,
                crops: vec![crop; n],
            });
            texts.insert(id.clone(), (0..10).map(|k| format!("{id} unit {k}")).collect());
        }
        CropDataset::assemble(1, recs, texts)
    }

    #[test]
    fn batch_has_subjects_per_batch_and_caps() {
        let ds = toy_dataset(&[40; 40]);
        let mut cfg = ExperimentConfig::new(Objective::ElmMilEL);
        cfg.n_crops = 32;
        cfg.m_texts = 8;
        cfg.batch_size = 1024;
        assert_eq!(cfg.subjects_per_batch(), 32);
        let mut q = SubjectQueue::new(ds.multimodal_subjects());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = build_batch(&ds, &mut q, cfg.subjects_per_batch(), 32, 8, &mut rng);
        let mut subjects = b.eeg_subjects.clone();
        subjects.dedup();
        assert_eq!(subjects.len(), 32);
        assert_eq!(b.crops.len(), 1024);
        assert_eq!(b.texts.len(), 256);
        let mut crops = b.crops.clone();
        crops.sort();
        crops.dedup();
        assert_eq!(crops.len(), 1024);
        for (i, s) in b.eeg_subjects.iter().enumerate() {
            for (j, t) in b.text_subjects.iter().enumerate() {
                assert_eq!(b.pos.q[i].contains(&j), s == t);
            }
        }
    }

    #[test]
    fn short_subject_contributes_what_it_has() {
        let ds = toy_dataset(&[3, 40]);
        let mut q = SubjectQueue::new(vec![0, 1]);
        let b = build_batch(&ds, &mut q, 2, 32, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.eeg_subjects.iter().filter(|s| *s == "s0").count(), 3);
        assert_eq!(b.eeg_subjects.iter().filter(|s| *s == "s1").count(), 32);
    }

    #[test]
    fn batches_replay_under_a_fixed_seed() {
        let ds = toy_dataset(&[5; 12]);
        let run = || {
            let mut q = SubjectQueue::new(ds.multimodal_subjects());
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            (0..6).map(|_| build_batch(&ds, &mut q, 4, 3, 2, &mut rng).crops).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn queue_visits_every_subject_once_per_pass() {
        let mut q = SubjectQueue::new((0..12).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| q.take(4, &mut rng)).collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn mil_loss_decreases_and_text_encoder_is_untouched() {
        let (_dir, ds) = corpus(20, 60.0);
        let text = StubTextEncoder::new(0);
        let probe: Vec<String> = ds.subjects.iter().flat_map(|s| s.texts.iter().take(1).cloned()).collect();
        let before: Vec<Vec<f64>> = probe.iter().map(|t| text.embed(t)).collect();
        let mut cfg = small(Objective::ElmMilEL);
        cfg.epochs = 4;
        let mut log = Vec::new();
        let out = pretrain(&cfg, &ds, &text, Some(&mut log)).unwrap();
        let after: Vec<Vec<f64>> = probe.iter().map(|t| text.embed(t)).collect();
        assert_eq!(before, after);
        let l = &out.losses;
        assert_eq!(l.len(), out.steps_per_epoch * cfg.epochs);
        let k = l.len() / 4;
        let head: f64 = l[..k].iter().sum::<f64>() / k as f64;
        let tail: f64 = l[l.len() - k..].iter().sum::<f64>() / k as f64;
        assert!(tail < head, "{head} -> {tail}");
        let log = String::from_utf8(log).unwrap();
        assert_eq!(log.lines().count(), l.len() + 1);
        assert!(log.starts_with("step\tepoch\tlr\tloss"));
    }

    #[test]
    fn seeded_runs_repeat_and_every_objective_trains() {
        let (_dir, ds) = corpus(8, 40.0);
        let text = StubTextEncoder::new(0);
        for obj in Objective::ALL {
            let mut cfg = small(obj);
            cfg.epochs = 1;
            cfg.shuffle_reports = obj == Objective::ElmMilEL;
            if obj == Objective::ElmEl || obj == Objective::ElmL {
                cfg.batch_size = 8;
            }
            let a = pretrain(&cfg, &ds, &text, None).unwrap_or_else(|e| panic!("{obj}: {e}"));
            assert!(a.losses.iter().all(|l| l.is_finite()), "{obj}");
            if matches!(obj, Objective::ElmMilEL | Objective::Byol | Objective::Cpc) {
                let b = pretrain(&cfg, &ds, &text, None).unwrap();
                assert_eq!(a.losses, b.losses, "{obj}");
            }
        }
    }

    #[test]
    fn cross_entropy_matches_oracle() {
        let logits = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]);
        let (l, g) = cross_entropy(&logits, &[0, 1]);
        let p0 = 1.0 / (1.0 + (-2.0f64).exp());
        let p1 = 1.0 / (1.0 + (-1.5f64).exp());
        assert!((l - (-(p0.ln()) - p1.ln()) / 2.0).abs() < 1e-12);
        assert!((g.get(0, 0) - (p0 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.get(1, 0) - (1.0 - p1) / 2.0).abs() < 1e-12);
    }
}
