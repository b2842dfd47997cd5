use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Split;
use crate::linalg::{softmax, Matrix};
use crate::trainer::{cross_entropy, label_index, supervised_step, Adam, CropDataset, ExperimentConfig, Heads, Model, Objective};
use crate::{Error, Result};

use super::{ClassMetrics, EMBED_CHUNK};

pub const WEIGHT_DECAYS: [f64; 3] = [0.1, 0.01, 0.0001];

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedOptions {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decays: Vec<f64>,
}

impl Default for SupervisedOptions {
    fn default() -> Self {
        Self { max_epochs: 50, patience: 5, lr: 1e-3, batch_size: 256, weight_decays: WEIGHT_DECAYS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedReport {
    pub weight_decay: f64,
    /// Epochs trained on the train split before the best validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// `(weight decay, best validation loss)` for every candidate.
    pub grid: Vec<(f64, f64)>,
    /// Epochs of the continued train+validation phase.
    pub continued_epochs: usize,
    /// Recording-level test metrics from averaged crop probabilities.
    pub test: ClassMetrics,
}

type Labeled = Vec<((usize, usize), usize)>;

fn labeled(ds: &CropDataset, splits: &[Split]) -> Labeled {
    ds.all_crops()
        .into_iter()
        .filter(|c| splits.contains(&ds.recordings[c.0].split))
        .filter_map(|c| ds.recordings[c.0].label.and_then(label_index).map(|y| (c, y)))
        .collect()
}

fn logits(model: &Model, ds: &CropDataset, idx: &[(usize, usize)]) -> Result<Matrix> {
    let h = model.embed(&ds.tensor(idx), EMBED_CHUNK)?;
    let Heads::Supervised { mlp } = &model.heads else {
        return Err(Error::InvalidArgument("not a supervised model".into()));
    };
    Ok(Matrix::from_tensor(&mlp.infer(&h)))
}

fn mean_loss(model: &Model, ds: &CropDataset, items: &Labeled) -> Result<f64> {
    let mut total = 0.0;
    for chunk in items.chunks(EMBED_CHUNK) {
        let idx: Vec<(usize, usize)> = chunk.iter().map(|c| c.0).collect();
        let y: Vec<usize> = chunk.iter().map(|c| c.1).collect();
        total += cross_entropy(&logits(model, ds, &idx)?, &y).0 * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

fn epoch(model: &mut Model, adam: &mut Adam, ds: &CropDataset, items: &Labeled, opts: &SupervisedOptions, wd: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut order = items.clone();
    order.shuffle(rng);
    let b = opts.batch_size.min(order.len()).max(1);
    model.set_training(true);
    let mut total = 0.0;
    let steps = order.len() / b;
    for s in 0..steps {
        for m in model.trainable() {
            m.zero_grad();
        }
        let (loss, _) = supervised_step(model, ds, &order[s * b..(s + 1) * b])?;
        adam.step(&mut model.trainable(), opts.lr, wd)?;
        total += loss / steps as f64;
    }
    model.set_training(false);
    Ok(total)
}

/// End-to-end encoder plus MLP head trained on labels. `ds` must hold the
/// train, val and test splits; `cfg` supplies crop length, width and seed.
pub fn supervised_reference(cfg: &ExperimentConfig, ds: &CropDataset, opts: &SupervisedOptions) -> Result<SupervisedReport> {
    let mut cfg = cfg.clone();
    cfg.objective = Objective::Supervised;
    let train = labeled(ds, &[Split::Train]);
    let val = labeled(ds, &[Split::Val]);
    let test = labeled(ds, &[Split::Test]);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Degenerate("supervised reference needs labeled train, val and test crops".into()));
    }
    let mut best: Option<(f64, Model, Adam, f64, usize)> = None;
    let mut grid = Vec::new();
    for &wd in &opts.weight_decays {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        let mut model = Model::new(&cfg)?;
        let mut adam = Adam::default();
        let mut snapshot = (mean_loss(&model, ds, &val)?, model.clone(), adam.clone(), 0);
        let mut stale = 0;
        for e in 1..=opts.max_epochs {
            epoch(&mut model, &mut adam, ds, &train, opts, wd, &mut rng)?;
            let v = mean_loss(&model, ds, &val)?;
            if v < snapshot.0 {
                snapshot = (v, model.clone(), adam.clone(), e);
                stale = 0;
            } else {
                stale += 1;
                if stale >= opts.patience {
                    break;
                }
            }
        }
        grid.push((wd, snapshot.0));
        if best.as_ref().is_none_or(|b| snapshot.0 < b.0) {
            best = Some((snapshot.0, snapshot.1, snapshot.2, wd, snapshot.3));
        }
    }
    let (best_val_loss, mut model, mut adam, weight_decay, best_epoch) = best.expect("at least one weight decay");
    let both: Labeled = train.iter().chain(&val).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);
    let mut continued_epochs = 0;
    if best_epoch > 0 {
        while continued_epochs < opts.max_epochs {
            let l = epoch(&mut model, &mut adam, ds, &both, opts, weight_decay, &mut rng)?;
            continued_epochs += 1;
            if l < best_val_loss {
                break;
            }
        }
    }
    let test_metrics = recording_metrics(&model, ds, &test)?;
    Ok(SupervisedReport { weight_decay, best_epoch, best_val_loss, grid, continued_epochs, test: test_metrics })
}

/// Averages crop class probabilities within each recording.
fn recording_metrics(model: &Model, ds: &CropDataset, items: &Labeled) -> Result<ClassMetrics> {
    let mut recs: Vec<usize> = items.iter().map(|c| c.0 .0).collect();
    recs.dedup();
    let mut truth = Vec::new();
    let mut scores = Vec::new();
    for r in recs {
        let rows: Vec<&((usize, usize), usize)> = items.iter().filter(|c| c.0 .0 == r).collect();
        let idx: Vec<(usize, usize)> = rows.iter().map(|c| c.0).collect();
        let l = logits(model, ds, &idx)?;
        let mut p = vec![0.0; l.cols];
        for i in 0..l.rows {
            p.iter_mut().zip(softmax(l.row(i))).for_each(|(a, b)| *a += b / l.rows as f64);
        }
        truth.push(rows[0].1);
        scores.push(p);
    }
    Ok(ClassMetrics::from_scores(&truth, &scores))
}
