//! EEG-only self-supervised baselines: augmentations, a short run of each
//! objective and a linear probe against the untrained encoder.
//!
//! cargo run --release --example ssl_baselines

use elmkit::corpus::Split;
use elmkit::encoders::StubTextEncoder;
use elmkit::eval::{embed_recordings, linear_probe, recording_matrix, ProbeGrid};
use elmkit::ssl::{augment_with, AugmentationParams};
use elmkit::synth::{generate, SynthSpec};
use elmkit::trainer::{pretrain, CropDataset, DataOptions, ExperimentConfig, Model, Objective};
use rand::SeedableRng;

fn probe(model: &Model, ds: &CropDataset) -> elmkit::Result<f64> {
    let (x, y) = recording_matrix(&embed_recordings(model, ds)?, false)?;
    Ok(linear_probe(&x, &y, 1.0, &ProbeGrid::default(), 0)?.balanced_accuracy)
}

fn main() -> elmkit::Result<()> {
    let dir = std::env::temp_dir().join("elmkit-ssl");
    let spec = SynthSpec { n_subjects: 60, duration_s: 90.0, burst_uv: 40.0, burst_every_s: 4.0, train_fraction: 0.0, val_fraction: 0.0, ..SynthSpec::default() };
    let manifest = generate(&spec, &dir)?;

    let mut base = ExperimentConfig::new(Objective::Byol);
    base.crop_seconds = 10.0;
    base.width = 16;
    base.base_lr = 0.01;
    base.epochs = 3;
    base.warmup_epochs = 1;
    let opts = DataOptions::from_config(&base);
    let train = CropDataset::load(&manifest, &[Split::Pretrain], &opts)?;
    let test = CropDataset::load(&manifest, &[Split::Test], &opts)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let crop = train.crop((0, 0));
    let params = AugmentationParams::sample(crop.len, &mut rng);
    let view = augment_with(crop, &params);
    println!("augmentation {params:?}\n  first samples {:?} -> {:?}\n", &crop.data[..3], &view.data[..3]);

    println!("untrained encoder probe: {:.3}", probe(&Model::new(&base)?, &test)?);
    for objective in [Objective::Byol, Objective::Vicreg, Objective::Contrawr, Objective::Rp, Objective::Ts, Objective::Cpc] {
        let cfg = ExperimentConfig { objective, ..base.clone() };
        let out = pretrain(&cfg, &train, &StubTextEncoder::new(0), None)?;
        let last = out.losses.last().copied().unwrap_or(f64::NAN);
        println!("{:<9} final loss {last:>8.4}  probe {:.3}", objective.as_str(), probe(&out.model, &test)?);
    }
    Ok(())
}
