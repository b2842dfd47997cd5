//! Fully supervised encoder plus MLP head with a weight-decay grid and early
//! stopping, as a reference point for the pretrained encoders.
//!
//! cargo run --release --example supervised_reference

use elmkit::corpus::Split;
use elmkit::eval::{supervised_reference, SupervisedOptions};
use elmkit::synth::{generate, SynthSpec};
use elmkit::trainer::{CropDataset, DataOptions, ExperimentConfig, Objective};

fn main() -> elmkit::Result<()> {
    let dir = std::env::temp_dir().join("elmkit-supervised");
    let spec = SynthSpec { n_subjects: 100, duration_s: 90.0, pretrain_fraction: 0.0, train_fraction: 0.5, val_fraction: 0.2, burst_uv: 40.0, burst_every_s: 4.0, ..SynthSpec::default() };
    let manifest = generate(&spec, &dir)?;

    let mut cfg = ExperimentConfig::new(Objective::Supervised);
    cfg.crop_seconds = 10.0;
    cfg.width = 8;
    let ds = CropDataset::load(&manifest, &[Split::Train, Split::Val, Split::Test], &DataOptions::from_config(&cfg))?;

    let opts = SupervisedOptions { max_epochs: 15, patience: 4, batch_size: 32, ..Default::default() };
    let r = supervised_reference(&cfg, &ds, &opts)?;
    for (wd, loss) in &r.grid {
        println!("weight decay {wd:<7} best validation loss {loss:.4}");
    }
    println!("chose {} after {} epochs, continued {} epoch(s) on train+val", r.weight_decay, r.best_epoch, r.continued_epochs);
    println!("test balanced accuracy {:.3}, AUROC {:.3}", r.test.balanced_accuracy, r.test.auroc.unwrap_or(f64::NAN));
    Ok(())
}
