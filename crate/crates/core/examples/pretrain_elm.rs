//! Pretrain an EEG encoder against report text with the joint MIL objective,
//! then evaluate retrieval, zero-shot classification and a linear probe.
//!
//! cargo run --release --example pretrain_elm

use elmkit::config::KvConfig;
use elmkit::corpus::Split;
use elmkit::encoders::StubTextEncoder;
use elmkit::eval::{
    embed_recordings, linear_probe, recording_matrix, retrieval_pairs, retrieve, zero_shot, ProbeGrid, PromptEnsemble, RecordingEmbeddings,
    ZeroShotMode,
};
use elmkit::synth::{generate, SynthSpec};
use elmkit::trainer::{label_index, pretrain, CropDataset, DataOptions, ExperimentConfig, Model};

const CONFIG: &str = "
objective = elm_mil_e_l
crop_seconds = 10
width = 8
n_crops = 4
m_texts = 4
batch_size = 32
epochs = 6
warmup_epochs = 1
max_crops_per_recording = 8
";

fn main() -> elmkit::Result<()> {
    let dir = std::env::temp_dir().join("elmkit-pretrain-elm");
    let manifest = generate(&SynthSpec { n_subjects: 80, duration_s: 100.0, train_fraction: 0.0, val_fraction: 0.0, ..SynthSpec::default() }, &dir)?;

    let kv = KvConfig::parse(CONFIG, "example")?;
    let cfg = ExperimentConfig::from_kv(&kv)?;
    kv.finish()?;
    let opts = DataOptions::from_config(&cfg);
    let train = CropDataset::load(&manifest, &[Split::Pretrain], &opts)?;
    let test = CropDataset::load(&manifest, &[Split::Test], &opts)?;
    let text = StubTextEncoder::new(cfg.text_seed);

    let mut log = std::io::stdout();
    let out = pretrain(&cfg, &train, &text, Some(&mut log))?;
    let ckpt = dir.join("model.ckpt");
    out.model.save(&ckpt, Some(&out.rng))?;
    let model = Model::load(&ckpt)?.model;

    let recs = embed_recordings(&model, &test)?;
    let (queries, candidates, ids) = retrieval_pairs(&model, &test, &recs, &text)?;
    println!("\nreport -> EEG top-5 over {} subjects: {:.3} (chance {:.3})", ids.len(), retrieve(&queries, &candidates, 5)?, 5.0 / ids.len() as f64);

    let labeled: Vec<&RecordingEmbeddings> = recs.iter().filter(|r| r.label.and_then(label_index).is_some()).collect();
    let truth: Vec<usize> = labeled.iter().filter_map(|r| r.label.and_then(label_index)).collect();
    let prototypes = PromptEnsemble::normal_abnormal().prototypes(&model, &text)?;
    let zs = zero_shot(&labeled, &truth, &prototypes, ZeroShotMode::AveragedEmbedding)?;
    println!("zero-shot balanced accuracy {:.3}, AUROC {:.3}", zs.metrics.balanced_accuracy, zs.metrics.auroc.unwrap_or(f64::NAN));

    let (x, y) = recording_matrix(&recs, false)?;
    let probe = linear_probe(&x, &y, 0.1, &ProbeGrid::default(), 0)?;
    println!("linear probe at 10% labels: balanced accuracy {:.3}", probe.balanced_accuracy);
    Ok(())
}
