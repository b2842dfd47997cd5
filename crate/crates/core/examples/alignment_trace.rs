//! Crop-by-crop similarity between a long recording and a text snippet.
//! Trains a small model first, then traces recordings with one planted
//! abnormal interval and writes the first trace as TSV and SVG.
//!
//! cargo run --release --example alignment_trace

use elmkit::corpus::Split;
use elmkit::encoders::StubTextEncoder;
use elmkit::eval::{align_trace, crop_inside, line_svg, write_columns};
use elmkit::synth::{events_path, generate, read_events, SynthSpec};
use elmkit::trainer::{pretrain, CropDataset, DataOptions, ExperimentConfig, Objective};

fn main() -> elmkit::Result<()> {
    let root = std::env::temp_dir().join("elmkit-trace");
    let mut cfg = ExperimentConfig::new(Objective::ElmMilEL);
    cfg.crop_seconds = 30.0;
    cfg.width = 8;
    cfg.epochs = 8;
    cfg.warmup_epochs = 1;
    cfg.batch_size = 32;
    cfg.n_crops = 4;
    cfg.m_texts = 4;
    let opts = DataOptions::from_config(&cfg);

    let train_spec = SynthSpec { n_subjects: 80, duration_s: 130.0, pretrain_fraction: 1.0, train_fraction: 0.0, val_fraction: 0.0, ..SynthSpec::default() };
    let train = CropDataset::load(&generate(&train_spec, &root.join("train"))?, &[Split::Pretrain], &opts)?;
    let text = StubTextEncoder::new(cfg.text_seed);
    let model = pretrain(&cfg, &train, &text, None)?.model;

    let trace_spec = SynthSpec {
        n_subjects: 4,
        seed: 5,
        abnormal_fraction: 1.0,
        trace_mode: true,
        duration_s: 370.0,
        trace_interval_s: 90.0,
        trace_align_s: 30.0,
        pretrain_fraction: 0.0,
        train_fraction: 0.0,
        val_fraction: 0.0,
        subject_prefix: "trace".into(),
        ..SynthSpec::default()
    };
    let manifest = generate(&trace_spec, &root.join("traces"))?;
    let ds = CropDataset::load(&manifest, &[Split::Test], &opts)?;
    let snippet = "Abnormal EEG with spike and wave discharges.";
    for (r, rec) in ds.recordings.iter().enumerate() {
        let idx: Vec<(usize, usize)> = (0..rec.crops.len()).map(|c| (r, c)).collect();
        let trace = align_trace(&model, &ds.tensor(&idx), snippet, &text)?;
        let events = read_events(&events_path(&manifest.resolve(&manifest.entries[r].signal_path)))?;
        let inside = events.iter().any(|e| crop_inside(trace.argmax, cfg.crop_seconds, e));
        println!("{}: peak crop {} ({}), planted {:?}", rec.subject_id, trace.argmax, if inside { "inside" } else { "outside" }, events[0]);
        if r == 0 {
            let starts: Vec<f64> = (0..trace.similarity.len()).map(|i| i as f64 * cfg.crop_seconds).collect();
            write_columns(&root.join("trace.tsv"), &["start_s", "similarity"], &[&starts, &trace.similarity])?;
            let marks = [events[0].start_s, events[0].end_s];
            std::fs::write(root.join("trace.svg"), line_svg(snippet, &starts, &[("similarity", &trace.similarity)], &marks))
                .expect("write svg");
        }
    }
    println!("trace written to {}", root.display());
    Ok(())
}
