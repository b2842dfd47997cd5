//! Generate a small paired corpus, load its manifest and apply the duration filter.
//!
//! cargo run --example synthetic_corpus -- [out_dir]

use elmkit::corpus::{filter_by_duration, Manifest, Split};
use elmkit::synth::SynthSpec;
use elmkit::textseg::ClusterLexicon;

fn main() -> elmkit::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("elmkit-corpus"), Into::into);
    let spec = SynthSpec { n_subjects: 8, duration_s: 90.0, ..SynthSpec::default() };
    elmkit::synth::generate(&spec, &out)?;

    let manifest = Manifest::load(&out.join("manifest.tsv"))?;
    println!("{} entries in {}", manifest.entries.len(), out.display());
    for split in [Split::Pretrain, Split::Train, Split::Val, Split::Test] {
        println!("  {:<8} {} subjects", split.as_str(), manifest.split(&[split]).subjects().len());
    }

    let kept = filter_by_duration(&manifest, 70.0, 9000.0, 60.0)?;
    let first = &kept.entries[0];
    let rec = kept.load_recording(first)?;
    println!("{}: {} channels, {:.0} s after truncation", first.subject_id, rec.channels, rec.duration_s());
    if let Some(report) = kept.load_report(first, &ClusterLexicon::shipped())? {
        println!("summary: {}", report.summary.as_deref().unwrap_or("-"));
        println!("{}", report.raw_text);
    }
    Ok(())
}
