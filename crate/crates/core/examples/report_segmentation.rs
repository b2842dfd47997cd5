//! Split a report into heading clusters, sample text units and label summaries.

use elmkit::corpus::{Label, Report};
use elmkit::textseg::{classify_summary, sample_text, segment_report, Cluster, ClusterLexicon, Granularity};
use rand::SeedableRng;

const REPORT: &str = "\
INTRODUCTION: Digital video EEG performed in the lab using standard 10-20 placement.
CLINICAL HISTORY: 42 year old with two episodes of unresponsiveness.
MEDICATIONS: Levetiracetam.
DESCRIPTION OF THE RECORD: The background contains a 9 Hz posterior rhythm. Frequent left temporal sharp waves are seen.
IMPRESSION: Abnormal EEG due to left temporal sharp waves.
";

fn main() -> elmkit::Result<()> {
    let lexicon = ClusterLexicon::shipped();
    for s in segment_report(REPORT, &lexicon) {
        println!("{:<18} {:<26} {} sentence(s)", s.cluster.as_str(), s.heading, s.sentences.len());
    }

    let report = Report::from_text("s1", "1", REPORT, None, &lexicon);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let units = sample_text(&report, &Cluster::CONTENT, Granularity::Sentence, 3, &mut rng)?;
    println!("\nsampled sentences:");
    for u in units {
        println!("  {u}");
    }

    println!();
    for summary in ["The EEG is normal.", "This EEG is abnormal due to focal slowing.", "Recorded at bedside."] {
        let label: Label = classify_summary(summary);
        println!("{:<9} <- {summary}", label.as_str());
    }
    Ok(())
}
