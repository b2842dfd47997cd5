//! InfoNCE, multiple-instance InfoNCE and its aggregation variants on a toy batch.

use elmkit::linalg::Matrix;
use elmkit::losses::{infonce, mflag_loss, mil_infonce, similarity, Aggregation, Direction, MilOptions, PositiveSets};

fn main() -> elmkit::Result<()> {
    // Three EEG crops from two subjects, two text segments.
    let e = Matrix::from_rows(&[vec![1.0, 0.1, 0.0], vec![0.9, 0.2, 0.1], vec![0.0, 1.0, 0.2]]);
    let l = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.1, 0.9, 0.0]]);
    let s = similarity(&e, &l, 0.3)?;
    let pos = PositiveSets::from_subjects(&["a", "a", "b"], &["a", "b"]);

    for direction in [Direction::EGivenL, Direction::LGivenE, Direction::Joint] {
        let out = mil_infonce(&s, &pos, &MilOptions { direction, ..Default::default() })?;
        println!("{direction:?}: {:.4}", out.loss);
    }
    for aggregation in [Aggregation::Mean, Aggregation::Max, Aggregation::Attention, Aggregation::Sum] {
        let out = mil_infonce(&s, &pos, &MilOptions { aggregation, ..Default::default() })?;
        println!("{:<9} {:.4}", aggregation.as_str(), out.loss);
    }

    // Gradients flow back to the embeddings through the similarity matrix.
    let out = mil_infonce(&s, &pos, &MilOptions::default())?;
    let (de, _) = s.backward(&out.grad);
    println!("d loss / d e[0] = {:?}", de.row(0));

    let square = similarity(&e, &Matrix::from_rows(&[l.row(0).to_vec(), l.row(0).to_vec(), l.row(1).to_vec()]), 0.3)?;
    println!("one-to-one InfoNCE: {:.4}", infonce(&square)?.loss);

    let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, -2.5]]);
    let m = mflag_loss(&h, &e, &e)?;
    println!("frozen-text alignment {:.4} + decorrelation {:.4}", m.align, m.orth);
    Ok(())
}
