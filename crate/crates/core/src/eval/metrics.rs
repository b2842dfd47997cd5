//! Classification metrics over integer class labels.

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let k = truth.iter().chain(pred).copied().max().map_or(0, |m| m + 1);
    let mut hit = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (&t, &p) in truth.iter().zip(pred) {
        count[t] += 1;
        if t == p {
            hit[t] += 1;
        }
    }
    let present: Vec<f64> = (0..k).filter(|&c| count[c] > 0).map(|c| hit[c] as f64 / count[c] as f64).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Area under the ROC curve for binary labels (1 = positive) via the rank
/// statistic, ties counted as one half. `None` when a class is missing.
pub fn auroc(positive: &[bool], score: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut ranks = vec![0.0; score.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && score[order[j + 1]] == score[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = positive.iter().zip(&ranks).filter(|(p, _)| **p).map(|(_, r)| r).sum();
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// One-vs-rest AUROC averaged over classes, from per-class scores `[n][k]`.
pub fn macro_auroc(truth: &[usize], scores: &[Vec<f64>]) -> Option<f64> {
    let k = scores.first()?.len();
    if k == 2 {
        let margin: Vec<f64> = scores.iter().map(|s| s[1] - s[0]).collect();
        return auroc(&truth.iter().map(|&t| t == 1).collect::<Vec<_>>(), &margin);
    }
    let per: Vec<f64> = (0..k)
        .filter_map(|c| auroc(&truth.iter().map(|&t| t == c).collect::<Vec<_>>(), &scores.iter().map(|s| s[c]).collect::<Vec<_>>()))
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

/// F1 of the positive class `1`.
pub fn f1(truth: &[usize], pred: &[usize]) -> f64 {
    let tp = truth.iter().zip(pred).filter(|(t, p)| **t == 1 && **p == 1).count() as f64;
    let fp = truth.iter().zip(pred).filter(|(t, p)| **t != 1 && **p == 1).count() as f64;
    let fn_ = truth.iter().zip(pred).filter(|(t, p)| **t == 1 && **p != 1).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}
