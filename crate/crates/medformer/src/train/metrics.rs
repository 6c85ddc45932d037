//! Accuracy and rank-based AUC.

use super::TrainError;
use crate::model::TaskKind;

/// Fraction of correct predictions over decoded rows. Single-label, binary,
/// and ordinal tasks count a sample as correct only when the whole decoded
/// row matches; multi-label tasks average per-class correctness so one
/// missed class does not zero out the sample.
pub fn accuracy(
    decoded: &[Vec<usize>],
    labels: &[Vec<i64>],
    kind: TaskKind,
) -> Result<f64, TrainError> {
    if decoded.is_empty() || decoded.len() != labels.len() {
        return Err(TrainError::Parameter(format!(
            "accuracy needs matching non-empty inputs, got {} predictions and {} labels",
            decoded.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (pred, label) in decoded.iter().zip(labels) {
        if pred.len() != label.len() {
            return Err(TrainError::Parameter(format!(
                "decoded row has {} entries but the label has {}",
                pred.len(),
                label.len()
            )));
        }
        let matches = pred
            .iter()
            .zip(label)
            .filter(|(p, l)| **p as i64 == **l)
            .count();
        total += match kind {
            TaskKind::MultiLabel(_) => matches as f64 / pred.len() as f64,
            _ => (matches == pred.len()) as usize as f64,
        };
    }
    Ok(total / decoded.len() as f64)
}

/// Mann-Whitney AUC with ties counted half, computed through average ranks.
pub fn binary_auc(scores: &[f64], positives: &[bool]) -> Result<f64, TrainError> {
    if scores.is_empty() || scores.len() != positives.len() {
        return Err(TrainError::Parameter(format!(
            "auc needs matching non-empty inputs, got {} scores and {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::Parameter("auc scores must be finite".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positives
        .iter()
        .zip(&ranks)
        .filter(|(p, _)| **p)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC over per-class score rows (see
/// [`crate::model::class_scores`]). Classes missing a positive or negative
/// example are skipped; if no class is scorable the metric is undefined.
pub fn macro_auc(
    scores: &[Vec<f64>],
    labels: &[Vec<i64>],
    kind: TaskKind,
) -> Result<f64, TrainError> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(TrainError::Parameter(format!(
            "auc needs matching non-empty inputs, got {} score rows and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let TaskKind::Binary = kind {
        let col: Vec<f64> = scores.iter().map(|r| r[0]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| l[0] == 1).collect();
        return binary_auc(&col, &pos);
    }
    let k = match kind {
        TaskKind::SingleLabel(k) | TaskKind::MultiLabel(k) | TaskKind::Ordinal(k) => k,
        TaskKind::Binary => unreachable!(),
    };
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..k {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels
            .iter()
            .map(|l| match kind {
                TaskKind::MultiLabel(_) => l[c] == 1,
                _ => l[0] == c as i64,
            })
            .collect();
        match binary_auc(&col, &pos) {
            Ok(a) => {
                sum += a;
                counted += 1;
            }
            Err(TrainError::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(TrainError::UndefinedMetric(
            "no class has both positive and negative examples".into(),
        ));
    }
    Ok(sum / counted as f64)
}

/// Brute-force concordant-pair AUC: the oracle the rank implementation is
/// checked against. Quadratic, test use only.
pub fn pair_count_auc(scores: &[f64], positives: &[bool]) -> Result<f64, TrainError> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::UndefinedMetric("single-class labels".into()));
    }
    let mut score = 0.0;
    for (i, &pi) in positives.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positives.iter().enumerate() {
            if pj {
                continue;
            }
            score += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(score / (n_pos * n_neg) as f64)
}
