//! Evaluation metrics: AUROC, AUPRC (average precision), MAP@k for the
//! multilabel task, and mean +/- std aggregation across seeds.

use crate::{PaitsError, Result};

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(PaitsError::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(PaitsError::data("no predictions to score"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(PaitsError::Numerical("non-finite score".into()));
    }
    for &y in labels {
        if y > 1 {
            return Err(PaitsError::data(format!("label {y} outside {{0, 1}}")));
        }
    }
    Ok(())
}

/// Area under the ROC curve via the rank-sum statistic. Tied scores count
/// one half. Errors when only one class is present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PaitsError::data("AUROC undefined: only one class present"));
    }
    let mut wins = 0.0;
    for (i, (&sp, &yp)) in scores.iter().zip(labels).enumerate() {
        if yp != 1 {
            continue;
        }
        for (j, (&sn, &yn)) in scores.iter().zip(labels).enumerate() {
            if yn != 0 || i == j {
                continue;
            }
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve as average precision: the mean of
/// precision-at-rank over the positive positions, scanning scores in
/// descending order. Errors when no positives exist.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(PaitsError::data("AUPRC undefined: no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// Mean average precision at `k` over users. Per user, precision-at-rank is
/// averaged over relevant items inside the top `k` and normalized by
/// `min(k, relevant_count)`. Users without any relevant item are excluded;
/// errors if every user is empty.
pub fn map_at_k(scores: &[Vec<f64>], relevant: &[Vec<u8>], k: usize) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(PaitsError::shape(format!(
            "{} users of scores vs {} of relevance",
            scores.len(),
            relevant.len()
        )));
    }
    if k == 0 {
        return Err(PaitsError::config("k must be >= 1"));
    }
    let mut total = 0.0;
    let mut users = 0usize;
    for (s, r) in scores.iter().zip(relevant) {
        check_scores(s, r)?;
        let n_rel = r.iter().filter(|&&y| y == 1).count();
        if n_rel == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().take(k).enumerate() {
            if r[i] == 1 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / n_rel.min(k) as f64;
        users += 1;
    }
    if users == 0 {
        return Err(PaitsError::data("MAP@k undefined: no user has relevant items"));
    }
    Ok(total / users as f64)
}

/// Mean and sample standard deviation over per-seed metric values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    /// `mean±std` with four decimals, e.g. `0.5000±0.1414`.
    pub fn display(&self) -> String {
        format!("{:.4}±{:.4}", self.mean, self.std)
    }

    /// A lone value has no spread; its std is reported as zero.
    pub fn single_seed(&self) -> bool {
        self.n == 1
    }
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(PaitsError::data("nothing to aggregate"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    };
    Ok(Aggregate { mean, std, n })
}
