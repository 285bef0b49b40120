//! Pretext and supervised loss functions: masked forecasting MSE,
//! padded/masked reconstruction MSE, their joint weighting, supervised
//! binary cross-entropy, the retail BCE variants, and InfoNCE.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{PaitsError, Result};

/// Weights of the forecasting and reconstruction pretext tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub forecast: f64,
    pub reconstruction: f64,
}

impl LossWeights {
    pub fn new(forecast: f64, reconstruction: f64) -> Self {
        LossWeights { forecast, reconstruction }
    }

    pub fn is_null(&self) -> bool {
        self.forecast == 0.0 && self.reconstruction == 0.0
    }
}

/// Targets for the reconstruction loss: original values, padding mask and
/// reconstruction mask.
#[derive(Debug, Clone)]
pub struct ReconstructionTargets {
    pub values: Array2<f64>,
    pub padding: Array2<f64>,
    pub reconstruct: Array2<f64>,
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(PaitsError::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Masked forecasting MSE: `(1/count) * sum_w sum_j m_j (zhat_j - z_j)^2`.
pub fn forecast_loss(
    predicted: &Array2<f64>,
    target: &Array2<f64>,
    mask: &Array2<f64>,
    count: f64,
) -> Result<f64> {
    check_same_shape(predicted, target, "forecast predictions vs targets")?;
    check_same_shape(predicted, mask, "forecast predictions vs mask")?;
    let mut total = 0.0;
    for ((i, j), &p) in predicted.indexed_iter() {
        let d = p - target[[i, j]];
        total += mask[[i, j]] * d * d;
    }
    Ok(total / count)
}

/// Retail-mode forecasting: per-article binary cross-entropy on purchase
/// indicators, summed and divided by `count`.
pub fn forecast_loss_bce(
    logits: &Array2<f64>,
    target: &Array2<f64>,
    count: f64,
) -> Result<f64> {
    check_same_shape(logits, target, "forecast logits vs targets")?;
    let mut total = 0.0;
    for ((i, j), &x) in logits.indexed_iter() {
        total += bce_with_logit(x, target[[i, j]]);
    }
    Ok(total / count)
}

/// Reconstruction loss: `(1/count) * sum_w sum_k p_k c_k (vhat_k - v_k)^2`.
pub fn reconstruction_loss(
    predicted: &Array2<f64>,
    targets: &ReconstructionTargets,
    count: f64,
) -> Result<f64> {
    check_same_shape(predicted, &targets.values, "reconstruction predictions vs values")?;
    check_same_shape(predicted, &targets.padding, "reconstruction predictions vs padding")?;
    check_same_shape(predicted, &targets.reconstruct, "reconstruction predictions vs mask")?;
    let mut total = 0.0;
    for ((i, k), &p) in predicted.indexed_iter() {
        let gate = targets.padding[[i, k]] * targets.reconstruct[[i, k]];
        if gate != 0.0 {
            let d = p - targets.values[[i, k]];
            total += gate * d * d;
        }
    }
    Ok(total / count)
}

/// Joint pretext loss `lambda_F * L_F + lambda_R * L_R`.
pub fn joint_loss(forecast: f64, reconstruction: f64, weights: &LossWeights) -> f64 {
    weights.forecast * forecast + weights.reconstruction * reconstruction
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Binary,
    Multilabel,
}

/// Numerically stable binary cross-entropy from a logit.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over samples (binary) or samples x articles
/// (multilabel).
pub fn supervised_loss(logits: &Array2<f64>, labels: &Array2<f64>, mode: TaskMode) -> Result<f64> {
    check_same_shape(logits, labels, "supervised logits vs labels")?;
    for &y in labels.iter() {
        if y != 0.0 && y != 1.0 {
            return Err(PaitsError::data(format!("label {y} outside {{0, 1}}")));
        }
    }
    let _ = mode;
    let mut total = 0.0;
    for ((i, j), &x) in logits.indexed_iter() {
        total += bce_with_logit(x, labels[[i, j]]);
    }
    Ok(total / logits.len() as f64)
}

/// InfoNCE over a batch: for each anchor, cross-entropy of picking its own
/// positive among all positives, with cosine-similarity logits divided by
/// the temperature. Mean over anchors.
pub fn info_nce_loss(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    temperature: f64,
) -> Result<f64> {
    check_same_shape(anchors, positives, "anchors vs positives")?;
    let n = anchors.nrows();
    if n < 2 {
        return Err(PaitsError::data("InfoNCE needs a batch of at least 2"));
    }
    if temperature <= 0.0 {
        return Err(PaitsError::config("temperature must be positive"));
    }
    let norm_rows = |m: &Array2<f64>| -> Result<Array2<f64>> {
        let mut out = m.clone();
        for mut row in out.outer_iter_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(PaitsError::Numerical("zero-norm embedding".into()));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(out)
    };
    let a = norm_rows(anchors)?;
    let p = norm_rows(positives)?;
    let sims = a.dot(&p.t()) / temperature;
    let mut total = 0.0;
    for (i, row) in sims.outer_iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forecast_loss_hand_case() {
        let zhat = array![[1.0, 3.0]];
        let z = array![[2.0, 0.0]];
        let m = array![[1.0, 0.0]];
        assert_eq!(forecast_loss(&zhat, &z, &m, 1.0).unwrap(), 1.0);
        let zeros = array![[0.0, 0.0]];
        assert_eq!(forecast_loss(&zhat, &z, &zeros, 1.0).unwrap(), 0.0);
        assert_eq!(forecast_loss(&z, &z, &m, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn forecast_loss_rejects_shape_mismatch() {
        let a = array![[1.0, 2.0]];
        let b = array![[1.0]];
        assert!(forecast_loss(&a, &b, &a, 1.0).is_err());
    }

    #[test]
    fn reconstruction_loss_hand_case() {
        let vhat = array![[1.0, 2.0, 9.0]];
        let targets = ReconstructionTargets {
            values: array![[0.0, 2.0, 0.0]],
            padding: array![[1.0, 1.0, 0.0]],
            reconstruct: array![[1.0, 1.0, 1.0]],
        };
        assert_eq!(reconstruction_loss(&vhat, &targets, 1.0).unwrap(), 1.0);

        let nothing = ReconstructionTargets {
            reconstruct: array![[0.0, 0.0, 0.0]],
            ..targets.clone()
        };
        assert_eq!(reconstruction_loss(&vhat, &nothing, 1.0).unwrap(), 0.0);

        let all_pad = ReconstructionTargets {
            padding: array![[0.0, 0.0, 0.0]],
            ..targets
        };
        assert_eq!(reconstruction_loss(&vhat, &all_pad, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn joint_loss_is_the_weighted_sum() {
        assert_eq!(joint_loss(0.5, 0.2, &LossWeights::new(1.0, 10.0)), 2.5);
        assert_eq!(joint_loss(0.5, 0.2, &LossWeights::new(0.0, 0.0)), 0.0);
        assert_eq!(joint_loss(0.5, 0.2, &LossWeights::new(1.0, 0.0)), 0.5);
    }

    #[test]
    fn supervised_bce_values() {
        let l = supervised_loss(&array![[0.0]], &array![[1.0]], TaskMode::Binary).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let confident =
            supervised_loss(&array![[40.0]], &array![[1.0]], TaskMode::Binary).unwrap();
        assert!(confident < 1e-6);
        let a = supervised_loss(&array![[1.7]], &array![[1.0]], TaskMode::Binary).unwrap();
        let b = supervised_loss(&array![[-1.7]], &array![[0.0]], TaskMode::Binary).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(supervised_loss(&array![[0.0]], &array![[0.5]], TaskMode::Binary).is_err());
    }

    #[test]
    fn info_nce_two_sample_orthogonal_case() {
        let anchors = array![[1.0, 0.0], [0.0, 1.0]];
        let positives = array![[1.0, 0.0], [0.0, 1.0]];
        let l = info_nce_loss(&anchors, &positives, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn info_nce_uniform_and_monotone() {
        let same = array![[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]];
        let l = info_nce_loss(&same, &same, 1.0).unwrap();
        assert!((l - (3.0f64).ln()).abs() < 1e-12);

        // positives rotate from orthogonal to aligned; negatives stay orthogonal
        let anchors = array![[1.0, 0.0], [0.0, 1.0]];
        let mut losses = Vec::new();
        for c in [0.0, 0.5, 1.0f64] {
            let s = (1.0 - c * c).sqrt();
            let positives = array![[c, s], [s, c]];
            losses.push(info_nce_loss(&anchors, &positives, 1.0).unwrap());
        }
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);

        let zero = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(info_nce_loss(&zero, &anchors, 1.0).is_err());
        assert!(info_nce_loss(&anchors, &anchors, 0.0).is_err());
    }
}
