//! Independent verification harness: scalar-loop loss oracles, central
//! finite-difference gradient checks, and empirical mask statistics. The
//! implementations here deliberately avoid the code paths they verify.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::PaddedSample;
use crate::graph::{NodeId, Tape};
use crate::model::{
    build_forward, forecast_head, reconstruct_head, supervised_head, EncoderConfig, Model,
    ParamLeaves,
};
use crate::{PaitsError, Result};

/// Forecasting loss evaluated by the equation's literal triple loop:
/// `(1/count) * sum_w sum_j m[w][j] * (zhat[w][j] - z[w][j])^2`.
pub fn forecast_loss_oracle(
    zhat: &[Vec<f64>],
    z: &[Vec<f64>],
    m: &[Vec<f64>],
    count: f64,
) -> f64 {
    let mut total = 0.0;
    for w in 0..zhat.len() {
        for j in 0..zhat[w].len() {
            let d = zhat[w][j] - z[w][j];
            total += m[w][j] * d * d;
        }
    }
    total / count
}

/// Reconstruction loss by literal loops:
/// `(1/count) * sum_w sum_k p[w][k] * c[w][k] * (vhat[w][k] - v[w][k])^2`.
pub fn reconstruction_loss_oracle(
    vhat: &[Vec<f64>],
    v: &[Vec<f64>],
    p: &[Vec<f64>],
    c: &[Vec<f64>],
    count: f64,
) -> f64 {
    let mut total = 0.0;
    for w in 0..vhat.len() {
        for k in 0..vhat[w].len() {
            let d = vhat[w][k] - v[w][k];
            total += p[w][k] * c[w][k] * d * d;
        }
    }
    total / count
}

/// Which head path a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradPath {
    Forecast,
    Reconstruction,
    Supervised,
}

fn grad_check_loss(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    config: &EncoderConfig,
    sample: &PaddedSample,
    statics: &[f64],
    path: GradPath,
) -> Result<NodeId> {
    let fwd = build_forward(tape, leaves, config, sample, statics, None)?;
    let v = config.num_features;
    let l = sample.seqlen();
    Ok(match path {
        GradPath::Forecast => {
            let pred = forecast_head(tape, leaves, fwd.fused);
            let target = tape.leaf(Array2::from_shape_fn((1, v), |(_, j)| 0.3 * j as f64 - 0.2));
            let mask = tape.leaf(Array2::from_shape_fn((1, v), |(_, j)| f64::from(j != 1)));
            let diff = tape.sub(pred, target);
            let sq = tape.mul(diff, diff);
            let masked = tape.mul(sq, mask);
            tape.sum_all(masked)
        }
        GradPath::Reconstruction => {
            let pred = reconstruct_head(tape, leaves, fwd.per_position);
            let target = tape.leaf(Array2::from_shape_fn((l, 1), |(k, _)| 0.1 * k as f64));
            let gate = tape.leaf(Array2::from_shape_fn((l, 1), |(k, _)| sample.pad[k]));
            let diff = tape.sub(pred, target);
            let sq = tape.mul(diff, diff);
            let gated = tape.mul(sq, gate);
            tape.sum_all(gated)
        }
        GradPath::Supervised => {
            let logits = supervised_head(tape, leaves, fwd.fused);
            let targets = Array2::ones((1, config.supervised_out()));
            let weights = Array2::ones((1, config.supervised_out()));
            tape.bce_with_logits(logits, targets, weights)
        }
    })
}

/// Max relative error of analytic gradients against central finite
/// differences over every parameter, on the tiny configuration.
pub fn grad_check(path: GradPath, h: f64) -> Result<f64> {
    let config = EncoderConfig::tiny(6, 3, 2);
    let mut model = Model::init(config.clone(), 12)?;
    // jitter zero-initialized biases off ReLU kinks so the subgradient and
    // the central difference agree everywhere
    {
        let mut rng = crate::data::derive_rng(12, 99);
        for name in model.params.names() {
            let p = model.params.get_mut(&name).unwrap();
            for (idx, v) in p.indexed_iter_mut() {
                if name == "enc.lut" && idx.0 == 0 {
                    continue;
                }
                *v += rand::Rng::gen_range(&mut rng, -0.05..0.05);
            }
        }
    }
    let sample = PaddedSample {
        times: vec![-0.8, -0.2, 0.1, 0.6, 0.0, 0.0],
        values: vec![0.4, -1.1, 0.9, 0.2, 0.0, 0.0],
        features: vec![1, 3, 2, 1, 0, 0],
        pad: vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0],
    };
    let statics = [0.3, -0.5];

    let analytic = {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, &model.params);
        let loss = grad_check_loss(&mut tape, &leaves, &config, &sample, &statics, path)?;
        let grads = tape.backward(loss);
        leaves.collect_grads(&grads, &model.params)?
    };

    let eval = |model: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, &model.params);
        let loss = grad_check_loss(&mut tape, &leaves, &config, &sample, &statics, path)?;
        Ok(tape.scalar(loss))
    };

    let names = model.params.names();
    let mut worst = 0.0f64;
    for name in names {
        let dim = model.params.get(&name).unwrap().raw_dim();
        for i in 0..dim[0] {
            for j in 0..dim[1] {
                if name == "enc.lut" && i == 0 {
                    continue; // frozen padding row
                }
                let orig = model.params.get(&name).unwrap()[[i, j]];
                model.params.get_mut(&name).unwrap()[[i, j]] = orig + h;
                let up = eval(&model)?;
                model.params.get_mut(&name).unwrap()[[i, j]] = orig - h;
                let down = eval(&model)?;
                model.params.get_mut(&name).unwrap()[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.get(&name).unwrap()[[i, j]];
                if !numeric.is_finite() {
                    return Err(PaitsError::Numerical(format!(
                        "non-finite finite difference at {name}[{i},{j}]"
                    )));
                }
                let scale = a.abs().max(numeric.abs()).max(1e-6);
                let rel = (a - numeric).abs() / scale;
                if rel > 0.5 {
                    eprintln!("MISMATCH {name}[{i},{j}]: analytic {a} numeric {numeric}");
                }
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

/// Empirical statistics of a collection of binary masks (`true` =
/// masked): masked fraction and mean masked/unmasked run lengths, each
/// with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStats {
    pub fraction: f64,
    pub fraction_se: f64,
    pub masked_run_mean: f64,
    pub masked_run_se: f64,
    pub unmasked_run_mean: f64,
    pub unmasked_run_se: f64,
    pub masked_runs: usize,
    pub unmasked_runs: usize,
}

pub fn mask_statistics(masks: &[Vec<bool>]) -> Result<MaskStats> {
    let n: usize = masks.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(PaitsError::data("no mask draws"));
    }
    let masked: usize = masks.iter().flatten().filter(|&&m| m).count();
    let fraction = masked as f64 / n as f64;
    let fraction_se = (fraction * (1.0 - fraction) / n as f64).sqrt();

    let mut masked_runs: Vec<f64> = Vec::new();
    let mut unmasked_runs: Vec<f64> = Vec::new();
    for row in masks {
        let mut iter = row.iter();
        let Some(&first) = iter.next() else { continue };
        let mut state = first;
        let mut len = 1usize;
        for &m in iter {
            if m == state {
                len += 1;
            } else {
                if state { &mut masked_runs } else { &mut unmasked_runs }.push(len as f64);
                state = m;
                len = 1;
            }
        }
        if state { &mut masked_runs } else { &mut unmasked_runs }.push(len as f64);
    }
    let summarize = |runs: &[f64]| -> (f64, f64) {
        if runs.is_empty() {
            return (0.0, 0.0);
        }
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        if runs.len() < 2 {
            return (mean, 0.0);
        }
        let var = runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
            / (runs.len() - 1) as f64;
        (mean, (var / runs.len() as f64).sqrt())
    };
    let (masked_run_mean, masked_run_se) = summarize(&masked_runs);
    let (unmasked_run_mean, unmasked_run_se) = summarize(&unmasked_runs);
    Ok(MaskStats {
        fraction,
        fraction_se,
        masked_run_mean,
        masked_run_se,
        unmasked_run_mean,
        unmasked_run_se,
        masked_runs: masked_runs.len(),
        unmasked_runs: unmasked_runs.len(),
    })
}

/// A frozen verification case loaded from a JSON fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCase {
    pub description: String,
    pub inputs: serde_json::Value,
    pub expected: f64,
    pub tolerance: f64,
    pub provenance: String,
}

pub fn load_oracle_cases(path: &std::path::Path) -> Result<Vec<OracleCase>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PaitsError::data(format!("cannot read {}: {e}", path.display())))?;
    let cases: Vec<OracleCase> = serde_json::from_str(&text)?;
    for c in &cases {
        if !matches!(c.provenance.as_str(), "paper" | "trivial" | "derived") {
            return Err(PaitsError::data(format!(
                "bad provenance {:?} in case {:?}",
                c.provenance, c.description
            )));
        }
        if c.tolerance <= 0.0 {
            return Err(PaitsError::data(format!(
                "non-positive tolerance in case {:?}",
                c.description
            )));
        }
    }
    Ok(cases)
}
