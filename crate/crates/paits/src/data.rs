//! Triplet data model: normalization, pretraining-window construction,
//! fixed-length padding/subsampling, and label subsampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{PaitsError, Result};

/// One observed event: time, value, and feature index in `[1, V]`.
/// Index 0 is reserved for padding and `V + 1` for the mask token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationTriplet {
    pub t: f64,
    pub v: f64,
    pub f: usize,
}

/// A variable-length sequence of observations for one entity, kept sorted
/// by time, ties broken by feature index then original input order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripletSeries {
    pub obs: Vec<ObservationTriplet>,
}

impl TripletSeries {
    pub fn new(mut obs: Vec<ObservationTriplet>) -> Self {
        obs.sort_by(|a, b| {
            a.t.partial_cmp(&b.t)
                .unwrap()
                .then(a.f.cmp(&b.f))
        });
        TripletSeries { obs }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Re-establish the canonical ordering after times were perturbed.
    pub fn resort(&mut self) {
        self.obs
            .sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap().then(a.f.cmp(&b.f)));
    }

    pub fn validate(&self, num_features: usize) -> Result<()> {
        for o in &self.obs {
            if !o.t.is_finite() || !o.v.is_finite() {
                return Err(PaitsError::data("non-finite time or value"));
            }
            if o.f < 1 || o.f > num_features {
                return Err(PaitsError::data(format!(
                    "feature index {} outside [1, {}]",
                    o.f, num_features
                )));
            }
        }
        Ok(())
    }
}

/// Binary label or per-article purchase indicator vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Binary(u8),
    Multi(Vec<u8>),
}

impl Label {
    pub fn as_binary(&self) -> Result<f64> {
        match self {
            Label::Binary(b) => Ok(*b as f64),
            Label::Multi(_) => Err(PaitsError::data("expected binary label")),
        }
    }
}

/// One supervised sample: static features, the series restricted to the
/// supervised observation window, and a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub statics: Vec<f64>,
    pub series: TripletSeries,
    pub label: Label,
}

/// Windowing parameters for pretraining sample generation, all in the time
/// units of the series they are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowingConfig {
    pub observation_len: f64,
    pub forecast_len: f64,
    pub stride: f64,
    pub start: f64,
}

impl WindowingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.observation_len <= 0.0 || self.forecast_len <= 0.0 || self.stride <= 0.0 {
            return Err(PaitsError::config(
                "observation, forecast and stride lengths must be positive",
            ));
        }
        Ok(())
    }
}

/// One pretraining sample: window content plus V-dimensional forecast
/// target `z` and observation mask `m` (1 = feature observed in follow-up).
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainWindow {
    pub statics: Vec<f64>,
    pub input: TripletSeries,
    pub window_start: f64,
    pub forecast_target: Vec<f64>,
    pub forecast_mask: Vec<f64>,
}

/// Fixed-length view of one series: padded positions hold (0, 0, 0) and
/// `pad[k] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSample {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub features: Vec<usize>,
    pub pad: Vec<f64>,
}

impl PaddedSample {
    pub fn seqlen(&self) -> usize {
        self.times.len()
    }

    pub fn real_len(&self) -> usize {
        self.pad.iter().filter(|&&p| p != 0.0).count()
    }
}

const DEGENERATE_STD_EPS: f64 = 1e-8;

/// Per-feature value statistics plus global time statistics, fit on the
/// training split and reused everywhere else.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub time_mean: f64,
    pub time_std: f64,
    pub value_mean: Vec<f64>,
    pub value_std: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

impl NormalizationStats {
    pub fn num_features(&self) -> usize {
        self.value_mean.len()
    }

    pub fn normalize_series(&self, s: &TripletSeries) -> TripletSeries {
        let obs = s
            .obs
            .iter()
            .map(|o| ObservationTriplet {
                t: (o.t - self.time_mean) / self.time_std,
                v: (o.v - self.value_mean[o.f - 1]) / self.value_std[o.f - 1],
                f: o.f,
            })
            .collect();
        TripletSeries { obs }
    }

    pub fn denormalize_series(&self, s: &TripletSeries) -> TripletSeries {
        let obs = s
            .obs
            .iter()
            .map(|o| ObservationTriplet {
                t: o.t * self.time_std + self.time_mean,
                v: o.v * self.value_std[o.f - 1] + self.value_mean[o.f - 1],
                f: o.f,
            })
            .collect();
        TripletSeries { obs }
    }

    pub fn normalize_statics(&self, d: &[f64]) -> Vec<f64> {
        d.iter()
            .zip(self.static_mean.iter().zip(&self.static_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Map a raw time coordinate into normalized units.
    pub fn normalize_time(&self, t: f64) -> f64 {
        (t - self.time_mean) / self.time_std
    }

    /// Map a raw duration into normalized units.
    pub fn normalize_duration(&self, d: f64) -> f64 {
        d / self.time_std
    }
}

/// Fit z-scoring statistics on a training collection: per-feature value
/// mean/std (population), one global time mean/std, per-dimension static
/// mean/std. Zero-variance features get std clamped to 1e-8 and a
/// degenerate flag.
pub fn fit_normalization(
    series: &[TripletSeries],
    statics: &[Vec<f64>],
    num_features: usize,
) -> Result<NormalizationStats> {
    let total_obs: usize = series.iter().map(|s| s.len()).sum();
    if total_obs == 0 {
        return Err(PaitsError::data("cannot normalize an empty dataset"));
    }

    let mut t_sum = 0.0;
    let mut t_sq = 0.0;
    let mut v_sum = vec![0.0; num_features];
    let mut v_sq = vec![0.0; num_features];
    let mut v_n = vec![0usize; num_features];
    for s in series {
        for o in &s.obs {
            if !o.t.is_finite() || !o.v.is_finite() {
                return Err(PaitsError::data("non-finite observation"));
            }
            t_sum += o.t;
            t_sq += o.t * o.t;
            v_sum[o.f - 1] += o.v;
            v_sq[o.f - 1] += o.v * o.v;
            v_n[o.f - 1] += 1;
        }
    }
    let n = total_obs as f64;
    let time_mean = t_sum / n;
    let time_var = (t_sq / n - time_mean * time_mean).max(0.0);
    let time_std = time_var.sqrt().max(DEGENERATE_STD_EPS);

    let mut value_mean = vec![0.0; num_features];
    let mut value_std = vec![1.0; num_features];
    let mut degenerate = vec![false; num_features];
    for f in 0..num_features {
        if v_n[f] == 0 {
            // never observed in training: identity transform, flagged
            degenerate[f] = true;
            continue;
        }
        let m = v_sum[f] / v_n[f] as f64;
        let var = (v_sq[f] / v_n[f] as f64 - m * m).max(0.0);
        value_mean[f] = m;
        let sd = var.sqrt();
        if sd < DEGENERATE_STD_EPS {
            degenerate[f] = true;
            value_std[f] = DEGENERATE_STD_EPS;
        } else {
            value_std[f] = sd;
        }
    }

    let static_dim = statics.first().map_or(0, |d| d.len());
    let mut static_mean = vec![0.0; static_dim];
    let mut static_std = vec![1.0; static_dim];
    if !statics.is_empty() {
        for j in 0..static_dim {
            let vals: Vec<f64> = statics.iter().map(|d| d[j]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            static_mean[j] = m;
            static_std[j] = var.sqrt().max(DEGENERATE_STD_EPS);
        }
    }

    Ok(NormalizationStats {
        time_mean,
        time_std,
        value_mean,
        value_std,
        degenerate,
        static_mean,
        static_std,
    })
}

/// Normalize a collection with freshly fit training statistics.
pub fn normalize_dataset(
    series: &[TripletSeries],
    statics: &[Vec<f64>],
    num_features: usize,
) -> Result<(Vec<TripletSeries>, Vec<Vec<f64>>, NormalizationStats)> {
    let stats = fit_normalization(series, statics, num_features)?;
    let norm_series = series.iter().map(|s| stats.normalize_series(s)).collect();
    let norm_statics = statics.iter().map(|d| stats.normalize_statics(d)).collect();
    Ok((norm_series, norm_statics, stats))
}

/// Slide observation windows over one series. For each start `t_w`, the
/// input is the triplets in `[t_w, t_w + l_o)`; the forecast target is the
/// first observed value of each feature in `[t_w + l_o, t_w + l_o + l_f)`.
/// Windows with empty input are dropped.
pub fn build_pretrain_windows(
    series: &TripletSeries,
    statics: &[f64],
    cfg: &WindowingConfig,
    num_features: usize,
) -> Result<Vec<PretrainWindow>> {
    cfg.validate()?;
    let mut windows = Vec::new();
    if series.is_empty() {
        return Ok(windows);
    }
    let t_max = series.obs.last().map(|o| o.t).unwrap();

    let mut t_w = cfg.start;
    while t_w <= t_max {
        let input: Vec<ObservationTriplet> = series
            .obs
            .iter()
            .filter(|o| o.t >= t_w && o.t < t_w + cfg.observation_len)
            .copied()
            .collect();
        if !input.is_empty() {
            let fc_start = t_w + cfg.observation_len;
            let fc_end = fc_start + cfg.forecast_len;
            let mut target = vec![0.0; num_features];
            let mut mask = vec![0.0; num_features];
            for o in &series.obs {
                if o.t >= fc_start && o.t < fc_end && mask[o.f - 1] == 0.0 {
                    target[o.f - 1] = o.v;
                    mask[o.f - 1] = 1.0;
                }
            }
            windows.push(PretrainWindow {
                statics: statics.to_vec(),
                input: TripletSeries { obs: input },
                window_start: t_w,
                forecast_target: target,
                forecast_mask: mask,
            });
        }
        t_w += cfg.stride;
    }
    Ok(windows)
}

/// Fix a series to `seqlen` positions: zero-pad short series, uniformly
/// subsample long ones without replacement (re-sorted afterwards).
pub fn pad_or_subsample(series: &TripletSeries, seqlen: usize, rng: &mut ChaCha8Rng) -> PaddedSample {
    assert!(seqlen >= 1, "seqlen must be at least 1");
    let kept: Vec<ObservationTriplet> = if series.len() <= seqlen {
        series.obs.clone()
    } else {
        let mut idx: Vec<usize> = (0..series.len()).collect();
        idx.shuffle(rng);
        let mut chosen: Vec<usize> = idx.into_iter().take(seqlen).collect();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| series.obs[i]).collect()
    };

    let mut times = vec![0.0; seqlen];
    let mut values = vec![0.0; seqlen];
    let mut features = vec![0usize; seqlen];
    let mut pad = vec![0.0; seqlen];
    for (k, o) in kept.iter().enumerate() {
        times[k] = o.t;
        values[k] = o.v;
        features[k] = o.f;
        pad[k] = 1.0;
    }
    PaddedSample { times, values, features, pad }
}

/// Deterministic label-fraction subsampling; binary labels are stratified
/// so class prevalence is preserved within one sample per class.
pub fn subsample_labels(
    samples: &[LabeledSample],
    fraction: f64,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    if fraction <= 0.0 || fraction > 1.0 {
        return Err(PaitsError::config(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    if fraction == 1.0 {
        return Ok(samples.to_vec());
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let binary = samples.iter().all(|s| matches!(s.label, Label::Binary(_)));
    let mut chosen: Vec<usize> = Vec::new();
    if binary {
        for class in [0u8, 1u8] {
            let mut idx: Vec<usize> = samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == Label::Binary(class))
                .map(|(i, _)| i)
                .collect();
            let take = (idx.len() as f64 * fraction).round() as usize;
            idx.shuffle(&mut rng);
            chosen.extend(idx.into_iter().take(take));
        }
    } else {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        let take = (samples.len() as f64 * fraction).round() as usize;
        idx.shuffle(&mut rng);
        chosen.extend(idx.into_iter().take(take));
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| samples[i].clone()).collect())
}

/// 99th-percentile series length, the default `seqlen`.
pub fn percentile_seqlen(series: &[TripletSeries], pct: f64) -> usize {
    let mut lens: Vec<usize> = series.iter().map(|s| s.len()).collect();
    if lens.is_empty() {
        return 1;
    }
    lens.sort_unstable();
    let rank = ((pct / 100.0) * lens.len() as f64).ceil() as usize;
    lens[rank.clamp(1, lens.len()) - 1].max(1)
}

/// Derive an isolated RNG stream from a master seed and a stream index.
pub fn derive_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let salt: u64 = rng.gen::<u64>() ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(salt)
}
