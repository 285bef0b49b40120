//! Noise and masking augmentations on triplet sequences, including the
//! interval-bucketed geometric mask sampler and the TS-TCC-style
//! augmentations used by a baseline.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ObservationTriplet, TripletSeries};
use crate::{PaitsError, Result};

/// Which triplet elements get replaced when masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedElements {
    pub time: bool,
    pub value: bool,
    pub feature: bool,
}

impl MaskedElements {
    pub const ALL: MaskedElements = MaskedElements { time: true, value: true, feature: true };
    pub const VALUE_ONLY: MaskedElements = MaskedElements { time: false, value: true, feature: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSampling {
    Random,
    Geometric,
}

/// Replacement values for masked triplets; the feature replacement is the
/// reserved mask token index `V + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskValues {
    pub time: f64,
    pub value: f64,
    pub feature: usize,
}

/// Full augmentation configuration: noise level, mask rate/sampler,
/// replacement values, masked element set, and geometric bucketing
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub noise_std: f64,
    pub mask_rate: f64,
    pub sampling: MaskSampling,
    pub values: MaskValues,
    pub elements: MaskedElements,
    /// Interval width for geometric bucketing, in the series' time units.
    pub interval_width: f64,
    /// Mean masked run length in intervals.
    pub mean_run: f64,
}

impl AugmentationSpec {
    pub fn identity(mask_token: usize) -> Self {
        AugmentationSpec {
            noise_std: 0.0,
            mask_rate: 0.0,
            sampling: MaskSampling::Random,
            values: MaskValues { time: 0.0, value: 0.0, feature: mask_token },
            elements: MaskedElements::ALL,
            interval_width: 1.0,
            mean_run: 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 {
            return Err(PaitsError::config("noise std must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(PaitsError::config("mask rate must be in [0, 1]"));
        }
        if self.interval_width <= 0.0 {
            return Err(PaitsError::config("interval width must be positive"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.noise_std == 0.0 && self.mask_rate == 0.0
    }
}

/// Pre-generated pool of fixed-length binary interval masks; `true` marks
/// a masked interval.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPool {
    pub interval_count: usize,
    pub masks: Vec<Vec<bool>>,
}

impl MaskPool {
    pub fn pool_size(&self) -> usize {
        self.masks.len()
    }
}

/// Perturb times and values with independent Gaussian noise of the given
/// standard deviation; feature indices and ordering are untouched.
/// `sigma = 0` returns a bit-identical copy.
pub fn add_noise(series: &TripletSeries, sigma: f64, rng: &mut ChaCha8Rng) -> TripletSeries {
    if sigma == 0.0 {
        return series.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let obs = series
        .obs
        .iter()
        .map(|o| ObservationTriplet {
            t: o.t + normal.sample(rng),
            v: o.v + normal.sample(rng),
            f: o.f,
        })
        .collect();
    TripletSeries { obs }
}

/// I.i.d. Bernoulli mask: `m[j] = 0` (masked) with probability `r`.
pub fn sample_mask_bernoulli(length: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..length)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 })
        .collect()
}

fn sample_geometric_run(p: f64, rng: &mut ChaCha8Rng) -> usize {
    // geometric on {1, 2, ...} with success probability p
    let u: f64 = rng.gen::<f64>();
    ((1.0 - u).ln() / (1.0 - p).ln()).ceil().max(1.0) as usize
}

/// Generate a pool of interval masks with alternating geometric runs:
/// masked runs with mean `mean_run`, unmasked runs with mean
/// `mean_run * (1 - r) / r`, so the stationary masked fraction is `r`.
pub fn build_mask_pool(
    interval_count: usize,
    rate: f64,
    mean_run: f64,
    pool_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPool> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(PaitsError::config(format!(
            "geometric mask rate must be strictly inside (0, 1), got {rate}"
        )));
    }
    if mean_run < 1.0 {
        return Err(PaitsError::config("mean masked run length must be >= 1"));
    }
    if interval_count == 0 || pool_size == 0 {
        return Err(PaitsError::config("interval count and pool size must be >= 1"));
    }
    let p_masked = 1.0 / mean_run;
    let mean_unmasked = mean_run * (1.0 - rate) / rate;
    let p_unmasked = 1.0 / mean_unmasked;

    let mut masks = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let mut mask = Vec::with_capacity(interval_count);
        let mut masked_state = rng.gen::<f64>() < rate;
        while mask.len() < interval_count {
            let p = if masked_state { p_masked } else { p_unmasked };
            let run = sample_geometric_run(p, rng);
            for _ in 0..run {
                if mask.len() == interval_count {
                    break;
                }
                mask.push(masked_state);
            }
            masked_state = !masked_state;
        }
        masks.push(mask);
    }
    Ok(MaskPool { interval_count, masks })
}

/// Apply interval masks from the pool: one pool draw per feature present
/// in the series; observation `j` is masked iff its feature's mask is
/// masked at bucket `floor((t_j - t_w) / width)`. Returns the keep mask
/// (`1` keep, `0` masked).
pub fn apply_geometric_mask(
    series: &TripletSeries,
    pool: &MaskPool,
    interval_width: f64,
    window_start: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut features: Vec<usize> = series.obs.iter().map(|o| o.f).collect();
    features.sort_unstable();
    features.dedup();
    let draws: Vec<(usize, &Vec<bool>)> = features
        .iter()
        .map(|&f| (f, &pool.masks[rng.gen_range(0..pool.masks.len())]))
        .collect();

    let mut mask = vec![1.0; series.len()];
    for (j, o) in series.obs.iter().enumerate() {
        let offset = o.t - window_start;
        let bucket = (offset / interval_width).floor();
        if bucket < 0.0 || bucket >= pool.interval_count as f64 {
            return Err(PaitsError::data(format!(
                "observation at t={} falls outside the bucketed window [{}, {})",
                o.t,
                window_start,
                window_start + pool.interval_count as f64 * interval_width
            )));
        }
        let entry = draws
            .iter()
            .find(|(f, _)| *f == o.f)
            .map(|(_, m)| m)
            .expect("feature present");
        if entry[bucket as usize] {
            mask[j] = 0.0;
        }
    }
    Ok(mask)
}

/// Substitute replacement values at masked positions for each element in
/// the masked set: `x' = x * m + a_x * (1 - m)`.
pub fn apply_mask(
    series: &TripletSeries,
    mask: &[f64],
    values: &MaskValues,
    elements: &MaskedElements,
) -> TripletSeries {
    assert_eq!(mask.len(), series.len(), "mask length must match series");
    let obs = series
        .obs
        .iter()
        .zip(mask)
        .map(|(o, &m)| {
            if m != 0.0 {
                *o
            } else {
                ObservationTriplet {
                    t: if elements.time { values.time } else { o.t },
                    v: if elements.value { values.value } else { o.v },
                    f: if elements.feature { values.feature } else { o.f },
                }
            }
        })
        .collect();
    TripletSeries { obs }
}

/// Full augmentation: noise first, then mask sampling and application.
/// Geometric bucketing uses the pre-noise observation times so that
/// bucket indices stay inside the window. Returns the applied keep mask
/// for downstream use.
pub fn augment(
    series: &TripletSeries,
    spec: &AugmentationSpec,
    window_start: f64,
    pool: Option<&MaskPool>,
    rng: &mut ChaCha8Rng,
) -> Result<(TripletSeries, Vec<f64>)> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok((series.clone(), vec![1.0; series.len()]));
    }
    let noised = add_noise(series, spec.noise_std, rng);
    let mask = if spec.mask_rate == 0.0 {
        vec![1.0; series.len()]
    } else {
        match spec.sampling {
            MaskSampling::Random => sample_mask_bernoulli(series.len(), spec.mask_rate, rng),
            MaskSampling::Geometric => {
                let pool = pool.ok_or_else(|| {
                    PaitsError::config("geometric masking requires a mask pool")
                })?;
                apply_geometric_mask(series, pool, spec.interval_width, window_start, rng)?
            }
        }
    };
    let out = apply_mask(&noised, &mask, &spec.values, &spec.elements);
    Ok((out, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TstccStrength {
    Strong,
    Weak,
}

/// Parameters for the TS-TCC view augmentations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TstccParams {
    pub jitter_std: f64,
    pub scale_std: f64,
    pub max_blocks: usize,
}

impl Default for TstccParams {
    fn default() -> Self {
        TstccParams { jitter_std: 0.1, scale_std: 0.1, max_blocks: 5 }
    }
}

fn tstcc_jitter(series: &TripletSeries, sigma: f64, rng: &mut ChaCha8Rng) -> TripletSeries {
    if sigma == 0.0 {
        return series.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let obs = series
        .obs
        .iter()
        .map(|o| ObservationTriplet { t: o.t, v: o.v + normal.sample(rng), f: o.f })
        .collect();
    TripletSeries { obs }
}

fn tstcc_scale(series: &TripletSeries, sigma: f64, rng: &mut ChaCha8Rng) -> TripletSeries {
    let mut features: Vec<usize> = series.obs.iter().map(|o| o.f).collect();
    features.sort_unstable();
    features.dedup();
    let normal = Normal::new(1.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let factors: Vec<(usize, f64)> = features
        .into_iter()
        .map(|f| (f, if sigma == 0.0 { 1.0 } else { normal.sample(rng) }))
        .collect();
    let obs = series
        .obs
        .iter()
        .map(|o| {
            let factor = factors.iter().find(|(f, _)| *f == o.f).map(|(_, c)| *c).unwrap();
            ObservationTriplet { t: o.t, v: o.v * factor, f: o.f }
        })
        .collect();
    TripletSeries { obs }
}

fn tstcc_permute(series: &TripletSeries, max_blocks: usize, rng: &mut ChaCha8Rng) -> TripletSeries {
    if series.len() < 2 || max_blocks < 2 {
        return series.clone();
    }
    let t_min = series.obs.first().unwrap().t;
    let t_max = series.obs.last().unwrap().t;
    let span = t_max - t_min;
    if span <= 0.0 {
        return series.clone();
    }
    let blocks = rng.gen_range(2..=max_blocks);
    let width = span / blocks as f64;
    let mut order: Vec<usize> = (0..blocks).collect();
    order.shuffle(rng);
    // new start offset of each original block after shuffling
    let mut new_start = vec![0.0; blocks];
    let mut acc = 0.0;
    for &orig in &order {
        new_start[orig] = acc;
        acc += width;
    }
    let obs = series
        .obs
        .iter()
        .map(|o| {
            let rel = o.t - t_min;
            let b = ((rel / width).floor() as usize).min(blocks - 1);
            let within = rel - b as f64 * width;
            ObservationTriplet { t: t_min + new_start[b] + within, v: o.v, f: o.f }
        })
        .collect();
    let mut out = TripletSeries { obs };
    out.resort();
    out
}

/// TS-TCC view construction: strong = permute time blocks then jitter,
/// weak = jitter then per-feature scaling.
pub fn tstcc_augment(
    series: &TripletSeries,
    strength: TstccStrength,
    params: &TstccParams,
    rng: &mut ChaCha8Rng,
) -> TripletSeries {
    match strength {
        TstccStrength::Strong => {
            let permuted = tstcc_permute(series, params.max_blocks, rng);
            tstcc_jitter(&permuted, params.jitter_std, rng)
        }
        TstccStrength::Weak => {
            let jittered = tstcc_jitter(series, params.jitter_std, rng);
            tstcc_scale(&jittered, params.scale_std, rng)
        }
    }
}

const POOL_MAGIC: &[u8; 8] = b"PAITSMP1";

/// Serialize a mask pool: magic, interval_count and pool_size as 32-bit
/// little-endian, then bit-packed masks row-major (rows padded to byte
/// boundaries, LSB first).
pub fn write_mask_pool<W: Write>(pool: &MaskPool, w: &mut W) -> Result<()> {
    w.write_all(POOL_MAGIC)?;
    w.write_all(&(pool.interval_count as u32).to_le_bytes())?;
    w.write_all(&(pool.masks.len() as u32).to_le_bytes())?;
    let row_bytes = pool.interval_count.div_ceil(8);
    for mask in &pool.masks {
        let mut row = vec![0u8; row_bytes];
        for (i, &bit) in mask.iter().enumerate() {
            if bit {
                row[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&row)?;
    }
    Ok(())
}

pub fn read_mask_pool<R: Read>(r: &mut R) -> Result<MaskPool> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != POOL_MAGIC {
        return Err(PaitsError::data("not a mask pool file (bad magic)"));
    }
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    let interval_count = u32::from_le_bytes(buf) as usize;
    r.read_exact(&mut buf)?;
    let pool_size = u32::from_le_bytes(buf) as usize;
    let row_bytes = interval_count.div_ceil(8);
    let mut masks = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let mut row = vec![0u8; row_bytes];
        r.read_exact(&mut row)?;
        let mask = (0..interval_count).map(|i| row[i / 8] >> (i % 8) & 1 == 1).collect();
        masks.push(mask);
    }
    Ok(MaskPool { interval_count, masks })
}
