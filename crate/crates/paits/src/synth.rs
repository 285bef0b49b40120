//! Synthetic irregular-time-series generator for desk-scale verification.
//!
//! Entities carry a latent AR(1) state sampled at unit steps; observed
//! values are a linear readout of the latent at the floor of the (Poisson)
//! observation time. Future values therefore depend on the latent past,
//! which makes the forecasting pretext demonstrably useful.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::data::{derive_rng, Label, LabeledSample, ObservationTriplet, TripletSeries};
use crate::{PaitsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub entities: usize,
    pub num_features: usize,
    pub latent_dim: usize,
    /// AR(1) coefficient; innovations are scaled by sqrt(1 - rho^2) so the
    /// latent stays unit-variance.
    pub ar_coeff: f64,
    pub readout_scale: f64,
    /// Poisson observation rate per feature, events per time unit.
    pub obs_rate: f64,
    pub span: f64,
    pub static_dim: usize,
    /// Label logit weights over [mean(latent), last(latent)], length
    /// 2 * latent_dim.
    pub label_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let latent_dim = 3;
        let label_weights = (0..2 * latent_dim)
            .map(|i| if i % 2 == 0 { 2.0 } else { -1.5 })
            .collect();
        SynthConfig {
            entities: 2000,
            num_features: 10,
            latent_dim,
            ar_coeff: 0.9,
            readout_scale: 1.0,
            obs_rate: 0.125,
            span: 48.0,
            static_dim: 3,
            label_weights,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.entities == 0 || self.num_features == 0 || self.latent_dim == 0 {
            return Err(PaitsError::config("entities, features and latent dim must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(PaitsError::config("AR coefficient must be in (0, 1)"));
        }
        if self.obs_rate <= 0.0 || self.span <= 0.0 {
            return Err(PaitsError::config("observation rate and span must be positive"));
        }
        if self.static_dim > self.latent_dim {
            return Err(PaitsError::config("static dim cannot exceed latent dim"));
        }
        if self.label_weights.len() != 2 * self.latent_dim {
            return Err(PaitsError::config(format!(
                "label weight vector must have length {}",
                2 * self.latent_dim
            )));
        }
        Ok(())
    }
}

/// One generated dataset: per-entity series, statics, and binary labels,
/// all index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub series: Vec<TripletSeries>,
    pub statics: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl SynthDataset {
    pub fn labeled_samples(&self) -> Vec<LabeledSample> {
        self.series
            .iter()
            .zip(self.statics.iter().zip(&self.labels))
            .map(|(s, (d, &y))| LabeledSample {
                statics: d.clone(),
                series: s.clone(),
                label: Label::Binary(y),
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let k = cfg.latent_dim;
    let steps = cfg.span.ceil() as usize + 1;
    let innovation = (1.0 - cfg.ar_coeff * cfg.ar_coeff).sqrt();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let obs_noise = Normal::new(0.0, 0.1).unwrap();
    let poisson = Poisson::new(cfg.obs_rate * cfg.span)
        .map_err(|e| PaitsError::config(format!("bad Poisson rate: {e}")))?;

    // shared readout matrix, one row per feature
    let mut readout_rng = derive_rng(cfg.seed, u64::MAX);
    let readout: Vec<Vec<f64>> = (0..cfg.num_features)
        .map(|_| (0..k).map(|_| unit.sample(&mut readout_rng) * cfg.readout_scale).collect())
        .collect();

    let mut series = Vec::with_capacity(cfg.entities);
    let mut statics = Vec::with_capacity(cfg.entities);
    let mut labels = Vec::with_capacity(cfg.entities);
    for e in 0..cfg.entities {
        let mut rng = derive_rng(cfg.seed, e as u64);
        let mut latent = vec![vec![0.0f64; k]; steps];
        for v in latent[0].iter_mut() {
            *v = unit.sample(&mut rng);
        }
        for s in 1..steps {
            let (prev, cur) = latent.split_at_mut(s);
            for (v, &p) in cur[0].iter_mut().zip(&prev[s - 1]) {
                *v = cfg.ar_coeff * p + innovation * unit.sample(&mut rng);
            }
        }

        let mut obs = Vec::new();
        for (f, row) in readout.iter().enumerate() {
            let n = poisson.sample(&mut rng) as usize;
            for _ in 0..n {
                let t = rng.gen_range(0.0..cfg.span);
                let x = &latent[t.floor() as usize];
                let v: f64 =
                    row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + obs_noise.sample(&mut rng);
                obs.push(ObservationTriplet { t, v, f: f + 1 });
            }
        }
        series.push(TripletSeries::new(obs));

        let d: Vec<f64> = (0..cfg.static_dim)
            .map(|i| latent[0][i] + obs_noise.sample(&mut rng))
            .collect();
        statics.push(d);

        let mut summary = vec![0.0; 2 * k];
        for d in 0..k {
            summary[d] = latent.iter().map(|x| x[d]).sum::<f64>() / steps as f64;
            summary[k + d] = latent[steps - 1][d];
        }
        let logit: f64 = cfg.label_weights.iter().zip(&summary).map(|(w, s)| w * s).sum();
        let y = u8::from(rng.gen::<f64>() < sigmoid(logit));
        labels.push(y);
    }

    Ok(SynthDataset { series, statics, labels })
}
