//! Pretraining and finetuning loops, the strategy grid and its random
//! search (Algorithm 1), and the baseline trainers.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augment, build_mask_pool, tstcc_augment, AugmentationSpec, MaskPool, MaskSampling,
    MaskValues, MaskedElements, TstccParams, TstccStrength,
};
use crate::data::{derive_rng, Label, LabeledSample, PaddedSample, PretrainWindow};
use crate::graph::{NodeId, Tape};
use crate::loss::LossWeights;
use crate::model::{
    build_forward, forecast_head, reconstruct_head, supervised_head, EncoderConfig, GradMap,
    Model, ParamLeaves, Params,
};
use crate::{par, PaitsError, Result};

// derived-rng stream offsets, spaced so per-epoch streams never collide
const STREAM_VAL: u64 = 1 << 40;
const STREAM_POOL: u64 = 2 << 40;
const STREAM_INIT: u64 = 3 << 40;
const STREAM_EPOCH: u64 = 1 << 20;

/// Whether the pretraining augmentation is reused during finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneAug {
    Same,
    None,
}

/// One point in the PAITS search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub weights: LossWeights,
    pub noise_std: f64,
    pub mask_rate: f64,
    pub sampling: MaskSampling,
    /// Replacement value used for both masked times and masked values
    /// (the grid pairs them: 0 with 0, -100 with -100).
    pub mask_value: f64,
    pub elements: MaskedElements,
    pub ft_aug: FinetuneAug,
}

impl Strategy {
    /// The full grid from the strategy-options table:
    /// 6 weightings x 2 noise levels x 4 mask rates x 2 samplers x
    /// 2 replacements x 2 element sets x 2 finetune flags = 768.
    pub fn grid() -> Vec<Strategy> {
        let mut out = Vec::with_capacity(768);
        for &(wf, wr) in &[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (10.0, 1.0), (1.0, 10.0)] {
            for &noise_std in &[0.0, 0.1] {
                for &mask_rate in &[0.0, 0.3, 0.5, 0.8] {
                    for &sampling in &[MaskSampling::Random, MaskSampling::Geometric] {
                        for &mask_value in &[0.0, -100.0] {
                            for &elements in &[MaskedElements::ALL, MaskedElements::VALUE_ONLY] {
                                for &ft_aug in &[FinetuneAug::Same, FinetuneAug::None] {
                                    out.push(Strategy {
                                        weights: LossWeights::new(wf, wr),
                                        noise_std,
                                        mask_rate,
                                        sampling,
                                        mask_value,
                                        elements,
                                        ft_aug,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// The STraTS baseline expressed as a grid point: forecasting alone,
    /// no augmentations.
    pub fn strats() -> Strategy {
        Strategy {
            weights: LossWeights::new(1.0, 0.0),
            noise_std: 0.0,
            mask_rate: 0.0,
            sampling: MaskSampling::Random,
            mask_value: 0.0,
            elements: MaskedElements::ALL,
            ft_aug: FinetuneAug::None,
        }
    }

    /// TST adaptation: reconstruction alone with geometric masking of
    /// values only.
    pub fn tst() -> Strategy {
        Strategy {
            weights: LossWeights::new(0.0, 1.0),
            noise_std: 0.0,
            mask_rate: 0.5,
            sampling: MaskSampling::Geometric,
            mask_value: 0.0,
            elements: MaskedElements::VALUE_ONLY,
            ft_aug: FinetuneAug::None,
        }
    }

    pub fn spec(&self, ctx: &AugContext) -> AugmentationSpec {
        AugmentationSpec {
            noise_std: self.noise_std,
            mask_rate: self.mask_rate,
            sampling: self.sampling,
            values: MaskValues {
                time: self.mask_value,
                value: self.mask_value,
                feature: ctx.mask_token,
            },
            elements: self.elements,
            interval_width: ctx.interval_width,
            mean_run: ctx.mean_run,
        }
    }

    pub fn is_identity_augmentation(&self) -> bool {
        self.noise_std == 0.0 && self.mask_rate == 0.0
    }
}

/// Uniform sample without replacement over the raw grid, deterministic
/// per seed.
pub fn sample_strategies(n: usize, seed: u64) -> Result<Vec<Strategy>> {
    let mut grid = Strategy::grid();
    if n > grid.len() {
        return Err(PaitsError::config(format!(
            "requested {n} strategies but the grid has {}",
            grid.len()
        )));
    }
    use rand::seq::SliceRandom;
    let mut rng = derive_rng(seed, 0);
    grid.shuffle(&mut rng);
    grid.truncate(n);
    Ok(grid)
}

/// Optimization hyperparameters shared by pretraining and finetuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stop after this many evaluations without improvement.
    pub patience: usize,
    pub min_delta: f64,
    /// Evaluate validation loss every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            min_delta: 1e-5,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(PaitsError::config("learning rate, batch size and epochs must be positive"));
        }
        if self.patience == 0 || self.eval_every == 0 {
            return Err(PaitsError::config("patience and eval cadence must be >= 1"));
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<(String, Array2<f64>)>,
    v: Vec<(String, Array2<f64>)>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64) -> Adam {
        let zeros: Vec<(String, Array2<f64>)> = params
            .iter()
            .map(|(n, p)| (n.to_string(), Array2::zeros(p.raw_dim())))
            .collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut Params, grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((name, p), (_, m)), (_, v)) in
            params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut())
        {
            let g = grads.get(name).expect("gradient for every parameter");
            azip_update(p, m, v, g, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    g: &Array2<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *p -= lr * mh / (vh.sqrt() + eps);
    });
}

/// Shared augmentation context: mask-token index, geometric bucketing in
/// the (normalized) time units of the data, and pool sizing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugContext {
    pub mask_token: usize,
    pub interval_width: f64,
    pub mean_run: f64,
    /// Bucketed span start and length covering every observation time.
    pub window_start: f64,
    pub window_len: f64,
    pub pool_size: usize,
}

impl AugContext {
    pub fn interval_count(&self) -> usize {
        (self.window_len / self.interval_width).ceil().max(1.0) as usize
    }

    pub fn build_pool(&self, rate: f64, seed: u64) -> Result<MaskPool> {
        let mut rng = derive_rng(seed, STREAM_POOL);
        build_mask_pool(self.interval_count(), rate, self.mean_run, self.pool_size, &mut rng)
    }
}

/// The pretext objective driving pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextObjective {
    /// PAITS: weighted forecasting + full-sequence reconstruction.
    Joint,
    /// TST adaptation: reconstruction restricted to masked positions.
    MaskedRecon,
    /// TS-TCC adaptation: forecasting on the weak view + InfoNCE between
    /// strong and weak views.
    TstccJoint,
    /// Contrastive-only baseline: InfoNCE between two augmented views.
    InfoNce,
    /// No pretraining.
    None,
}

/// One pretraining sample after augmentation, fixed-length.
#[derive(Debug, Clone)]
struct PreparedWindow {
    padded: PaddedSample,
    statics: Vec<f64>,
    orig_values: Vec<f64>,
    orig_features: Vec<usize>,
    /// Per-position loss gate `p * c`.
    recon_gate: Vec<f64>,
    forecast_target: Vec<f64>,
    forecast_mask: Vec<f64>,
}

/// Augment one window and fix its length. Subsampling indices are drawn
/// once and applied to the augmented series, the original values, and the
/// keep mask so all stay aligned.
fn prepare_window(
    w: &PretrainWindow,
    spec: &AugmentationSpec,
    pool: Option<&MaskPool>,
    seqlen: usize,
    masked_only_recon: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<PreparedWindow> {
    let (aug, keep) = augment(&w.input, spec, w.window_start, pool, rng)?;
    let m = aug.len();
    let idx: Vec<usize> = if m <= seqlen {
        (0..m).collect()
    } else {
        use rand::seq::SliceRandom;
        let mut all: Vec<usize> = (0..m).collect();
        all.shuffle(rng);
        let mut chosen: Vec<usize> = all.into_iter().take(seqlen).collect();
        chosen.sort_unstable();
        chosen
    };

    let mut padded = PaddedSample {
        times: vec![0.0; seqlen],
        values: vec![0.0; seqlen],
        features: vec![0; seqlen],
        pad: vec![0.0; seqlen],
    };
    let mut orig_values = vec![0.0; seqlen];
    let mut orig_features = vec![0usize; seqlen];
    let mut recon_gate = vec![0.0; seqlen];
    for (k, &i) in idx.iter().enumerate() {
        let o = aug.obs[i];
        padded.times[k] = o.t;
        padded.values[k] = o.v;
        padded.features[k] = o.f;
        padded.pad[k] = 1.0;
        orig_values[k] = w.input.obs[i].v;
        orig_features[k] = w.input.obs[i].f;
        let c = if masked_only_recon { 1.0 - keep[i] } else { 1.0 };
        recon_gate[k] = c;
    }
    Ok(PreparedWindow {
        padded,
        statics: w.statics.clone(),
        orig_values,
        orig_features,
        recon_gate,
        forecast_target: w.forecast_target.clone(),
        forecast_mask: w.forecast_mask.clone(),
    })
}

/// Per-sample pretext loss: `lambda_F * L_F + lambda_R * L_R` for one
/// window (the batch mean supplies the 1/N_U normalization).
fn pretext_loss_node(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    config: &EncoderConfig,
    pw: &PreparedWindow,
    weights: &LossWeights,
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<NodeId> {
    let fwd = build_forward(tape, leaves, config, &pw.padded, &pw.statics, dropout_rng)?;
    let mut total: Option<NodeId> = None;
    let mut add_term = |tape: &mut Tape, term: NodeId| {
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term),
        });
    };

    if weights.forecast > 0.0 {
        let pred = forecast_head(tape, leaves, fwd.fused);
        let v = config.num_features;
        let term = if config.task_mode == crate::loss::TaskMode::Multilabel {
            let targets = Array2::from_shape_fn((1, v), |(_, j)| pw.forecast_mask[j]);
            let w = Array2::from_elem((1, v), weights.forecast);
            tape.bce_with_logits(pred, targets, w)
        } else {
            let target = tape.leaf(Array2::from_shape_fn((1, v), |(_, j)| pw.forecast_target[j]));
            let mask = tape.leaf(Array2::from_shape_fn((1, v), |(_, j)| pw.forecast_mask[j]));
            let diff = tape.sub(pred, target);
            let sq = tape.mul(diff, diff);
            let masked = tape.mul(sq, mask);
            let s = tape.sum_all(masked);
            tape.scale(s, weights.forecast)
        };
        add_term(tape, term);
    }

    if weights.reconstruction > 0.0 {
        let pred = reconstruct_head(tape, leaves, fwd.per_position);
        let l = pw.padded.seqlen();
        let term = if config.recon_articles {
            let v = config.num_features;
            let targets = Array2::from_shape_fn((l, v), |(k, j)| {
                f64::from(pw.orig_features[k] == j + 1)
            });
            let w = Array2::from_shape_fn((l, v), |(k, _)| {
                weights.reconstruction * pw.recon_gate[k] * pw.padded.pad[k]
            });
            tape.bce_with_logits(pred, targets, w)
        } else {
            let target = tape.leaf(Array2::from_shape_fn((l, 1), |(k, _)| pw.orig_values[k]));
            let gate = tape.leaf(Array2::from_shape_fn((l, 1), |(k, _)| {
                pw.recon_gate[k] * pw.padded.pad[k]
            }));
            let diff = tape.sub(pred, target);
            let sq = tape.mul(diff, diff);
            let gated = tape.mul(sq, gate);
            let s = tape.sum_all(gated);
            tape.scale(s, weights.reconstruction)
        };
        add_term(tape, term);
    }

    total.ok_or_else(|| PaitsError::config("null loss weights reached the training loop"))
}

/// Mean loss and mean gradients over a batch; one tape per sample, run in
/// parallel with the `parallel` feature and summed in index order.
pub fn batch_grads<S, F>(params: &Params, samples: &[S], f: &F) -> Result<(f64, GradMap)>
where
    S: Sync,
    F: Fn(&mut Tape, &ParamLeaves, usize, &S) -> Result<NodeId> + Sync,
{
    let results = par::map_indexed(samples, |i, s| -> Result<(f64, GradMap)> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, params);
        let loss = f(&mut tape, &leaves, i, s)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        Ok((value, leaves.collect_grads(&grads, params)?))
    });
    reduce_batch(params, samples.len(), results)
}

/// Always-sequential twin of [`batch_grads`], kept for the benchmark
/// suite and bit-equality checks.
pub fn batch_grads_sequential<S, F>(params: &Params, samples: &[S], f: &F) -> Result<(f64, GradMap)>
where
    F: Fn(&mut Tape, &ParamLeaves, usize, &S) -> Result<NodeId>,
{
    let results = par::map_indexed_sequential(samples, |i, s| -> Result<(f64, GradMap)> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, params);
        let loss = f(&mut tape, &leaves, i, s)?;
        let value = tape.scalar(loss);
        let grads = tape.backward(loss);
        Ok((value, leaves.collect_grads(&grads, params)?))
    });
    reduce_batch(params, samples.len(), results)
}

fn reduce_batch(
    params: &Params,
    n: usize,
    results: Vec<Result<(f64, GradMap)>>,
) -> Result<(f64, GradMap)> {
    let mut total = 0.0;
    let mut acc = GradMap::zeros_like(params);
    for r in results {
        let (value, g) = r?;
        total += value;
        acc.add_assign(&g);
    }
    let scale = 1.0 / n.max(1) as f64;
    acc.scale(scale);
    Ok((total * scale, acc))
}

/// Mean loss only (validation), forward passes in parallel.
pub fn batch_loss<S, F>(params: &Params, samples: &[S], f: &F) -> Result<f64>
where
    S: Sync,
    F: Fn(&mut Tape, &ParamLeaves, usize, &S) -> Result<NodeId> + Sync,
{
    let results = par::map_indexed(samples, |i, s| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, params);
        let loss = f(&mut tape, &leaves, i, s)?;
        Ok(tape.scalar(loss))
    });
    let mut total = 0.0;
    for r in results {
        total += r?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Validation-loss trace of one training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct History {
    pub val: Vec<f64>,
    pub epochs_run: usize,
    pub skipped: bool,
}

struct EarlyStopper {
    best: f64,
    best_params: Option<Params>,
    stale: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStopper {
    fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper { best: f64::INFINITY, best_params: None, stale: 0, patience, min_delta }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, loss: f64, params: &Params) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_params = Some(params.clone());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    fn restore(self, params: &mut Params) -> f64 {
        if let Some(best) = self.best_params {
            *params = best;
        }
        self.best
    }
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Pretrain the encoder and pretext heads on unlabeled windows. Null loss
/// weights (with the `Joint` objective) skip training and leave the
/// parameters untouched; the history carries the skip marker.
pub fn pretrain(
    model: &mut Model,
    train: &[PretrainWindow],
    val: &[PretrainWindow],
    strategy: &Strategy,
    objective: PretextObjective,
    aug: &AugContext,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if objective == PretextObjective::None
        || (matches!(objective, PretextObjective::Joint | PretextObjective::MaskedRecon)
            && strategy.weights.is_null())
    {
        return Ok(History { skipped: true, ..History::default() });
    }
    if train.is_empty() {
        return Err(PaitsError::data("empty pretraining set"));
    }

    match objective {
        PretextObjective::Joint | PretextObjective::MaskedRecon => {
            pretrain_windowed(model, train, val, strategy, objective, aug, cfg)
        }
        PretextObjective::TstccJoint | PretextObjective::InfoNce => {
            pretrain_contrastive(model, train, val, strategy, objective, aug, cfg)
        }
        PretextObjective::None => unreachable!(),
    }
}

fn needs_pool(strategy: &Strategy) -> bool {
    strategy.mask_rate > 0.0 && strategy.sampling == MaskSampling::Geometric
}

fn pretrain_windowed(
    model: &mut Model,
    train: &[PretrainWindow],
    val: &[PretrainWindow],
    strategy: &Strategy,
    objective: PretextObjective,
    aug: &AugContext,
    cfg: &TrainConfig,
) -> Result<History> {
    let masked_only = objective == PretextObjective::MaskedRecon;
    let spec = strategy.spec(aug);
    let pool = if needs_pool(strategy) {
        Some(aug.build_pool(strategy.mask_rate, cfg.seed)?)
    } else {
        None
    };
    let seqlen = model.config.seqlen;
    let weights = strategy.weights;

    // validation windows are augmented once with a fixed stream so the
    // early-stopping signal is deterministic
    let val_prepared: Vec<PreparedWindow> = val
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut rng = derive_rng(cfg.seed, STREAM_VAL + i as u64);
            prepare_window(w, &spec, pool.as_ref(), seqlen, masked_only, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut history = History::default();
    let config = model.config.clone();

    for epoch in 0..cfg.max_epochs {
        let epoch_base = (epoch as u64 + 1) * STREAM_EPOCH;
        let prepared: Vec<PreparedWindow> = par::map_indexed(train, |i, w| {
            let mut rng = derive_rng(cfg.seed, epoch_base + i as u64);
            prepare_window(w, &spec, pool.as_ref(), seqlen, masked_only, &mut rng)
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut order_rng = derive_rng(cfg.seed, epoch_base);
        for batch in shuffled_batches(prepared.len(), cfg.batch_size, &mut order_rng) {
            let items: Vec<&PreparedWindow> = batch.iter().map(|&i| &prepared[i]).collect();
            let cfg_seed = cfg.seed;
            let (_, grads) = batch_grads(&model.params, &items, &|tape, leaves, k, pw| {
                let mut drop_rng = derive_rng(cfg_seed, epoch_base + (batch[k] as u64) * 7 + 3);
                pretext_loss_node(tape, leaves, &config, pw, &weights, Some(&mut drop_rng))
            })?;
            adam.step(&mut model.params, &grads);
        }
        history.epochs_run = epoch + 1;

        if (epoch + 1) % cfg.eval_every == 0 {
            let val_loss = batch_loss(&model.params, &val_prepared, &|tape, leaves, _, pw| {
                pretext_loss_node(tape, leaves, &config, pw, &weights, None)
            })?;
            history.val.push(val_loss);
            if stopper.observe(val_loss, &model.params) {
                break;
            }
        }
    }
    stopper.restore(&mut model.params);
    Ok(history)
}

/// Contrastive pretraining builds one tape per batch: the per-view fused
/// embeddings are stacked and fed through a normalized-similarity
/// cross-entropy (InfoNCE); the TS-TCC variant adds the weak-view
/// forecasting loss.
fn pretrain_contrastive(
    model: &mut Model,
    train: &[PretrainWindow],
    val: &[PretrainWindow],
    strategy: &Strategy,
    objective: PretextObjective,
    aug: &AugContext,
    cfg: &TrainConfig,
) -> Result<History> {
    const TEMPERATURE: f64 = 0.1;
    let spec = strategy.spec(aug);
    let pool = if needs_pool(strategy) {
        Some(aug.build_pool(strategy.mask_rate, cfg.seed)?)
    } else {
        None
    };
    let seqlen = model.config.seqlen;
    let tstcc = objective == PretextObjective::TstccJoint;
    let tstcc_params = TstccParams::default();

    // two deterministic views per window
    let make_views = |w: &PretrainWindow, stream: u64, seed: u64| -> Result<(PreparedWindow, PreparedWindow)> {
        let mut rng = derive_rng(seed, stream);
        if tstcc {
            let strong = tstcc_augment(&w.input, TstccStrength::Strong, &tstcc_params, &mut rng);
            let weak = tstcc_augment(&w.input, TstccStrength::Weak, &tstcc_params, &mut rng);
            let identity = AugmentationSpec::identity(aug.mask_token);
            let pack = |series: &crate::data::TripletSeries, rng: &mut rand_chacha::ChaCha8Rng| {
                let view = PretrainWindow {
                    statics: w.statics.clone(),
                    input: series.clone(),
                    window_start: w.window_start,
                    forecast_target: w.forecast_target.clone(),
                    forecast_mask: w.forecast_mask.clone(),
                };
                prepare_window(&view, &identity, None, seqlen, false, rng)
            };
            Ok((pack(&strong, &mut rng)?, pack(&weak, &mut rng)?))
        } else {
            let a = prepare_window(w, &spec, pool.as_ref(), seqlen, false, &mut rng)?;
            let b = prepare_window(w, &spec, pool.as_ref(), seqlen, false, &mut rng)?;
            Ok((a, b))
        }
    };

    let val_views: Vec<(PreparedWindow, PreparedWindow)> = val
        .iter()
        .enumerate()
        .map(|(i, w)| make_views(w, STREAM_VAL + i as u64, cfg.seed))
        .collect::<Result<_>>()?;

    let config = model.config.clone();
    let forecast_weight = strategy.weights.forecast.max(1.0);
    let batch_objective = |params: &Params,
                           views: &[(PreparedWindow, PreparedWindow)],
                           train_mode: bool,
                           drop_seed: u64|
     -> Result<(f64, Option<GradMap>)> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, params);
        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        let mut forecast_terms: Vec<NodeId> = Vec::new();
        for (i, (a, b)) in views.iter().enumerate() {
            let mut rng_a = derive_rng(drop_seed, 2 * i as u64);
            let mut rng_b = derive_rng(drop_seed, 2 * i as u64 + 1);
            let fa = build_forward(
                &mut tape, &leaves, &config, &a.padded, &a.statics,
                train_mode.then_some(&mut rng_a),
            )?;
            let fb = build_forward(
                &mut tape, &leaves, &config, &b.padded, &b.statics,
                train_mode.then_some(&mut rng_b),
            )?;
            anchors.push(fa.fused);
            positives.push(fb.fused);
            if tstcc {
                let pred = forecast_head(&mut tape, &leaves, fb.fused);
                let v = config.num_features;
                let target =
                    tape.leaf(Array2::from_shape_fn((1, v), |(_, j)| b.forecast_target[j]));
                let mask = tape.leaf(Array2::from_shape_fn((1, v), |(_, j)| b.forecast_mask[j]));
                let diff = tape.sub(pred, target);
                let sq = tape.mul(diff, diff);
                let masked = tape.mul(sq, mask);
                forecast_terms.push(tape.sum_all(masked));
            }
        }
        let n = views.len();
        let mut loss = if n >= 2 {
            let a = tape.stack_rows(anchors);
            let p = tape.stack_rows(positives);
            let an = tape.row_normalize(a)?;
            let pn = tape.row_normalize(p)?;
            let pt = tape.transpose(pn);
            let sims = tape.matmul(an, pt);
            let scaled = tape.scale(sims, 1.0 / TEMPERATURE);
            let ce = tape.cross_entropy_rows(scaled, (0..n).collect());
            Some(tape.scale(ce, 1.0 / n as f64))
        } else {
            None
        };
        for term in forecast_terms {
            let scaled = tape.scale(term, forecast_weight / n as f64);
            loss = Some(match loss {
                None => scaled,
                Some(l) => tape.add(l, scaled),
            });
        }
        let loss = loss.ok_or_else(|| PaitsError::data("contrastive batch too small"))?;
        let value = tape.scalar(loss);
        if train_mode {
            let grads = tape.backward(loss);
            Ok((value, Some(leaves.collect_grads(&grads, params)?)))
        } else {
            Ok((value, None))
        }
    };

    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut history = History::default();
    for epoch in 0..cfg.max_epochs {
        let epoch_base = (epoch as u64 + 1) * STREAM_EPOCH;
        let views: Vec<(PreparedWindow, PreparedWindow)> = train
            .iter()
            .enumerate()
            .map(|(i, w)| make_views(w, epoch_base + i as u64, cfg.seed))
            .collect::<Result<_>>()?;
        let mut order_rng = derive_rng(cfg.seed, epoch_base);
        for batch in shuffled_batches(views.len(), cfg.batch_size, &mut order_rng) {
            let items: Vec<(PreparedWindow, PreparedWindow)> =
                batch.iter().map(|&i| views[i].clone()).collect();
            let (_, grads) =
                batch_objective(&model.params, &items, true, cfg.seed ^ epoch_base)?;
            adam.step(&mut model.params, &grads.expect("train mode returns gradients"));
        }
        history.epochs_run = epoch + 1;
        if (epoch + 1) % cfg.eval_every == 0 {
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in val_views.chunks(cfg.batch_size) {
                let (value, _) = batch_objective(&model.params, chunk, false, 0)?;
                total += value;
                batches += 1;
            }
            let val_loss = total / batches.max(1) as f64;
            history.val.push(val_loss);
            if stopper.observe(val_loss, &model.params) {
                break;
            }
        }
    }
    stopper.restore(&mut model.params);
    Ok(history)
}

fn label_targets(label: &Label, config: &EncoderConfig) -> Result<Array2<f64>> {
    match label {
        Label::Binary(y) => {
            if config.supervised_out() != 1 {
                return Err(PaitsError::data("binary label with multilabel head"));
            }
            Ok(Array2::from_elem((1, 1), f64::from(*y)))
        }
        Label::Multi(v) => {
            if v.len() != config.supervised_out() {
                return Err(PaitsError::shape(format!(
                    "label vector of length {} vs {} articles",
                    v.len(),
                    config.supervised_out()
                )));
            }
            Ok(Array2::from_shape_fn((1, v.len()), |(_, j)| f64::from(v[j])))
        }
    }
}

fn prepare_labeled(
    s: &LabeledSample,
    spec: Option<(&AugmentationSpec, Option<&MaskPool>, f64)>,
    seqlen: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<(PaddedSample, Vec<f64>)> {
    let series = match spec {
        Some((spec, pool, window_start)) => augment(&s.series, spec, window_start, pool, rng)?.0,
        None => s.series.clone(),
    };
    Ok((crate::data::pad_or_subsample(&series, seqlen, rng), s.statics.clone()))
}

/// Supervised finetuning: pretext heads are discarded, the supervised
/// head is freshly initialized, and training stops early on validation
/// BCE. Returns the best validation loss; the model is restored to the
/// parameters that achieved it.
pub fn finetune(
    model: &mut Model,
    train: &[LabeledSample],
    val: &[LabeledSample],
    ft_strategy: Option<(&Strategy, &AugContext)>,
    cfg: &TrainConfig,
) -> Result<(f64, History)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PaitsError::data("empty labeled training set"));
    }
    model.params.remove_prefix("fore.");
    model.params.remove_prefix("recon.");
    model.reinit_supervised(derive_rng(cfg.seed, STREAM_INIT).next_u64());

    let seqlen = model.config.seqlen;
    let config = model.config.clone();
    let aug_active = ft_strategy
        .filter(|(s, _)| s.ft_aug == FinetuneAug::Same && !s.is_identity_augmentation());
    let (spec, pool, window_start) = match aug_active {
        Some((s, ctx)) => {
            let spec = s.spec(ctx);
            let pool = if needs_pool(s) { Some(ctx.build_pool(s.mask_rate, cfg.seed)?) } else { None };
            (Some(spec), pool, ctx.window_start)
        }
        None => (None, None, 0.0),
    };

    // validation inputs are never augmented; one fixed subsample
    let val_prepared: Vec<(PaddedSample, Vec<f64>, Array2<f64>)> = val
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(cfg.seed, STREAM_VAL + i as u64);
            let (padded, statics) = prepare_labeled(s, None, seqlen, &mut rng)?;
            Ok((padded, statics, label_targets(&s.label, &config)?))
        })
        .collect::<Result<_>>()?;

    let supervised_node = |tape: &mut Tape,
                           leaves: &ParamLeaves,
                           padded: &PaddedSample,
                           statics: &[f64],
                           targets: &Array2<f64>,
                           drop: Option<&mut rand_chacha::ChaCha8Rng>|
     -> Result<NodeId> {
        let fwd = build_forward(tape, leaves, &config, padded, statics, drop)?;
        let logits = supervised_head(tape, leaves, fwd.fused);
        let k = targets.len() as f64;
        let weights = Array2::from_elem(targets.raw_dim(), 1.0 / k);
        Ok(tape.bce_with_logits(logits, targets.clone(), weights))
    };

    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut history = History::default();

    for epoch in 0..cfg.max_epochs {
        let epoch_base = (epoch as u64 + 1) * STREAM_EPOCH;
        let prepared: Vec<(PaddedSample, Vec<f64>, Array2<f64>)> = par::map_indexed(train, |i, s| {
            let mut rng = derive_rng(cfg.seed, epoch_base + i as u64);
            let aug_ref = spec.as_ref().map(|sp| (sp, pool.as_ref(), window_start));
            let (padded, statics) = prepare_labeled(s, aug_ref, seqlen, &mut rng)?;
            Ok((padded, statics, label_targets(&s.label, &config)?))
        })
        .into_iter()
        .collect::<Result<_>>()?;

        let mut order_rng = derive_rng(cfg.seed, epoch_base + 1);
        for batch in shuffled_batches(prepared.len(), cfg.batch_size, &mut order_rng) {
            let items: Vec<&(PaddedSample, Vec<f64>, Array2<f64>)> =
                batch.iter().map(|&i| &prepared[i]).collect();
            let cfg_seed = cfg.seed;
            let (_, grads) = batch_grads(&model.params, &items, &|tape, leaves, k, item| {
                let mut drop_rng = derive_rng(cfg_seed, epoch_base + (batch[k] as u64) * 11 + 5);
                supervised_node(tape, leaves, &item.0, &item.1, &item.2, Some(&mut drop_rng))
            })?;
            adam.step(&mut model.params, &grads);
        }
        history.epochs_run = epoch + 1;

        if (epoch + 1) % cfg.eval_every == 0 {
            let val_loss = batch_loss(&model.params, &val_prepared, &|tape, leaves, _, item| {
                supervised_node(tape, leaves, &item.0, &item.1, &item.2, None)
            })?;
            history.val.push(val_loss);
            if stopper.observe(val_loss, &model.params) {
                break;
            }
        }
    }
    let best = stopper.restore(&mut model.params);
    Ok((best, history))
}

/// Validation supervised loss of a frozen model (no augmentation, eval
/// mode), using the same deterministic subsampling as [`finetune`].
pub fn supervised_validation_loss(
    model: &Model,
    samples: &[LabeledSample],
    seed: u64,
) -> Result<f64> {
    let config = model.config.clone();
    let prepared: Vec<(PaddedSample, Vec<f64>, Array2<f64>)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = derive_rng(seed, STREAM_VAL + i as u64);
            let (padded, statics) = prepare_labeled(s, None, model.config.seqlen, &mut rng)?;
            Ok((padded, statics, label_targets(&s.label, &config)?))
        })
        .collect::<Result<_>>()?;
    batch_loss(&model.params, &prepared, &|tape, leaves, _, item| {
        let fwd = build_forward(tape, leaves, &config, &item.0, &item.1, None)?;
        let logits = supervised_head(tape, leaves, fwd.fused);
        let k = item.2.len() as f64;
        let weights = Array2::from_elem(item.2.raw_dim(), 1.0 / k);
        Ok(tape.bce_with_logits(logits, item.2.clone(), weights))
    })
}

/// Sigmoid probabilities of the positive class for each sample, using a
/// deterministic subsample per sample index.
pub fn score_samples(model: &Model, samples: &[LabeledSample], seed: u64) -> Result<Vec<f64>> {
    let results = par::map_indexed(samples, |i, s| -> Result<f64> {
        let mut rng = derive_rng(seed, STREAM_VAL + i as u64);
        let padded = crate::data::pad_or_subsample(&s.series, model.config.seqlen, &mut rng);
        let logits = model.predict_logits(&padded, &s.statics)?;
        Ok(1.0 / (1.0 + (-logits[[0, 0]]).exp()))
    });
    results.into_iter().collect()
}

/// Per-strategy search bookkeeping, persisted as one JSON document per
/// run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub val_loss: Option<f64>,
    pub pretrain_skipped: bool,
    pub pretrain_history: Vec<f64>,
    pub finetune_history: Vec<f64>,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed(index: usize, strategy: Strategy, seed: u64, err: &PaitsError) -> RunRecord {
        RunRecord {
            index,
            strategy,
            seed,
            val_loss: None,
            pretrain_skipped: false,
            pretrain_history: Vec::new(),
            finetune_history: Vec::new(),
            checkpoint: None,
            wall_clock_secs: 0.0,
            error: Some(err.to_string()),
        }
    }
}

/// Outcome of the random search: best strategy (BS), its loss (BL), the
/// non-increasing BL trace, and every run record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub best_strategy: Strategy,
    pub best_loss: f64,
    pub bl_sequence: Vec<f64>,
    pub records: Vec<RunRecord>,
}

/// Algorithm 1 fold: evaluate each strategy, track the argmin validation
/// loss with ties broken by earlier index. Failed runs are recorded and
/// skipped; if every run fails the search errors.
pub fn run_search<F>(strategies: &[Strategy], mut eval: F) -> Result<SearchOutcome>
where
    F: FnMut(usize, &Strategy) -> Result<RunRecord>,
{
    if strategies.is_empty() {
        return Err(PaitsError::config("search needs at least one strategy"));
    }
    let mut records = Vec::with_capacity(strategies.len());
    let mut best: Option<(usize, Strategy, f64)> = None;
    let mut bl_sequence = Vec::with_capacity(strategies.len());
    for (i, s) in strategies.iter().enumerate() {
        let record = match eval(i, s) {
            Ok(r) => r,
            Err(e) => RunRecord::failed(i, *s, 0, &e),
        };
        if let Some(loss) = record.val_loss {
            let better = match &best {
                None => true,
                Some((_, _, bl)) => loss < *bl,
            };
            if better {
                best = Some((i, *s, loss));
            }
        }
        bl_sequence.push(best.as_ref().map_or(f64::INFINITY, |(_, _, bl)| *bl));
        records.push(record);
    }
    let (best_index, best_strategy, best_loss) =
        best.ok_or_else(|| PaitsError::data("every search run failed"))?;
    Ok(SearchOutcome { best_index, best_strategy, best_loss, bl_sequence, records })
}

/// Named baseline trainers from the paper's comparison set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Strats,
    Tst,
    Tstcc,
    ClPaits,
    None,
}

impl std::str::FromStr for Baseline {
    type Err = PaitsError;

    fn from_str(s: &str) -> Result<Baseline> {
        match s {
            "strats" => Ok(Baseline::Strats),
            "tst" => Ok(Baseline::Tst),
            "tstcc" => Ok(Baseline::Tstcc),
            "cl_paits" => Ok(Baseline::ClPaits),
            "none" => Ok(Baseline::None),
            other => Err(PaitsError::config(format!(
                "unknown baseline {other}; expected strats|tst|tstcc|cl_paits|none"
            ))),
        }
    }
}

/// The strategy and pretext objective a baseline uses.
pub fn baseline_plan(b: Baseline) -> (Strategy, PretextObjective) {
    match b {
        Baseline::Strats => (Strategy::strats(), PretextObjective::Joint),
        Baseline::Tst => (Strategy::tst(), PretextObjective::MaskedRecon),
        Baseline::Tstcc => (Strategy::strats(), PretextObjective::TstccJoint),
        Baseline::ClPaits => (
            Strategy {
                weights: LossWeights::new(0.0, 0.0),
                noise_std: 0.1,
                mask_rate: 0.3,
                sampling: MaskSampling::Random,
                mask_value: 0.0,
                elements: MaskedElements::ALL,
                ft_aug: FinetuneAug::None,
            },
            PretextObjective::InfoNce,
        ),
        Baseline::None => (Strategy::strats(), PretextObjective::None),
    }
}

use rand::RngCore;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ObservationTriplet, TripletSeries};
    use crate::synth::{generate_synthetic, SynthConfig};

    #[test]
    fn grid_has_768_points_and_sampling_is_deterministic() {
        let grid = Strategy::grid();
        assert_eq!(grid.len(), 768);
        // all points distinct
        for (i, a) in grid.iter().enumerate() {
            for b in &grid[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let a = sample_strategies(10, 42).unwrap();
        let b = sample_strategies(10, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_strategies(10, 43).unwrap());
        assert!(sample_strategies(769, 0).is_err());

        let full = sample_strategies(768, 7).unwrap();
        for g in &grid {
            assert!(full.contains(g));
        }
    }

    #[test]
    fn run_search_returns_argmin_with_non_increasing_bl() {
        let strategies = sample_strategies(6, 0).unwrap();
        let table = [0.7, 0.4, 0.9, 0.4, 0.2, 0.5];
        let out = run_search(&strategies, |i, s| {
            Ok(RunRecord {
                index: i,
                strategy: *s,
                seed: 0,
                val_loss: Some(table[i]),
                pretrain_skipped: false,
                pretrain_history: vec![],
                finetune_history: vec![],
                checkpoint: None,
                wall_clock_secs: 0.0,
                error: None,
            })
        })
        .unwrap();
        assert_eq!(out.best_index, 4);
        assert_eq!(out.best_loss, 0.2);
        for w in out.bl_sequence.windows(2) {
            assert!(w[1] <= w[0]);
        }

        // ties broken by earlier index
        let tied = run_search(&strategies[..3], |i, s| {
            Ok(RunRecord { val_loss: Some(0.4), ..RunRecord::failed(i, *s, 0, &PaitsError::data("")) })
        })
        .unwrap();
        assert_eq!(tied.best_index, 0);

        // single strategy
        let single = run_search(&strategies[..1], |i, s| {
            Ok(RunRecord { val_loss: Some(1.0), ..RunRecord::failed(i, *s, 0, &PaitsError::data("")) })
        })
        .unwrap();
        assert_eq!(single.best_index, 0);

        // all failures -> error
        assert!(run_search(&strategies[..2], |_, _| {
            Err(PaitsError::data("boom"))
        })
        .is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = Params::new();
        params.insert("w", ndarray::Array2::from_elem((1, 1), 5.0));
        let mut adam = Adam::new(&params, 0.1);
        for _ in 0..500 {
            let w = params.get("w").unwrap()[[0, 0]];
            let grads = GradMap {
                entries: vec![("w".into(), ndarray::Array2::from_elem((1, 1), 2.0 * (w - 1.5)))],
            };
            adam.step(&mut params, &grads);
        }
        let w = params.get("w").unwrap()[[0, 0]];
        assert!((w - 1.5).abs() < 1e-2, "w = {w}");
    }

    fn tiny_setup() -> (Model, Vec<PretrainWindow>, AugContext, TrainConfig) {
        let mut windows = Vec::new();
        let mut rng = derive_rng(3, 9);
        use rand::Rng;
        for _ in 0..24 {
            let obs: Vec<ObservationTriplet> = (0..5)
                .map(|_| ObservationTriplet {
                    t: rng.gen_range(0.0..4.0),
                    v: rng.gen_range(-1.0..1.0),
                    f: rng.gen_range(1..=3),
                })
                .collect();
            let v1 = obs.iter().find(|o| o.f == 1).map_or(0.3, |o| o.v);
            windows.push(PretrainWindow {
                statics: vec![0.2, -0.1],
                input: TripletSeries::new(obs),
                window_start: 0.0,
                forecast_target: vec![0.8 * v1, 0.0, 0.0],
                forecast_mask: vec![1.0, 0.0, 0.0],
            });
        }
        let model = Model::init(EncoderConfig::tiny(6, 3, 2), 1).unwrap();
        let aug = AugContext {
            mask_token: 4,
            interval_width: 1.0,
            mean_run: 3.0,
            window_start: 0.0,
            window_len: 4.0,
            pool_size: 50,
        };
        let cfg = TrainConfig { max_epochs: 4, batch_size: 8, ..TrainConfig::default() };
        (model, windows, aug, cfg)
    }

    #[test]
    fn null_weights_skip_pretraining_bit_identically() {
        let (mut model, windows, aug, cfg) = tiny_setup();
        let before = model.params.clone();
        let strategy = Strategy {
            weights: LossWeights::new(0.0, 0.0),
            ..Strategy::strats()
        };
        let h = pretrain(&mut model, &windows[..16], &windows[16..], &strategy,
                         PretextObjective::Joint, &aug, &cfg).unwrap();
        assert!(h.skipped);
        assert!(h.val.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn pretraining_reduces_validation_loss() {
        let (mut model, windows, aug, cfg) = tiny_setup();
        let cfg = TrainConfig { max_epochs: 8, ..cfg };
        let h = pretrain(&mut model, &windows[..16], &windows[16..], &Strategy::strats(),
                         PretextObjective::Joint, &aug, &cfg).unwrap();
        assert!(!h.skipped);
        assert_eq!(h.val.len(), h.epochs_run);
        let best = h.val.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(best < h.val[0], "no improvement: {:?}", h.val);
    }

    #[test]
    fn geometric_strategy_trains_without_error() {
        let (mut model, windows, aug, cfg) = tiny_setup();
        let strategy = Strategy {
            weights: LossWeights::new(1.0, 1.0),
            mask_rate: 0.5,
            sampling: MaskSampling::Geometric,
            ..Strategy::strats()
        };
        let cfg = TrainConfig { max_epochs: 2, ..cfg };
        pretrain(&mut model, &windows[..16], &windows[16..], &strategy,
                 PretextObjective::Joint, &aug, &cfg).unwrap();
    }

    #[test]
    fn contrastive_objectives_train_without_error() {
        for objective in [PretextObjective::InfoNce, PretextObjective::TstccJoint] {
            let (mut model, windows, aug, cfg) = tiny_setup();
            let (mut strategy, _) = baseline_plan(Baseline::ClPaits);
            strategy.ft_aug = FinetuneAug::None;
            let cfg = TrainConfig { max_epochs: 2, batch_size: 8, ..cfg };
            let h = pretrain(&mut model, &windows[..16], &windows[16..], &strategy,
                             objective, &aug, &cfg).unwrap();
            assert_eq!(h.val.len(), 2);
        }
    }

    fn tiny_labeled() -> (Model, Vec<LabeledSample>, AugContext) {
        let cfg = SynthConfig {
            entities: 60,
            num_features: 3,
            obs_rate: 0.1,
            span: 12.0,
            static_dim: 2,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let samples: Vec<LabeledSample> = data
            .labeled_samples()
            .into_iter()
            .filter(|s| !s.series.is_empty())
            .collect();
        let model = Model::init(EncoderConfig::tiny(8, 3, 2), 2).unwrap();
        let aug = AugContext {
            mask_token: 4,
            interval_width: 1.0,
            mean_run: 3.0,
            window_start: 0.0,
            window_len: 12.0,
            pool_size: 50,
        };
        (model, samples, aug)
    }

    #[test]
    fn finetune_is_deterministic_and_restores_best() {
        let (model, samples, _) = tiny_labeled();
        let (train, val) = samples.split_at(samples.len() * 2 / 3);
        let cfg = TrainConfig { max_epochs: 4, batch_size: 8, ..TrainConfig::default() };

        let mut m1 = model.clone();
        let (loss1, h1) = finetune(&mut m1, train, val, None, &cfg).unwrap();
        let mut m2 = model.clone();
        let (loss2, _) = finetune(&mut m2, train, val, None, &cfg).unwrap();
        assert_eq!(loss1, loss2);
        assert_eq!(m1.params, m2.params);

        // restored parameters reproduce the reported best loss
        let check = supervised_validation_loss(&m1, val, cfg.seed).unwrap();
        assert!((check - loss1).abs() < 1e-9);
        assert_eq!(loss1, h1.val.iter().cloned().fold(f64::INFINITY, f64::min));

        // pretext heads are gone
        assert!(m1.params.get("fore.w").is_none());
        assert!(m1.params.get("recon.w1").is_none());

        assert!(finetune(&mut model.clone(), &[], val, None, &cfg).is_err());
    }

    #[test]
    fn finetune_augmentation_changes_training_but_not_validation() {
        let (model, samples, aug) = tiny_labeled();
        let (train, val) = samples.split_at(samples.len() * 2 / 3);
        let cfg = TrainConfig { max_epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let strategy = Strategy {
            noise_std: 0.1,
            mask_rate: 0.3,
            ft_aug: FinetuneAug::Same,
            ..Strategy::strats()
        };
        let mut plain = model.clone();
        let (_, h_plain) = finetune(&mut plain, train, val, None, &cfg).unwrap();
        let mut augd = model.clone();
        let (_, h_aug) = finetune(&mut augd, train, val, Some((&strategy, &aug)), &cfg).unwrap();
        assert_ne!(h_plain.val, h_aug.val);
    }

    #[test]
    fn baseline_names_parse() {
        for (name, expected) in [
            ("strats", Baseline::Strats),
            ("tst", Baseline::Tst),
            ("tstcc", Baseline::Tstcc),
            ("cl_paits", Baseline::ClPaits),
            ("none", Baseline::None),
        ] {
            assert_eq!(name.parse::<Baseline>().unwrap(), expected);
        }
        assert!("moco".parse::<Baseline>().is_err());
        let (s, o) = baseline_plan(Baseline::Strats);
        assert_eq!(s, Strategy::strats());
        assert_eq!(o, PretextObjective::Joint);
        assert_eq!(baseline_plan(Baseline::None).1, PretextObjective::None);
    }

    #[test]
    fn parallel_and_sequential_batch_grads_agree() {
        let (model, samples, _) = tiny_labeled();
        let config = model.config.clone();
        let items: Vec<(PaddedSample, Vec<f64>, Array2<f64>)> = samples[..8]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = derive_rng(0, i as u64);
                let padded = crate::data::pad_or_subsample(&s.series, 8, &mut rng);
                (padded, s.statics.clone(), label_targets(&s.label, &config).unwrap())
            })
            .collect();
        let builder = |tape: &mut Tape, leaves: &ParamLeaves, _: usize,
                       item: &(PaddedSample, Vec<f64>, Array2<f64>)|
         -> Result<NodeId> {
            let fwd = build_forward(tape, leaves, &config, &item.0, &item.1, None)?;
            let logits = supervised_head(tape, leaves, fwd.fused);
            Ok(tape.bce_with_logits(logits, item.2.clone(), Array2::ones(item.2.raw_dim())))
        };
        let (l_par, g_par) = batch_grads(&model.params, &items, &builder).unwrap();
        let (l_seq, g_seq) = batch_grads_sequential(&model.params, &items, &builder).unwrap();
        assert_eq!(l_par, l_seq);
        for ((na, ga), (nb, gb)) in g_par.entries.iter().zip(&g_seq.entries) {
            assert_eq!(na, nb);
            assert_eq!(ga, gb);
        }
    }
}
