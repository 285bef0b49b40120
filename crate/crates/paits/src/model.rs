//! Triplet-sequence encoder: continuous value embeddings for time and
//! value, a feature lookup table, transformer blocks, fusion
//! self-attention, a static-feature module, and the three task heads.
//!
//! Forward passes are built on the autodiff tape in [`crate::graph`], so
//! training gets exact gradients; the same builders serve eval-mode
//! inference with dropout disabled.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PaddedSample;
use crate::graph::{NodeId, Tape};
use crate::loss::TaskMode;
use crate::{PaitsError, Result};

/// Architecture hyperparameters. Defaults follow the reference setup:
/// 50-dimensional embeddings, two transformer blocks with four heads,
/// dropout 0.2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub seqlen: usize,
    pub num_features: usize,
    pub static_dim: usize,
    pub ff_width: usize,
    pub static_embed_dim: usize,
    pub supervised_hidden: usize,
    pub task_mode: TaskMode,
    /// Retail reconstruction target: predict the purchased-article identity
    /// per position (V logits) instead of the value.
    pub recon_articles: bool,
}

impl EncoderConfig {
    pub fn with_dims(seqlen: usize, num_features: usize, static_dim: usize) -> Self {
        EncoderConfig {
            embed_dim: 50,
            blocks: 2,
            heads: 4,
            dropout: 0.2,
            seqlen,
            num_features,
            static_dim,
            ff_width: 100,
            static_embed_dim: 50,
            supervised_hidden: 50,
            task_mode: TaskMode::Binary,
            recon_articles: false,
        }
    }

    /// Small configuration used by gradient checks and fast tests.
    pub fn tiny(seqlen: usize, num_features: usize, static_dim: usize) -> Self {
        EncoderConfig {
            embed_dim: 4,
            blocks: 1,
            heads: 2,
            dropout: 0.0,
            seqlen,
            num_features,
            static_dim,
            ff_width: 8,
            static_embed_dim: 4,
            supervised_hidden: 4,
            task_mode: TaskMode::Binary,
            recon_articles: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.blocks == 0 || self.heads == 0 || self.seqlen == 0 {
            return Err(PaitsError::config("all architecture counts must be >= 1"));
        }
        if self.heads > self.embed_dim {
            return Err(PaitsError::config("more heads than embedding dimensions"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PaitsError::config("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    /// Per-head attention width; the concatenated head output is projected
    /// back to `embed_dim`.
    pub fn head_dim(&self) -> usize {
        (self.embed_dim / self.heads).max(1)
    }

    /// Index of the learned mask-token row in the feature table.
    pub fn mask_token(&self) -> usize {
        self.num_features + 1
    }

    /// Width of the fused series + statics embedding.
    pub fn fused_dim(&self) -> usize {
        self.embed_dim + if self.static_dim > 0 { self.static_embed_dim } else { 0 }
    }

    pub fn supervised_out(&self) -> usize {
        match self.task_mode {
            TaskMode::Binary => 1,
            TaskMode::Multilabel => self.num_features,
        }
    }

    pub fn recon_out(&self) -> usize {
        if self.recon_articles {
            self.num_features
        } else {
            1
        }
    }
}

/// Named parameter matrices. Names are grouped by prefix: `enc.` for the
/// shared encoder, `fore.` / `recon.` / `sup.` for the task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Array2<f64>)>,
}

impl Params {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        debug_assert!(self.get(name).is_none(), "duplicate parameter {name}");
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Remove all parameters under a prefix (e.g. dropping pretext heads).
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(prefix));
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients, aligned by name with [`Params`].
#[derive(Debug, Clone)]
pub struct GradMap {
    pub entries: Vec<(String, Array2<f64>)>,
}

impl GradMap {
    pub fn zeros_like(params: &Params) -> Self {
        GradMap {
            entries: params
                .iter()
                .map(|(n, v)| (n.to_string(), Array2::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn add_assign(&mut self, other: &GradMap) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, g) in &mut self.entries {
            *g *= c;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, g) in &self.entries {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(PaitsError::Numerical(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
        }
        Ok(())
    }
}

fn uniform_fan_in(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Encoder + task-head parameters with the owning configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: Params,
}

impl Model {
    /// Initialize all parameters with uniform fan-in scaling from a seed.
    /// The padding row of the feature table is frozen at zero.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut p = Params::new();

        for name in ["enc.cve_t", "enc.cve_v"] {
            p.insert(&format!("{name}.w1"), uniform_fan_in(1, d, 1, &mut rng));
            p.insert(&format!("{name}.b1"), Array2::zeros((1, d)));
            p.insert(&format!("{name}.w2"), uniform_fan_in(d, d, d, &mut rng));
            p.insert(&format!("{name}.b2"), Array2::zeros((1, d)));
        }
        let mut lut = uniform_fan_in(config.num_features + 2, d, d, &mut rng);
        lut.row_mut(0).fill(0.0);
        p.insert("enc.lut", lut);

        let hdk = config.heads * config.head_dim();
        for b in 0..config.blocks {
            for proj in ["wq", "wk", "wv"] {
                p.insert(&format!("enc.block{b}.{proj}"), uniform_fan_in(d, hdk, d, &mut rng));
                let bias = proj.replace('w', "b");
                p.insert(&format!("enc.block{b}.{bias}"), Array2::zeros((1, hdk)));
            }
            p.insert(&format!("enc.block{b}.wo"), uniform_fan_in(hdk, d, hdk, &mut rng));
            p.insert(&format!("enc.block{b}.bo"), Array2::zeros((1, d)));
            p.insert(&format!("enc.block{b}.ln1.g"), Array2::ones((1, d)));
            p.insert(&format!("enc.block{b}.ln1.b"), Array2::zeros((1, d)));
            p.insert(&format!("enc.block{b}.ff.w1"), uniform_fan_in(d, config.ff_width, d, &mut rng));
            p.insert(&format!("enc.block{b}.ff.b1"), Array2::zeros((1, config.ff_width)));
            p.insert(
                &format!("enc.block{b}.ff.w2"),
                uniform_fan_in(config.ff_width, d, config.ff_width, &mut rng),
            );
            p.insert(&format!("enc.block{b}.ff.b2"), Array2::zeros((1, d)));
            p.insert(&format!("enc.block{b}.ln2.g"), Array2::ones((1, d)));
            p.insert(&format!("enc.block{b}.ln2.b"), Array2::zeros((1, d)));
        }

        p.insert("enc.fusion.w", uniform_fan_in(d, d, d, &mut rng));
        p.insert("enc.fusion.b", Array2::zeros((1, d)));
        p.insert("enc.fusion.u", uniform_fan_in(d, 1, d, &mut rng));

        if config.static_dim > 0 {
            let ds = config.static_embed_dim;
            p.insert("enc.static.w1", uniform_fan_in(config.static_dim, ds, config.static_dim, &mut rng));
            p.insert("enc.static.b1", Array2::zeros((1, ds)));
            p.insert("enc.static.w2", uniform_fan_in(ds, ds, ds, &mut rng));
            p.insert("enc.static.b2", Array2::zeros((1, ds)));
        }

        let fused = config.fused_dim();
        p.insert("fore.w", uniform_fan_in(fused, config.num_features, fused, &mut rng));
        p.insert("fore.b", Array2::zeros((1, config.num_features)));

        p.insert("recon.w1", uniform_fan_in(d, d, d, &mut rng));
        p.insert("recon.b1", Array2::zeros((1, d)));
        p.insert("recon.w2", uniform_fan_in(d, d, d, &mut rng));
        p.insert("recon.b2", Array2::zeros((1, d)));
        p.insert("recon.w3", uniform_fan_in(d, config.recon_out(), d, &mut rng));
        p.insert("recon.b3", Array2::zeros((1, config.recon_out())));

        let h = config.supervised_hidden;
        p.insert("sup.w1", uniform_fan_in(fused, h, fused, &mut rng));
        p.insert("sup.b1", Array2::zeros((1, h)));
        p.insert("sup.w2", uniform_fan_in(h, config.supervised_out(), h, &mut rng));
        p.insert("sup.b2", Array2::zeros((1, config.supervised_out())));

        Ok(Model { config, params: p })
    }

    /// Fresh supervised head on top of a (possibly pretrained) encoder.
    pub fn reinit_supervised(&mut self, seed: u64) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fused = self.config.fused_dim();
        let h = self.config.supervised_hidden;
        *self.params.get_mut("sup.w1").unwrap() = uniform_fan_in(fused, h, fused, &mut rng);
        *self.params.get_mut("sup.b1").unwrap() = Array2::zeros((1, h));
        *self.params.get_mut("sup.w2").unwrap() =
            uniform_fan_in(h, self.config.supervised_out(), h, &mut rng);
        *self.params.get_mut("sup.b2").unwrap() = Array2::zeros((1, self.config.supervised_out()));
    }

    /// Eval-mode fused embedding (series + statics) for one sample.
    pub fn encode_eval(&self, sample: &PaddedSample, statics: &[f64]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, &self.params);
        let fwd = build_forward(&mut tape, &leaves, &self.config, sample, statics, None)?;
        Ok(tape.value(fwd.fused).clone())
    }

    /// Eval-mode supervised logits for one sample.
    pub fn predict_logits(&self, sample: &PaddedSample, statics: &[f64]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, &self.params);
        let fwd = build_forward(&mut tape, &leaves, &self.config, sample, statics, None)?;
        let logits = supervised_head(&mut tape, &leaves, fwd.fused);
        Ok(tape.value(logits).clone())
    }

    /// Per-position triplet embeddings (sum of the two continuous value
    /// embeddings and the feature lookup), eval mode.
    pub fn embed_triplets(
        &self,
        times: &[f64],
        values: &[f64],
        features: &[usize],
    ) -> Result<Array2<f64>> {
        for &f in features {
            if f > self.config.num_features + 1 {
                return Err(PaitsError::data(format!(
                    "feature index {f} out of range [0, {}]",
                    self.config.num_features + 1
                )));
            }
        }
        let mut tape = Tape::new();
        let leaves = ParamLeaves::bind(&mut tape, &self.params);
        let emb = embed_triplets_node(&mut tape, &leaves, times, values, features);
        Ok(tape.value(emb).clone())
    }
}

/// Parameter leaves bound into one tape; per-sample graphs share them.
pub struct ParamLeaves {
    ids: Vec<(String, NodeId)>,
}

impl ParamLeaves {
    pub fn bind(tape: &mut Tape, params: &Params) -> ParamLeaves {
        let ids = params
            .iter()
            .map(|(n, v)| (n.to_string(), tape.leaf(v.clone())))
            .collect();
        ParamLeaves { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .1
    }

    /// Collect gradients for every bound parameter after a backward sweep.
    /// The frozen padding row of the feature table is zeroed.
    pub fn collect_grads(
        &self,
        grads: &[Option<Array2<f64>>],
        params: &Params,
    ) -> Result<GradMap> {
        let mut out = Vec::with_capacity(self.ids.len());
        for (name, id) in &self.ids {
            let mut g = match &grads[*id] {
                Some(g) => g.clone(),
                None => Array2::zeros(params.get(name).unwrap().raw_dim()),
            };
            if name == "enc.lut" {
                g.row_mut(0).fill(0.0);
            }
            out.push((name.clone(), g));
        }
        let map = GradMap { entries: out };
        map.check_finite()?;
        Ok(map)
    }
}

/// Node handles produced by one forward pass.
pub struct Forward {
    /// Contextual per-position embeddings after the transformer (seqlen x d).
    pub per_position: NodeId,
    /// Fused series + statics embedding (1 x fused_dim).
    pub fused: NodeId,
}

fn dense(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let m = tape.matmul(x, w);
    tape.add(m, b)
}

fn embed_triplets_node(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    times: &[f64],
    values: &[f64],
    features: &[usize],
) -> NodeId {
    let l = times.len();
    let t_col = tape.leaf(Array2::from_shape_fn((l, 1), |(i, _)| times[i]));
    let v_col = tape.leaf(Array2::from_shape_fn((l, 1), |(i, _)| values[i]));

    let cve = |tape: &mut Tape, x: NodeId, prefix: &str| {
        let h = dense(tape, x, leaves.id(&format!("{prefix}.w1")), leaves.id(&format!("{prefix}.b1")));
        let h = tape.tanh(h);
        let h = dense(tape, h, leaves.id(&format!("{prefix}.w2")), leaves.id(&format!("{prefix}.b2")));
        tape.tanh(h)
    };
    let te = cve(tape, t_col, "enc.cve_t");
    let ve = cve(tape, v_col, "enc.cve_v");
    let fe = tape.gather(leaves.id("enc.lut"), features.to_vec());
    let sum = tape.add(te, ve);
    tape.add(sum, fe)
}

fn dropout_node(
    tape: &mut Tape,
    x: NodeId,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    match rng {
        Some(rng) if p > 0.0 => {
            let shape = tape.value(x).raw_dim();
            let keep = 1.0 - p;
            let mask = Array2::from_shape_fn(shape, |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            let m = tape.leaf(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

/// Build the encoder graph for one padded sample. Passing a dropout RNG
/// selects train mode; `None` is eval mode.
pub fn build_forward(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    config: &EncoderConfig,
    sample: &PaddedSample,
    statics: &[f64],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward> {
    let l = sample.seqlen();
    if sample.real_len() == 0 {
        return Err(PaitsError::data("all-padding sample: nothing to encode"));
    }
    if statics.len() != config.static_dim {
        return Err(PaitsError::shape(format!(
            "static vector has {} dims, config says {}",
            statics.len(),
            config.static_dim
        )));
    }

    let mut x = embed_triplets_node(tape, leaves, &sample.times, &sample.values, &sample.features);

    // attention mask: key j visible iff it is a real observation
    let attn_mask_arr = Array2::from_shape_fn((l, l), |(_, j)| sample.pad[j]);
    let attn_mask = tape.leaf(attn_mask_arr);

    let dk = config.head_dim();
    let hdk = config.heads * dk;
    let scale = 1.0 / (dk as f64).sqrt();

    for b in 0..config.blocks {
        let q = dense(tape, x, leaves.id(&format!("enc.block{b}.wq")), leaves.id(&format!("enc.block{b}.bq")));
        let k = dense(tape, x, leaves.id(&format!("enc.block{b}.wk")), leaves.id(&format!("enc.block{b}.bk")));
        let v = dense(tape, x, leaves.id(&format!("enc.block{b}.wv")), leaves.id(&format!("enc.block{b}.bv")));

        let mut concat: Option<NodeId> = None;
        for h in 0..config.heads {
            let (s0, s1) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, s0, s1);
            let kh = tape.slice_cols(k, s0, s1);
            let vh = tape.slice_cols(v, s0, s1);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, scale);
            let attn = tape.row_softmax(scaled, Some(attn_mask));
            let ctx = tape.matmul(attn, vh);
            concat = Some(match concat {
                None => ctx,
                Some(c) => tape.concat_cols(c, ctx),
            });
        }
        let heads_out = concat.expect("at least one head");
        debug_assert_eq!(tape.value(heads_out).ncols(), hdk);
        let proj = dense(tape, heads_out, leaves.id(&format!("enc.block{b}.wo")), leaves.id(&format!("enc.block{b}.bo")));
        let proj = dropout_node(tape, proj, config.dropout, &mut dropout_rng);
        let res = tape.add(x, proj);
        let ln = tape.layer_norm(res);
        let ln = tape.mul(ln, leaves.id(&format!("enc.block{b}.ln1.g")));
        let ln = tape.add(ln, leaves.id(&format!("enc.block{b}.ln1.b")));

        let ff = dense(tape, ln, leaves.id(&format!("enc.block{b}.ff.w1")), leaves.id(&format!("enc.block{b}.ff.b1")));
        let ff = tape.relu(ff);
        let ff = dense(tape, ff, leaves.id(&format!("enc.block{b}.ff.w2")), leaves.id(&format!("enc.block{b}.ff.b2")));
        let ff = dropout_node(tape, ff, config.dropout, &mut dropout_rng);
        let res2 = tape.add(ln, ff);
        let ln2 = tape.layer_norm(res2);
        let ln2 = tape.mul(ln2, leaves.id(&format!("enc.block{b}.ln2.g")));
        x = tape.add(ln2, leaves.id(&format!("enc.block{b}.ln2.b")));
    }

    // fusion self-attention: softmax over non-padding positions
    let fh = dense(tape, x, leaves.id("enc.fusion.w"), leaves.id("enc.fusion.b"));
    let fh = tape.tanh(fh);
    let scores = tape.matmul(fh, leaves.id("enc.fusion.u"));
    let scores_row = tape.transpose(scores);
    let pad_row = tape.leaf(Array2::from_shape_fn((1, l), |(_, j)| sample.pad[j]));
    let weights = tape.row_softmax(scores_row, Some(pad_row));
    let series_emb = tape.matmul(weights, x);

    let fused = if config.static_dim > 0 {
        let s_row = tape.leaf(Array2::from_shape_fn((1, statics.len()), |(_, j)| statics[j]));
        let se = dense(tape, s_row, leaves.id("enc.static.w1"), leaves.id("enc.static.b1"));
        let se = tape.tanh(se);
        let se = dense(tape, se, leaves.id("enc.static.w2"), leaves.id("enc.static.b2"));
        tape.concat_cols(series_emb, se)
    } else {
        series_emb
    };

    Ok(Forward { per_position: x, fused })
}

/// Single dense layer mapping the fused embedding to V forecast outputs.
pub fn forecast_head(tape: &mut Tape, leaves: &ParamLeaves, fused: NodeId) -> NodeId {
    dense(tape, fused, leaves.id("fore.w"), leaves.id("fore.b"))
}

/// Three position-wise dense layers producing one prediction per position
/// (or V article logits per position in retail identity mode).
pub fn reconstruct_head(tape: &mut Tape, leaves: &ParamLeaves, per_position: NodeId) -> NodeId {
    let h = dense(tape, per_position, leaves.id("recon.w1"), leaves.id("recon.b1"));
    let h = tape.relu(h);
    let h = dense(tape, h, leaves.id("recon.w2"), leaves.id("recon.b2"));
    let h = tape.relu(h);
    dense(tape, h, leaves.id("recon.w3"), leaves.id("recon.b3"))
}

/// Two dense layers for the supervised task.
pub fn supervised_head(tape: &mut Tape, leaves: &ParamLeaves, fused: NodeId) -> NodeId {
    let h = dense(tape, fused, leaves.id("sup.w1"), leaves.id("sup.b1"));
    let h = tape.relu(h);
    dense(tape, h, leaves.id("sup.w2"), leaves.id("sup.b2"))
}

const CKPT_MAGIC: &[u8; 10] = b"PAITSCKPT1";

/// Checkpoint metadata stored next to the parameter blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub seed: u64,
    pub stage: String,
    pub strategy: Option<serde_json::Value>,
}

/// Write a checkpoint: magic, metadata JSON, then the parameter blob
/// (name, shape, row-major f64 little-endian per parameter).
pub fn save_checkpoint<W: Write>(model: &Model, meta: &CheckpointMeta, w: &mut W) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, value) in model.params.iter() {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(value.nrows() as u32).to_le_bytes())?;
        w.write_all(&(value.ncols() as u32).to_le_bytes())?;
        for &x in value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<(Model, CheckpointMeta)> {
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(PaitsError::data("not a checkpoint file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let meta_len = u32::from_le_bytes(b4) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;

    r.read_exact(&mut b4)?;
    let n_params = u32::from_le_bytes(b4) as usize;
    let mut params = Params::new();
    for _ in 0..n_params {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| PaitsError::data("invalid parameter name in checkpoint"))?;
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut b8 = [0u8; 8];
        for x in &mut data {
            r.read_exact(&mut b8)?;
            *x = f64::from_le_bytes(b8);
        }
        let value = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| PaitsError::data(format!("bad checkpoint shape: {e}")))?;
        params.insert(&name, value);
    }
    Ok((Model { config: meta.config.clone(), params }, meta))
}

pub fn save_checkpoint_file(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    save_checkpoint(model, meta, &mut f)
}

pub fn load_checkpoint_file(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    load_checkpoint(&mut f)
}
