//! Dataset exchange and persistence: triplet/statics/labels CSV,
//! entity-level train/val/test splits, the discretized sparsity report,
//! JSON experiment configs, and append-only run directories.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{derive_rng, Label, ObservationTriplet, TripletSeries, WindowingConfig};
use crate::synth::SynthDataset;
use crate::train::TrainConfig;
use crate::{PaitsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    Healthcare,
    Retail,
}

/// One entity after ingestion: raw series, statics, and label.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub id: String,
    pub series: TripletSeries,
    pub statics: Vec<f64>,
    pub label: Label,
}

/// Ingested dataset with entity-level splits and the feature vocabulary
/// built from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    /// Number of real feature indices, including the reserved unknown
    /// bucket when val/test contained unseen features.
    pub num_features: usize,
    pub feature_vocab: Vec<String>,
    pub unknown_bucket: bool,
    pub train: Vec<EntityRecord>,
    pub val: Vec<EntityRecord>,
    pub test: Vec<EntityRecord>,
}

fn parse_err(path: &Path, line: u64, msg: impl std::fmt::Display) -> PaitsError {
    let line = line as usize;
    PaitsError::Parse { line, msg: format!("{}: {msg}", path.display()) }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path)
        .map_err(|e| PaitsError::data(format!("cannot open {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_f64(path: &Path, record: &csv::StringRecord, idx: usize, what: &str) -> Result<f64> {
    let raw = record
        .get(idx)
        .ok_or_else(|| parse_err(path, record_line(record), format!("missing {what} column")))?;
    let v: f64 = raw
        .trim()
        .parse()
        .map_err(|_| parse_err(path, record_line(record), format!("bad {what} value {raw:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, record_line(record), format!("non-finite {what} {raw:?}")));
    }
    Ok(v)
}

/// Raw triplet rows grouped by entity: `sample_id,time,feature_id,value`.
type TripletRows = BTreeMap<String, Vec<(f64, String, f64)>>;

fn read_triplets(path: &Path) -> Result<TripletRows> {
    let mut reader = open_csv(path)?;
    let mut out: TripletRows = BTreeMap::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| PaitsError::data(format!("{}: {e}", path.display())))?;
        let id = record
            .get(0)
            .ok_or_else(|| parse_err(path, record_line(&record), "missing sample_id"))?
            .trim()
            .to_string();
        let t = parse_f64(path, &record, 1, "time")?;
        let f = record
            .get(2)
            .ok_or_else(|| parse_err(path, record_line(&record), "missing feature_id"))?
            .trim()
            .to_string();
        let v = parse_f64(path, &record, 3, "value")?;
        out.entry(id).or_default().push((t, f, v));
        rows += 1;
    }
    if rows == 0 {
        return Err(PaitsError::data(format!("{}: no triplet rows", path.display())));
    }
    Ok(out)
}

fn read_statics(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut reader = open_csv(path)?;
    let width = reader
        .headers()
        .map_err(|e| PaitsError::data(format!("{}: {e}", path.display())))?
        .len();
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| PaitsError::data(format!("{}: {e}", path.display())))?;
        if record.len() != width {
            return Err(parse_err(path, record_line(&record), "ragged statics row"));
        }
        let id = record.get(0).unwrap().trim().to_string();
        let values: Vec<f64> = (1..record.len())
            .map(|i| parse_f64(path, &record, i, "static"))
            .collect::<Result<_>>()?;
        out.insert(id, values);
    }
    Ok(out)
}

fn read_labels(path: &Path, mode: DatasetMode, num_articles: usize) -> Result<BTreeMap<String, Label>> {
    let mut reader = open_csv(path)?;
    match mode {
        DatasetMode::Healthcare => {
            let mut out = BTreeMap::new();
            for record in reader.records() {
                let record =
                    record.map_err(|e| PaitsError::data(format!("{}: {e}", path.display())))?;
                let id = record
                    .get(0)
                    .ok_or_else(|| parse_err(path, record_line(&record), "missing sample_id"))?
                    .trim()
                    .to_string();
                let raw = record
                    .get(1)
                    .ok_or_else(|| parse_err(path, record_line(&record), "missing label"))?
                    .trim();
                let y: u8 = raw.parse().map_err(|_| {
                    parse_err(path, record_line(&record), format!("bad label {raw:?}"))
                })?;
                if y > 1 {
                    return Err(parse_err(path, record_line(&record), format!("label {y} not 0/1")));
                }
                out.insert(id, Label::Binary(y));
            }
            Ok(out)
        }
        DatasetMode::Retail => {
            // one row per purchased article; multi-hot over the article ids
            let mut rows: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for record in reader.records() {
                let record =
                    record.map_err(|e| PaitsError::data(format!("{}: {e}", path.display())))?;
                let id = record.get(0).unwrap_or("").trim().to_string();
                let raw = record
                    .get(1)
                    .ok_or_else(|| parse_err(path, record_line(&record), "missing article_id"))?
                    .trim();
                let article: usize = raw.parse().map_err(|_| {
                    parse_err(path, record_line(&record), format!("bad article id {raw:?}"))
                })?;
                if article == 0 || article > num_articles {
                    return Err(parse_err(
                        path,
                        record_line(&record),
                        format!("article id {article} outside [1, {num_articles}]"),
                    ));
                }
                rows.entry(id).or_default().push(article);
            }
            Ok(rows
                .into_iter()
                .map(|(id, articles)| {
                    let mut v = vec![0u8; num_articles];
                    for a in articles {
                        v[a - 1] = 1;
                    }
                    (id, Label::Multi(v))
                })
                .collect())
        }
    }
}

/// Assign entities to train/val/test at 65/15/20 by ranking a seeded hash
/// of the entity id; fractions land within one entity of the targets.
pub fn split_entities(ids: &[String], seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    fn hash_id(id: &str, seed: u64) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x1000_0000_01b3);
        for b in id.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (hash_id(&ids[i], seed), ids[i].clone()));
    let n = ids.len();
    let n_train = (n as f64 * 0.65).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let train = order[..n_train].to_vec();
    let val = order[n_train..(n_train + n_val).min(n)].to_vec();
    let test = order[(n_train + n_val).min(n)..].to_vec();
    (train, val, test)
}

/// Sorting key for the feature vocabulary: numeric ids in numeric order,
/// everything else lexicographic after them.
fn vocab_key(s: &str) -> (u8, u64, String) {
    match s.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, s.to_string()),
    }
}

/// Load the CSV trio, validate, and split 65/15/20 by entity. The feature
/// vocabulary comes from the training split; unseen features in val/test
/// go to a reserved unknown bucket with a warning on stderr.
pub fn ingest_csv(
    triplets: &Path,
    statics: &Path,
    labels: &Path,
    mode: DatasetMode,
    num_articles: usize,
    split_seed: u64,
) -> Result<SplitDataset> {
    let triplet_rows = read_triplets(triplets)?;
    let static_rows = read_statics(statics)?;
    let label_rows = read_labels(labels, mode, num_articles)?;

    let ids: Vec<String> = label_rows.keys().cloned().collect();
    if ids.is_empty() {
        return Err(PaitsError::data("no labeled entities"));
    }
    for id in &ids {
        if !static_rows.contains_key(id) {
            return Err(PaitsError::data(format!("entity {id} has a label but no statics row")));
        }
    }
    let (train_idx, val_idx, test_idx) = split_entities(&ids, split_seed);

    // vocabulary from the training split only
    let mut vocab: Vec<String> = train_idx
        .iter()
        .flat_map(|&i| triplet_rows.get(&ids[i]).into_iter().flatten())
        .map(|(_, f, _)| f.clone())
        .collect();
    vocab.sort_by_key(|s| vocab_key(s));
    vocab.dedup();
    if vocab.is_empty() {
        return Err(PaitsError::data("training split has no observations"));
    }

    let unknown_in_eval = val_idx
        .iter()
        .chain(&test_idx)
        .flat_map(|&i| triplet_rows.get(&ids[i]).into_iter().flatten())
        .any(|(_, f, _)| vocab.binary_search_by_key(&vocab_key(f), |s| vocab_key(s)).is_err());
    let unknown_bucket = unknown_in_eval;
    if unknown_bucket {
        eprintln!("warning: unseen feature ids in val/test mapped to the reserved unknown bucket");
    }
    let num_features = vocab.len() + usize::from(unknown_bucket);

    let build = |idx: &[usize]| -> Result<Vec<EntityRecord>> {
        idx.iter()
            .map(|&i| {
                let id = &ids[i];
                let obs = triplet_rows
                    .get(id)
                    .map(|rows| {
                        rows.iter()
                            .map(|(t, f, v)| {
                                let fi = match vocab
                                    .binary_search_by_key(&vocab_key(f), |s| vocab_key(s))
                                {
                                    Ok(k) => k + 1,
                                    Err(_) => vocab.len() + 1, // unknown bucket
                                };
                                ObservationTriplet { t: *t, v: *v, f: fi }
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                Ok(EntityRecord {
                    id: id.clone(),
                    series: TripletSeries::new(obs),
                    statics: static_rows[id].clone(),
                    label: label_rows[id].clone(),
                })
            })
            .collect()
    };

    let train = build(&train_idx)?;
    let val = build(&val_idx)?;
    let test = build(&test_idx)?;
    Ok(SplitDataset { num_features, feature_vocab: vocab, unknown_bucket, train, val, test })
}

/// Write a synthetic dataset as the CSV trio (`triplets.csv`,
/// `statics.csv`, `labels.csv`) under `dir`.
pub fn export_csv(data: &SynthDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut triplets = fs::File::create(dir.join("triplets.csv"))?;
    writeln!(triplets, "sample_id,time,feature_id,value")?;
    for (e, series) in data.series.iter().enumerate() {
        for o in &series.obs {
            writeln!(triplets, "e{e},{},{},{}", o.t, o.f, o.v)?;
        }
    }
    let mut statics = fs::File::create(dir.join("statics.csv"))?;
    let d = data.statics.first().map_or(0, Vec::len);
    let header: Vec<String> = (1..=d).map(|i| format!("s{i}")).collect();
    writeln!(statics, "sample_id,{}", header.join(","))?;
    for (e, row) in data.statics.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(statics, "e{e},{}", cells.join(","))?;
    }
    let mut labels = fs::File::create(dir.join("labels.csv"))?;
    writeln!(labels, "sample_id,label")?;
    for (e, y) in data.labels.iter().enumerate() {
        writeln!(labels, "e{e},{y}")?;
    }
    Ok(())
}

/// Discretized sparsity: fraction of (entity, feature, interval) cells
/// without an observation, plus 1st/50th/99th percentiles of per-series
/// observation counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityReport {
    pub sparsity: f64,
    pub count_p1: usize,
    pub count_p50: usize,
    pub count_p99: usize,
}

pub fn sparsity_report(
    series: &[TripletSeries],
    num_features: usize,
    interval_width: f64,
) -> Result<SparsityReport> {
    if interval_width <= 0.0 {
        return Err(PaitsError::config("interval width must be positive"));
    }
    let mut total_cells = 0usize;
    let mut filled = 0usize;
    for s in series {
        if s.is_empty() {
            continue;
        }
        let t0 = s.obs.first().unwrap().t;
        let t1 = s.obs.last().unwrap().t;
        let intervals = (((t1 - t0) / interval_width).floor() as usize) + 1;
        total_cells += intervals * num_features;
        let mut seen = std::collections::BTreeSet::new();
        for o in &s.obs {
            let bucket = ((o.t - t0) / interval_width).floor() as usize;
            seen.insert((o.f, bucket));
        }
        filled += seen.len();
    }
    let sparsity = if total_cells == 0 {
        0.0
    } else {
        1.0 - filled as f64 / total_cells as f64
    };

    let mut counts: Vec<usize> = series.iter().map(TripletSeries::len).collect();
    counts.sort_unstable();
    let pct = |p: f64| -> usize {
        if counts.is_empty() {
            return 0;
        }
        let rank = ((p / 100.0) * counts.len() as f64).ceil() as usize;
        counts[rank.clamp(1, counts.len()) - 1]
    };
    Ok(SparsityReport {
        sparsity,
        count_p1: pct(1.0),
        count_p50: pct(50.0),
        count_p99: pct(99.0),
    })
}

fn default_interval_width() -> f64 {
    1.0
}
fn default_mean_run() -> f64 {
    3.0
}
fn default_pool_size() -> usize {
    10_000
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_budget() -> usize {
    8
}
fn default_split_seed() -> u64 {
    17
}
fn default_windowing() -> WindowingConfig {
    WindowingConfig { observation_len: 48.0, forecast_len: 2.0, stride: 4.0, start: 0.0 }
}
fn default_mode() -> DatasetMode {
    DatasetMode::Healthcare
}

/// Architecture knobs exposed in the experiment config; dataset-derived
/// dimensions (seqlen, V, D) are filled in at runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderKnobs {
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ff_width: usize,
    pub static_embed_dim: usize,
    pub supervised_hidden: usize,
}

impl Default for EncoderKnobs {
    fn default() -> Self {
        EncoderKnobs {
            embed_dim: 50,
            blocks: 2,
            heads: 4,
            dropout: 0.2,
            ff_width: 100,
            static_embed_dim: 50,
            supervised_hidden: 50,
        }
    }
}

/// One experiment definition, read from a JSON file with every field
/// optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: DatasetMode,
    pub windowing: WindowingConfig,
    /// Fixed-length cap; `None` uses the 99th percentile of training
    /// series lengths.
    pub seqlen: Option<usize>,
    pub encoder: EncoderKnobs,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub search_budget: usize,
    pub seeds: Vec<u64>,
    pub split_seed: u64,
    /// Geometric-bucketing interval width in raw time units.
    pub interval_width: f64,
    pub mean_run: f64,
    pub pool_size: usize,
    pub data_dir: String,
    pub runs_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: default_mode(),
            windowing: default_windowing(),
            seqlen: None,
            encoder: EncoderKnobs::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
            search_budget: default_budget(),
            seeds: default_seeds(),
            split_seed: default_split_seed(),
            interval_width: default_interval_width(),
            mean_run: default_mean_run(),
            pool_size: default_pool_size(),
            data_dir: "data".into(),
            runs_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| PaitsError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.windowing.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.seeds.is_empty() {
            return Err(PaitsError::config("at least one seed required"));
        }
        if self.search_budget == 0 {
            return Err(PaitsError::config("search budget must be >= 1"));
        }
        if self.interval_width <= 0.0 || self.mean_run < 1.0 || self.pool_size == 0 {
            return Err(PaitsError::config("bad augmentation defaults"));
        }
        if let Some(s) = self.seqlen {
            if s == 0 {
                return Err(PaitsError::config("seqlen must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Create an append-only run directory; an existing run id is an error,
/// never an overwrite.
pub fn create_run_dir(root: &Path, run_id: &str) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let dir = root.join(run_id);
    match fs::create_dir(&dir) {
        Ok(()) => Ok(dir),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PaitsError::config(
            format!("run id {run_id} already exists under {}", root.display()),
        )),
        Err(e) => Err(e.into()),
    }
}

/// Persist one JSON document, failing rather than overwriting.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if path.exists() {
        return Err(PaitsError::config(format!("{} already exists", path.display())));
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

/// Deterministic fraction split of already-ingested entities, used when a
/// dataset arrives without predefined splits.
pub fn shuffle_split<T: Clone>(items: &[T], fractions: (f64, f64), seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    let mut rng = derive_rng(seed, 0);
    idx.shuffle(&mut rng);
    let n = items.len();
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_val = (n as f64 * fractions.1).round() as usize;
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    (
        pick(&idx[..n_train.min(n)]),
        pick(&idx[n_train.min(n)..(n_train + n_val).min(n)]),
        pick(&idx[(n_train + n_val).min(n)..]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthConfig};
    use tempfile::tempdir;

    #[test]
    fn synthetic_round_trips_through_csv() {
        let cfg = SynthConfig { entities: 40, num_features: 4, ..SynthConfig::default() };
        let data = generate_synthetic(&cfg).unwrap();
        let dir = tempdir().unwrap();
        export_csv(&data, dir.path()).unwrap();

        let split = ingest_csv(
            &dir.path().join("triplets.csv"),
            &dir.path().join("statics.csv"),
            &dir.path().join("labels.csv"),
            DatasetMode::Healthcare,
            0,
            17,
        )
        .unwrap();
        assert_eq!(split.num_features, 4);
        assert!(!split.unknown_bucket);

        let n = split.train.len() + split.val.len() + split.test.len();
        assert_eq!(n, 40);
        assert!((split.train.len() as i64 - 26).abs() <= 1);
        assert!((split.val.len() as i64 - 6).abs() <= 1);

        // every entity round-trips exactly
        for rec in split.train.iter().chain(&split.val).chain(&split.test) {
            let e: usize = rec.id[1..].parse().unwrap();
            assert_eq!(rec.series, data.series[e], "series mismatch for {}", rec.id);
            assert_eq!(rec.statics, data.statics[e]);
            assert_eq!(rec.label, Label::Binary(data.labels[e]));
        }
    }

    #[test]
    fn ingest_rejects_malformed_rows_with_line_numbers() {
        let dir = tempdir().unwrap();
        fs::write(
            dir.path().join("triplets.csv"),
            "sample_id,time,feature_id,value\ne0,0.5,1,1.0\ne0,abc,1,2.0\n",
        )
        .unwrap();
        fs::write(dir.path().join("statics.csv"), "sample_id,s1\ne0,0.0\n").unwrap();
        fs::write(dir.path().join("labels.csv"), "sample_id,label\ne0,1\n").unwrap();
        let err = ingest_csv(
            &dir.path().join("triplets.csv"),
            &dir.path().join("statics.csv"),
            &dir.path().join("labels.csv"),
            DatasetMode::Healthcare,
            0,
            17,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "missing line number: {msg}");
    }

    #[test]
    fn ingest_rejects_empty_triplet_file() {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("triplets.csv"), "sample_id,time,feature_id,value\n").unwrap();
        fs::write(dir.path().join("statics.csv"), "sample_id,s1\ne0,0.0\n").unwrap();
        fs::write(dir.path().join("labels.csv"), "sample_id,label\ne0,1\n").unwrap();
        assert!(ingest_csv(
            &dir.path().join("triplets.csv"),
            &dir.path().join("statics.csv"),
            &dir.path().join("labels.csv"),
            DatasetMode::Healthcare,
            0,
            17,
        )
        .is_err());
    }

    #[test]
    fn split_is_deterministic_and_pure_in_the_seed() {
        let ids: Vec<String> = (0..100).map(|i| format!("id{i}")).collect();
        let a = split_entities(&ids, 5);
        let b = split_entities(&ids, 5);
        assert_eq!(a, b);
        assert_ne!(a, split_entities(&ids, 6));
        assert_eq!(a.0.len() + a.1.len() + a.2.len(), 100);
        assert_eq!(a.0.len(), 65);
        assert_eq!(a.1.len(), 15);
    }

    #[test]
    fn sparsity_hand_cases() {
        // fully observed grid: one feature, observations in every interval
        let dense = TripletSeries::new(
            (0..10).map(|i| ObservationTriplet { t: i as f64, v: 0.0, f: 1 }).collect(),
        );
        let r = sparsity_report(&[dense], 1, 1.0).unwrap();
        assert_eq!(r.sparsity, 0.0);

        // a single observation spanning 10 intervals -> only itself filled
        let sparse = TripletSeries::new(vec![
            ObservationTriplet { t: 0.0, v: 0.0, f: 1 },
            ObservationTriplet { t: 9.5, v: 0.0, f: 1 },
        ]);
        let r = sparsity_report(&[sparse], 1, 1.0).unwrap();
        assert!((r.sparsity - 0.8).abs() < 1e-12);

        // percentiles match a direct sort
        let series: Vec<TripletSeries> = (1..=100)
            .map(|n| {
                TripletSeries::new(
                    (0..n).map(|i| ObservationTriplet { t: i as f64, v: 0.0, f: 1 }).collect(),
                )
            })
            .collect();
        let r = sparsity_report(&series, 1, 1.0).unwrap();
        assert_eq!(r.count_p1, 1);
        assert_eq!(r.count_p50, 50);
        assert_eq!(r.count_p99, 99);
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        // sparse configs take defaults
        let sparse: ExperimentConfig = serde_json::from_str(r#"{"search_budget": 3}"#).unwrap();
        assert_eq!(sparse.search_budget, 3);
        assert_eq!(sparse.encoder.embed_dim, 50);
        sparse.validate().unwrap();

        let bad: ExperimentConfig = serde_json::from_str(r#"{"search_budget": 0}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn run_dirs_are_append_only() {
        let dir = tempdir().unwrap();
        let run = create_run_dir(dir.path(), "run-1").unwrap();
        assert!(run.is_dir());
        assert!(create_run_dir(dir.path(), "run-1").is_err());

        let record = serde_json::json!({"a": 1});
        let path = run.join("record.json");
        write_json(&path, &record).unwrap();
        assert!(write_json(&path, &record).is_err());

        append_jsonl(&run.join("summary.jsonl"), &record).unwrap();
        append_jsonl(&run.join("summary.jsonl"), &record).unwrap();
        let text = fs::read_to_string(run.join("summary.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn unknown_eval_features_map_to_the_reserved_bucket() {
        let dir = tempdir().unwrap();
        // many entities so the split puts someone in val/test deterministically
        let mut triplets = String::from("sample_id,time,feature_id,value\n");
        let mut statics = String::from("sample_id,s1\n");
        let mut labels = String::from("sample_id,label\n");
        for i in 0..20 {
            triplets.push_str(&format!("e{i},0.5,1,1.0\n"));
            statics.push_str(&format!("e{i},0.0\n"));
            labels.push_str(&format!("e{i},{}\n", i % 2));
        }
        fs::write(dir.path().join("triplets.csv"), &triplets).unwrap();
        fs::write(dir.path().join("statics.csv"), &statics).unwrap();
        fs::write(dir.path().join("labels.csv"), &labels).unwrap();
        let base = ingest_csv(
            &dir.path().join("triplets.csv"),
            &dir.path().join("statics.csv"),
            &dir.path().join("labels.csv"),
            DatasetMode::Healthcare,
            0,
            17,
        )
        .unwrap();
        let eval_id = base.test.first().map(|r| r.id.clone()).unwrap();

        // give that eval entity an unseen feature id
        triplets.push_str(&format!("{eval_id},0.7,999,2.0\n"));
        fs::write(dir.path().join("triplets.csv"), &triplets).unwrap();
        let split = ingest_csv(
            &dir.path().join("triplets.csv"),
            &dir.path().join("statics.csv"),
            &dir.path().join("labels.csv"),
            DatasetMode::Healthcare,
            0,
            17,
        )
        .unwrap();
        assert!(split.unknown_bucket);
        assert_eq!(split.num_features, 2);
        let rec = split.test.iter().find(|r| r.id == eval_id).unwrap();
        assert!(rec.series.obs.iter().any(|o| o.f == 2));
    }

    #[test]
    fn retail_labels_are_multi_hot() {
        let dir = tempdir().unwrap();
        fs::write(
            dir.path().join("labels.csv"),
            "sample_id,article_id\ne0,2\ne0,3\ne1,1\n",
        )
        .unwrap();
        let labels = read_labels(&dir.path().join("labels.csv"), DatasetMode::Retail, 3).unwrap();
        assert_eq!(labels["e0"], Label::Multi(vec![0, 1, 1]));
        assert_eq!(labels["e1"], Label::Multi(vec![1, 0, 0]));
    }
}
