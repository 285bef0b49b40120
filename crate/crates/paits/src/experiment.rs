//! End-to-end experiment pipeline: dataset preparation (normalization,
//! windowing, sequence-length capping), per-strategy evaluation
//! (pretrain then finetune), the persisted random search, label-fraction
//! finetuning, and test-set metric reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    build_pretrain_windows, fit_normalization, percentile_seqlen, subsample_labels, derive_rng,
    Label, LabeledSample, NormalizationStats, PretrainWindow,
};
use crate::io::{append_jsonl, write_json, DatasetMode, EntityRecord, ExperimentConfig, SplitDataset};
use crate::loss::TaskMode;
use crate::metrics::{aggregate, auprc, auroc, map_at_k};
use crate::model::{save_checkpoint_file, CheckpointMeta, EncoderConfig, Model};
use crate::train::{
    finetune, pretrain, run_search, sample_strategies, score_samples, AugContext,
    PretextObjective, RunRecord, SearchOutcome, Strategy, TrainConfig,
};
use crate::{PaitsError, Result};

/// Everything needed to train and evaluate on one ingested dataset:
/// normalized pretraining windows, normalized labeled splits, the resolved
/// encoder configuration, and the augmentation context.
pub struct Pipeline {
    pub mode: DatasetMode,
    pub encoder: EncoderConfig,
    pub aug: AugContext,
    pub pretrain_cfg: TrainConfig,
    pub finetune_cfg: TrainConfig,
    pub stats: NormalizationStats,
    pub pre_train: Vec<PretrainWindow>,
    pub pre_val: Vec<PretrainWindow>,
    pub ft_train: Vec<LabeledSample>,
    pub ft_val: Vec<LabeledSample>,
    pub ft_test: Vec<LabeledSample>,
}

fn normalize_window(w: &PretrainWindow, stats: &NormalizationStats) -> PretrainWindow {
    let mut target = w.forecast_target.clone();
    for (f, t) in target.iter_mut().enumerate() {
        if w.forecast_mask[f] == 1.0 {
            *t = (*t - stats.value_mean[f]) / stats.value_std[f];
        }
    }
    PretrainWindow {
        statics: stats.normalize_statics(&w.statics),
        input: stats.normalize_series(&w.input),
        window_start: stats.normalize_time(w.window_start),
        forecast_target: target,
        forecast_mask: w.forecast_mask.clone(),
    }
}

fn windows_for(
    records: &[EntityRecord],
    cfg: &ExperimentConfig,
    num_features: usize,
    stats: &NormalizationStats,
) -> Result<Vec<PretrainWindow>> {
    let mut out = Vec::new();
    for r in records {
        for w in build_pretrain_windows(&r.series, &r.statics, &cfg.windowing, num_features)? {
            out.push(normalize_window(&w, stats));
        }
    }
    Ok(out)
}

fn labeled_for(records: &[EntityRecord], stats: &NormalizationStats) -> Vec<LabeledSample> {
    records
        .iter()
        .filter(|r| !r.series.is_empty())
        .map(|r| LabeledSample {
            statics: stats.normalize_statics(&r.statics),
            series: stats.normalize_series(&r.series),
            label: r.label.clone(),
        })
        .collect()
}

impl Pipeline {
    pub fn from_split(split: &SplitDataset, cfg: &ExperimentConfig) -> Result<Pipeline> {
        cfg.validate()?;
        let v = split.num_features;
        if split.train.is_empty() {
            return Err(PaitsError::data("empty training split"));
        }
        let static_dim = split.train[0].statics.len();

        let train_series: Vec<_> = split.train.iter().map(|r| r.series.clone()).collect();
        let train_statics: Vec<_> = split.train.iter().map(|r| r.statics.clone()).collect();
        let stats = fit_normalization(&train_series, &train_statics, v)?;

        let pre_train = windows_for(&split.train, cfg, v, &stats)?;
        let pre_val = windows_for(&split.val, cfg, v, &stats)?;
        if pre_train.is_empty() || pre_val.is_empty() {
            return Err(PaitsError::data("no pretraining windows in train or val split"));
        }

        let ft_train = labeled_for(&split.train, &stats);
        let ft_val = labeled_for(&split.val, &stats);
        let ft_test = labeled_for(&split.test, &stats);
        if ft_train.is_empty() || ft_val.is_empty() || ft_test.is_empty() {
            return Err(PaitsError::data("a labeled split is empty after dropping empty series"));
        }

        let seqlen = match cfg.seqlen {
            Some(s) => s,
            None => {
                let lens: Vec<_> = ft_train.iter().map(|s| s.series.clone()).collect();
                percentile_seqlen(&lens, 99.0)
            }
        };

        let mut encoder = EncoderConfig::with_dims(seqlen, v, static_dim);
        encoder.embed_dim = cfg.encoder.embed_dim;
        encoder.blocks = cfg.encoder.blocks;
        encoder.heads = cfg.encoder.heads;
        encoder.dropout = cfg.encoder.dropout;
        encoder.ff_width = cfg.encoder.ff_width;
        encoder.static_embed_dim = cfg.encoder.static_embed_dim;
        encoder.supervised_hidden = cfg.encoder.supervised_hidden;
        if cfg.mode == DatasetMode::Retail {
            encoder.task_mode = TaskMode::Multilabel;
            encoder.recon_articles = true;
        }
        encoder.validate()?;

        let aug = AugContext {
            mask_token: encoder.mask_token(),
            interval_width: stats.normalize_duration(cfg.interval_width),
            mean_run: cfg.mean_run,
            window_start: stats.normalize_time(cfg.windowing.start),
            window_len: stats.normalize_duration(cfg.windowing.observation_len),
            pool_size: cfg.pool_size,
        };

        Ok(Pipeline {
            mode: cfg.mode,
            encoder,
            aug,
            pretrain_cfg: cfg.pretrain.clone(),
            finetune_cfg: cfg.finetune.clone(),
            stats,
            pre_train,
            pre_val,
            ft_train,
            ft_val,
            ft_test,
        })
    }

    /// Pretrain with the strategy, then finetune on the full labeled
    /// training split. The returned model is the finetuned one; a
    /// checkpoint of the pretrained encoder is saved when a path is given.
    pub fn evaluate_strategy(
        &self,
        index: usize,
        strategy: &Strategy,
        objective: PretextObjective,
        seed: u64,
        ckpt_path: Option<&Path>,
    ) -> Result<(RunRecord, Model)> {
        let start = Instant::now();
        let mut model = Model::init(self.encoder.clone(), seed)?;
        let pre_cfg = TrainConfig { seed, ..self.pretrain_cfg.clone() };
        let pre_history = pretrain(
            &mut model,
            &self.pre_train,
            &self.pre_val,
            strategy,
            objective,
            &self.aug,
            &pre_cfg,
        )?;
        let checkpoint = match ckpt_path {
            Some(path) => {
                let meta = CheckpointMeta {
                    config: self.encoder.clone(),
                    seed,
                    stage: "pretrained".into(),
                    strategy: Some(serde_json::to_value(strategy)?),
                };
                save_checkpoint_file(&model, &meta, path)?;
                Some(path.display().to_string())
            }
            None => None,
        };

        let ft_cfg = TrainConfig { seed, ..self.finetune_cfg.clone() };
        let (best_loss, ft_history) = finetune(
            &mut model,
            &self.ft_train,
            &self.ft_val,
            Some((strategy, &self.aug)),
            &ft_cfg,
        )?;

        Ok((
            RunRecord {
                index,
                strategy: *strategy,
                seed,
                val_loss: Some(best_loss),
                pretrain_skipped: pre_history.skipped,
                pretrain_history: pre_history.val,
                finetune_history: ft_history.val,
                checkpoint,
                wall_clock_secs: start.elapsed().as_secs_f64(),
                error: None,
            },
            model,
        ))
    }

    /// Algorithm 1 over a sampled strategy subset. With a run directory,
    /// each run is persisted as `run-NNN.json` plus a pretrained
    /// checkpoint, and one deterministic line per strategy is appended to
    /// `summary.jsonl` (wall clock excluded so reruns are byte-identical).
    pub fn search(&self, budget: usize, seed: u64, run_dir: Option<&Path>) -> Result<SearchOutcome> {
        let strategies = sample_strategies(budget, seed)?;
        run_search(&strategies, |i, s| {
            let ckpt = run_dir.map(|d| d.join(format!("run-{i:03}.ckpt")));
            let record = match self.evaluate_strategy(i, s, PretextObjective::Joint, seed, ckpt.as_deref())
            {
                Ok((record, _)) => record,
                Err(e) => RunRecord::failed(i, *s, seed, &e),
            };
            if let Some(dir) = run_dir {
                write_json(&dir.join(format!("run-{i:03}.json")), &record)?;
                append_jsonl(&dir.join("summary.jsonl"), &SummaryLine::from(&record))?;
            }
            Ok(record)
        })
    }

    /// Finetune a pretrained model on a label fraction and score the test
    /// split. The pretrained model is cloned, so one checkpoint serves
    /// every (fraction, seed) cell.
    pub fn finetune_fraction(
        &self,
        pretrained: &Model,
        strategy: &Strategy,
        fraction: f64,
        seed: u64,
    ) -> Result<(Model, f64)> {
        let train = subsample_labels(&self.ft_train, fraction, seed)?;
        let mut model = pretrained.clone();
        let cfg = TrainConfig { seed, ..self.finetune_cfg.clone() };
        let (best_loss, _) = finetune(&mut model, &train, &self.ft_val, Some((strategy, &self.aug)), &cfg)?;
        Ok((model, best_loss))
    }

    /// Test-split metrics for a finetuned model: AUROC/AUPRC on binary
    /// labels, plus MAP@12 in retail mode.
    pub fn test_metrics(&self, model: &Model, seed: u64) -> Result<TestMetrics> {
        match self.mode {
            DatasetMode::Healthcare => {
                let scores = score_samples(model, &self.ft_test, seed)?;
                let labels: Vec<u8> = self
                    .ft_test
                    .iter()
                    .map(|s| s.label.as_binary().map(|b| b as u8))
                    .collect::<Result<_>>()?;
                Ok(TestMetrics {
                    auroc: auroc(&scores, &labels)?,
                    auprc: auprc(&scores, &labels)?,
                    map_at_12: None,
                })
            }
            DatasetMode::Retail => {
                let mut scores = Vec::with_capacity(self.ft_test.len());
                let mut relevant = Vec::with_capacity(self.ft_test.len());
                for (i, s) in self.ft_test.iter().enumerate() {
                    let mut rng = derive_rng(seed, (1 << 40) + i as u64);
                    let padded =
                        crate::data::pad_or_subsample(&s.series, model.config.seqlen, &mut rng);
                    let logits = model.predict_logits(&padded, &s.statics)?;
                    scores.push(logits.row(0).iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect());
                    match &s.label {
                        Label::Multi(r) => relevant.push(r.clone()),
                        Label::Binary(_) => {
                            return Err(PaitsError::data("binary label in retail mode"))
                        }
                    }
                }
                // flattened binary view for AUROC/AUPRC
                let flat_scores: Vec<f64> =
                    scores.iter().flat_map(|r: &Vec<f64>| r.iter().copied()).collect();
                let flat_labels: Vec<u8> = relevant.iter().flatten().copied().collect();
                Ok(TestMetrics {
                    auroc: auroc(&flat_scores, &flat_labels)?,
                    auprc: auprc(&flat_scores, &flat_labels)?,
                    map_at_12: Some(map_at_k(&scores, &relevant, 12)?),
                })
            }
        }
    }
}

/// One deterministic search-summary line; wall clock and checkpoint paths
/// are deliberately excluded so identical searches produce identical
/// files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryLine {
    pub index: usize,
    pub strategy: Strategy,
    pub val_loss: Option<f64>,
    pub pretrain_skipped: bool,
    pub error: Option<String>,
}

impl From<&RunRecord> for SummaryLine {
    fn from(r: &RunRecord) -> Self {
        SummaryLine {
            index: r.index,
            strategy: r.strategy,
            val_loss: r.val_loss,
            pretrain_skipped: r.pretrain_skipped,
            error: r.error.clone(),
        }
    }
}

/// Scores of one finetuned model on the held-out test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub map_at_12: Option<f64>,
}

/// One (method, fraction, seed) evaluation cell, appended to
/// `metrics.jsonl` and aggregated by the report command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub fraction: f64,
    pub seed: u64,
    pub auroc: f64,
    pub auprc: f64,
    pub map_at_12: Option<f64>,
    pub val_loss: f64,
}

/// Read every `metrics.jsonl` directly under the runs root or one level
/// below it.
pub fn collect_metrics(runs_dir: &Path) -> Result<Vec<MetricsRecord>> {
    let mut files: Vec<PathBuf> = Vec::new();
    let direct = runs_dir.join("metrics.jsonl");
    if direct.is_file() {
        files.push(direct);
    }
    if runs_dir.is_dir() {
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(runs_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for d in subdirs {
            let f = d.join("metrics.jsonl");
            if f.is_file() {
                files.push(f);
            }
        }
    }
    let mut out = Vec::new();
    for f in files {
        for (lineno, line) in std::fs::read_to_string(&f)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| PaitsError::Parse {
                line: lineno + 1,
                msg: format!("{}: {e}", f.display()),
            })?;
            out.push(rec);
        }
    }
    Ok(out)
}

fn sorted_unique<T: PartialOrd + PartialEq + Copy>(mut v: Vec<T>) -> Vec<T> {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| a == b);
    v
}

/// Aligned plain-text table mirroring the label-fraction layout: one row
/// per (method, metric), one column per labeled-data percentage, cells as
/// `mean±std` over seeds.
pub fn format_report(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(PaitsError::data("no metrics records to report"));
    }
    let fractions = sorted_unique(records.iter().map(|r| r.fraction).collect::<Vec<f64>>());
    let mut methods: Vec<String> = records.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let has_map = records.iter().any(|r| r.map_at_12.is_some());

    let mut metric_names = vec!["auroc", "auprc"];
    if has_map {
        metric_names.push("map@12");
    }
    let pick = |r: &MetricsRecord, metric: &str| -> Option<f64> {
        match metric {
            "auroc" => Some(r.auroc),
            "auprc" => Some(r.auprc),
            _ => r.map_at_12,
        }
    };

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["method".to_string(), "metric".to_string()];
    for f in &fractions {
        header.push(format!("{:.0}%", f * 100.0));
    }
    rows.push(header);
    for method in &methods {
        for metric in &metric_names {
            let mut row = vec![method.clone(), metric.to_string()];
            for &f in &fractions {
                let values: Vec<f64> = records
                    .iter()
                    .filter(|r| &r.method == method && r.fraction == f)
                    .filter_map(|r| pick(r, metric))
                    .collect();
                row.push(if values.is_empty() {
                    "-".into()
                } else {
                    aggregate(&values)?.display()
                });
            }
            rows.push(row);
        }
    }

    let cols = rows[0].len();
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap()).collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> =
            row.iter().enumerate().map(|(c, cell)| format!("{cell:<w$}", w = widths[c])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// The same table as CSV: method,metric,fraction,mean,std,n.
pub fn format_report_csv(records: &[MetricsRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(PaitsError::data("no metrics records to report"));
    }
    let fractions = sorted_unique(records.iter().map(|r| r.fraction).collect::<Vec<f64>>());
    let mut methods: Vec<String> = records.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut out = String::from("method,metric,fraction,mean,std,n\n");
    for method in &methods {
        for metric in ["auroc", "auprc", "map@12"] {
            for &f in &fractions {
                let values: Vec<f64> = records
                    .iter()
                    .filter(|r| &r.method == method && r.fraction == f)
                    .filter_map(|r| match metric {
                        "auroc" => Some(r.auroc),
                        "auprc" => Some(r.auprc),
                        _ => r.map_at_12,
                    })
                    .collect();
                if values.is_empty() {
                    continue;
                }
                let a = aggregate(&values)?;
                out.push_str(&format!(
                    "{method},{metric},{f},{:.6},{:.6},{}\n",
                    a.mean, a.std, a.n
                ));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{export_csv, ingest_csv};
    use crate::synth::{generate_synthetic, SynthConfig};
    use crate::train::{baseline_plan, Baseline};
    use tempfile::tempdir;

    fn small_pipeline() -> (Pipeline, ExperimentConfig) {
        let synth = SynthConfig {
            entities: 80,
            num_features: 4,
            obs_rate: 0.25,
            span: 24.0,
            static_dim: 2,
            seed: 3,
            ..SynthConfig::default()
        };
        let data = generate_synthetic(&synth).unwrap();
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
        let cfg = ExperimentConfig {
            windowing: crate::data::WindowingConfig {
                observation_len: 12.0,
                forecast_len: 4.0,
                stride: 12.0,
                start: 0.0,
            },
            seqlen: Some(8),
            encoder: crate::io::EncoderKnobs {
                embed_dim: 4,
                blocks: 1,
                heads: 2,
                dropout: 0.0,
                ff_width: 8,
                static_embed_dim: 4,
                supervised_hidden: 4,
            },
            pretrain: TrainConfig { max_epochs: 2, batch_size: 16, ..TrainConfig::default() },
            finetune: TrainConfig { max_epochs: 2, batch_size: 16, ..TrainConfig::default() },
            pool_size: 50,
            ..ExperimentConfig::default()
        };
        (Pipeline::from_split(&split, &cfg).unwrap(), cfg)
    }

    #[test]
    fn pipeline_builds_normalized_windows_and_splits() {
        let (p, _) = small_pipeline();
        assert!(!p.pre_train.is_empty() && !p.pre_val.is_empty());
        assert!(!p.ft_train.is_empty() && !p.ft_val.is_empty() && !p.ft_test.is_empty());
        // normalized training values are roughly standardized
        let all: Vec<f64> = p
            .ft_train
            .iter()
            .flat_map(|s| s.series.obs.iter().map(|o| o.v))
            .collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 0.3, "mean {mean}");
        assert_eq!(p.encoder.seqlen, 8);
    }

    #[test]
    fn evaluate_strategy_is_deterministic() {
        let (p, _) = small_pipeline();
        let (s, o) = baseline_plan(Baseline::Strats);
        let (r1, m1) = p.evaluate_strategy(0, &s, o, 5, None).unwrap();
        let (r2, m2) = p.evaluate_strategy(0, &s, o, 5, None).unwrap();
        assert_eq!(r1.val_loss, r2.val_loss);
        assert_eq!(m1.params, m2.params);
        assert!(!r1.pretrain_skipped);
    }

    #[test]
    fn none_baseline_skips_pretraining_and_search_persists() {
        let (p, _) = small_pipeline();
        let dir = tempdir().unwrap();
        let out = p.search(2, 7, Some(dir.path())).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(dir.path().join("summary.jsonl").is_file());
        assert!(dir.path().join("run-000.json").is_file());
        assert!(dir.path().join("run-000.ckpt").is_file());
        let summary = std::fs::read_to_string(dir.path().join("summary.jsonl")).unwrap();
        assert_eq!(summary.lines().count(), 2);

        let (s, o) = baseline_plan(Baseline::None);
        let (r, _) = p.evaluate_strategy(0, &s, o, 1, None).unwrap();
        assert!(r.pretrain_skipped);
        assert!(r.pretrain_history.is_empty());
    }

    #[test]
    fn fraction_finetune_and_metrics_run() {
        let (p, _) = small_pipeline();
        let (s, o) = baseline_plan(Baseline::Strats);
        let (_, model) = p.evaluate_strategy(0, &s, o, 2, None).unwrap();
        let pretrained = Model::init(p.encoder.clone(), 2).unwrap();
        let (ft, loss) = p.finetune_fraction(&pretrained, &s, 0.5, 3).unwrap();
        assert!(loss.is_finite());
        let m = p.test_metrics(&ft, 3).unwrap();
        assert!(m.auroc >= 0.0 && m.auroc <= 1.0);
        assert!(m.map_at_12.is_none());
        let m2 = p.test_metrics(&model, 3).unwrap();
        assert!(m2.auprc > 0.0 && m2.auprc <= 1.0);
    }

    #[test]
    fn report_formats_and_rejects_empty() {
        let recs = vec![
            MetricsRecord {
                method: "paits".into(),
                fraction: 0.1,
                seed: 0,
                auroc: 0.4,
                auprc: 0.3,
                map_at_12: None,
                val_loss: 0.6,
            },
            MetricsRecord {
                method: "paits".into(),
                fraction: 0.1,
                seed: 1,
                auroc: 0.6,
                auprc: 0.5,
                map_at_12: None,
                val_loss: 0.7,
            },
        ];
        let table = format_report(&recs).unwrap();
        assert!(table.contains("10%"));
        assert!(table.contains("0.5000±0.1414"));
        let csv = format_report_csv(&recs).unwrap();
        assert!(csv.contains("paits,auroc,0.1,0.500000,0.141421,2"));
        assert!(format_report(&[]).is_err());

        let dir = tempdir().unwrap();
        assert!(collect_metrics(dir.path()).unwrap().is_empty());
        append_jsonl(&dir.path().join("metrics.jsonl"), &recs[0]).unwrap();
        let sub = dir.path().join("run-a");
        std::fs::create_dir(&sub).unwrap();
        append_jsonl(&sub.join("metrics.jsonl"), &recs[1]).unwrap();
        assert_eq!(collect_metrics(dir.path()).unwrap().len(), 2);
    }
}
