//! Command-line workbench: synthetic data generation, pretraining,
//! strategy search, label-fraction finetuning, evaluation, and report
//! aggregation. Exit codes: 0 success, 1 validation error, 2 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paits::data::subsample_labels;
use paits::experiment::{
    collect_metrics, format_report, format_report_csv, MetricsRecord, Pipeline, TestMetrics,
};
use paits::io::{
    append_jsonl, create_run_dir, export_csv, ingest_csv, sparsity_report, write_json,
    ExperimentConfig, SplitDataset,
};
use paits::model::{load_checkpoint_file, save_checkpoint_file, CheckpointMeta, Model};
use paits::synth::{generate_synthetic, SynthConfig};
use paits::train::{
    baseline_plan, finetune, pretrain, Baseline, FinetuneAug, PretextObjective, Strategy,
    TrainConfig,
};
use paits::{PaitsError, Result};

#[derive(Parser)]
#[command(name = "paits", version, about = "Pretraining workbench for sparse irregular time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write the triplet/statics/labels CSV trio.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        features: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        ar_coeff: Option<f64>,
        #[arg(long)]
        obs_rate: Option<f64>,
        #[arg(long)]
        span: Option<f64>,
        #[arg(long)]
        static_dim: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain one strategy (or a named baseline) and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        /// Named baseline: strats | tst | tstcc | cl_paits | none.
        #[arg(long, conflicts_with = "strategy")]
        baseline: Option<String>,
        /// Inline strategy spec as JSON.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Random strategy search (Algorithm 1) with persisted run records.
    Search {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Finetune a pretrained checkpoint on a label fraction and score the test split.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the strategy's finetune-augmentation flag.
        #[arg(long, value_parser = ["same", "none"])]
        ft_aug: Option<String>,
        /// Method name recorded in metrics.jsonl (default: checkpoint stage).
        #[arg(long)]
        method: Option<String>,
    },
    /// Score a finetuned checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate metrics.jsonl files under the runs directory into a table.
    Report {
        #[command(flatten)]
        config: ConfigArg,
        /// Runs directory (default: the config's runs_dir).
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Also write the aggregated table as CSV to this path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(arg: &ConfigArg) -> Result<ExperimentConfig> {
    match &arg.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_split(cfg: &ExperimentConfig) -> Result<SplitDataset> {
    let dir = Path::new(&cfg.data_dir);
    ingest_csv(
        &dir.join("triplets.csv"),
        &dir.join("statics.csv"),
        &dir.join("labels.csv"),
        cfg.mode,
        0,
        cfg.split_seed,
    )
}

/// First unused run id of the form `base`, `base-2`, `base-3`, ...
fn unique_run_id(root: &Path, base: &str) -> String {
    if !root.join(base).exists() {
        return base.to_string();
    }
    let mut n = 2;
    loop {
        let id = format!("{base}-{n}");
        if !root.join(&id).exists() {
            return id;
        }
        n += 1;
    }
}

fn parse_strategy(baseline: Option<&str>, strategy: Option<&str>) -> Result<(Strategy, PretextObjective)> {
    match (baseline, strategy) {
        (Some(name), None) => Ok(baseline_plan(name.parse::<Baseline>()?)),
        (None, Some(json)) => {
            let s: Strategy = serde_json::from_str(json)
                .map_err(|e| PaitsError::config(format!("bad strategy JSON: {e}")))?;
            Ok((s, PretextObjective::Joint))
        }
        (None, None) => Err(PaitsError::config("provide --baseline NAME or --strategy JSON")),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    config: &ConfigArg,
    entities: Option<usize>,
    features: Option<usize>,
    latent_dim: Option<usize>,
    ar_coeff: Option<f64>,
    obs_rate: Option<f64>,
    span: Option<f64>,
    static_dim: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let mut synth = SynthConfig::default();
    if let Some(v) = entities {
        synth.entities = v;
    }
    if let Some(v) = features {
        synth.num_features = v;
    }
    if let Some(v) = latent_dim {
        synth.latent_dim = v;
        synth.label_weights =
            (0..2 * v).map(|i| if i % 2 == 0 { 2.0 } else { -1.5 }).collect();
    }
    if let Some(v) = ar_coeff {
        synth.ar_coeff = v;
    }
    if let Some(v) = obs_rate {
        synth.obs_rate = v;
    }
    if let Some(v) = span {
        synth.span = v;
    }
    if let Some(v) = static_dim {
        synth.static_dim = v;
    }
    if let Some(v) = seed {
        synth.seed = v;
    }
    synth.validate()?;

    let data = generate_synthetic(&synth)?;
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
    std::fs::create_dir_all(&dir)?;
    export_csv(&data, &dir)?;
    let report = sparsity_report(&data.series, synth.num_features, cfg.interval_width)?;
    println!(
        "wrote {} entities to {} (sparsity {:.3}, series length p50 {})",
        synth.entities,
        dir.display(),
        report.sparsity,
        report.count_p50
    );
    Ok(())
}

fn cmd_pretrain(
    config: &ConfigArg,
    baseline: Option<String>,
    strategy: Option<String>,
    seed: Option<u64>,
    run_id: Option<String>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (strategy, objective) = parse_strategy(baseline.as_deref(), strategy.as_deref())?;
    let seed = seed.unwrap_or_else(|| cfg.seeds[0]);

    let pipeline = Pipeline::from_split(&load_split(&cfg)?, &cfg)?;
    let runs_root = PathBuf::from(&cfg.runs_dir);
    let base = run_id.unwrap_or_else(|| {
        format!("pretrain-{}-s{seed}", baseline.as_deref().unwrap_or("custom"))
    });
    let dir = create_run_dir(&runs_root, &unique_run_id(&runs_root, &base))?;

    let mut model = Model::init(pipeline.encoder.clone(), seed)?;
    let pre_cfg = TrainConfig { seed, ..pipeline.pretrain_cfg.clone() };
    let history = pretrain(
        &mut model,
        &pipeline.pre_train,
        &pipeline.pre_val,
        &strategy,
        objective,
        &pipeline.aug,
        &pre_cfg,
    )?;
    let ckpt = dir.join("pretrained.ckpt");
    let meta = CheckpointMeta {
        config: pipeline.encoder.clone(),
        seed,
        stage: baseline.unwrap_or_else(|| "paits".into()),
        strategy: Some(serde_json::to_value(strategy)?),
    };
    save_checkpoint_file(&model, &meta, &ckpt)?;
    write_json(
        &dir.join("pretrain.json"),
        &serde_json::json!({
            "strategy": strategy,
            "objective": objective,
            "seed": seed,
            "skipped": history.skipped,
            "epochs_run": history.epochs_run,
            "val": history.val,
        }),
    )?;
    println!(
        "pretrained in {} epochs (skipped: {}); checkpoint {}",
        history.epochs_run,
        history.skipped,
        ckpt.display()
    );
    Ok(())
}

fn cmd_search(
    config: &ConfigArg,
    budget: Option<usize>,
    seed: Option<u64>,
    run_id: Option<String>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let budget = budget.unwrap_or(cfg.search_budget);
    let seed = seed.unwrap_or_else(|| cfg.seeds[0]);
    let pipeline = Pipeline::from_split(&load_split(&cfg)?, &cfg)?;

    let runs_root = PathBuf::from(&cfg.runs_dir);
    let base = run_id.unwrap_or_else(|| format!("search-s{seed}-n{budget}"));
    let dir = create_run_dir(&runs_root, &unique_run_id(&runs_root, &base))?;

    let outcome = pipeline.search(budget, seed, Some(&dir))?;
    write_json(
        &dir.join("best.json"),
        &serde_json::json!({
            "best_index": outcome.best_index,
            "best_strategy": outcome.best_strategy,
            "best_loss": outcome.best_loss,
            "bl_sequence": outcome.bl_sequence,
        }),
    )?;
    println!(
        "search over {budget} strategies: best index {} with validation loss {:.6} ({})",
        outcome.best_index,
        outcome.best_loss,
        dir.display()
    );
    Ok(())
}

fn checkpoint_strategy(meta: &CheckpointMeta) -> Result<Strategy> {
    match &meta.strategy {
        Some(v) => Ok(serde_json::from_value(v.clone())?),
        None => Err(PaitsError::data("checkpoint has no strategy metadata")),
    }
}

fn print_metrics(m: &TestMetrics) {
    match m.map_at_12 {
        Some(map) => println!(
            "test AUROC {:.4}  AUPRC {:.4}  MAP@12 {:.4}",
            m.auroc, m.auprc, map
        ),
        None => println!("test AUROC {:.4}  AUPRC {:.4}", m.auroc, m.auprc),
    }
}

fn cmd_finetune(
    config: &ConfigArg,
    checkpoint: &Path,
    fraction: f64,
    seed: Option<u64>,
    ft_aug: Option<String>,
    method: Option<String>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let (pretrained, meta) = load_checkpoint_file(checkpoint)?;
    let mut strategy = checkpoint_strategy(&meta)?;
    if let Some(flag) = ft_aug {
        strategy.ft_aug = if flag == "same" { FinetuneAug::Same } else { FinetuneAug::None };
    }
    let seed = seed.unwrap_or_else(|| cfg.seeds[0]);
    let mut cfg = cfg;
    cfg.seqlen = Some(meta.config.seqlen);
    let pipeline = Pipeline::from_split(&load_split(&cfg)?, &cfg)?;
    if pipeline.encoder != meta.config {
        return Err(PaitsError::config(
            "checkpoint architecture does not match the configured dataset",
        ));
    }

    let train = subsample_labels(&pipeline.ft_train, fraction, seed)?;
    let mut model = pretrained;
    let ft_cfg = TrainConfig { seed, ..pipeline.finetune_cfg.clone() };
    let (best_loss, history) = finetune(
        &mut model,
        &train,
        &pipeline.ft_val,
        Some((&strategy, &pipeline.aug)),
        &ft_cfg,
    )?;
    let metrics = pipeline.test_metrics(&model, seed)?;

    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let out_dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let ft_ckpt = out_dir.join(format!("{stem}-ft-f{fraction}-s{seed}.ckpt"));
    let ft_meta = CheckpointMeta {
        config: meta.config.clone(),
        seed,
        stage: format!("finetuned:{}", meta.stage),
        strategy: meta.strategy.clone(),
    };
    save_checkpoint_file(&model, &ft_meta, &ft_ckpt)?;

    let record = MetricsRecord {
        method: method.unwrap_or_else(|| meta.stage.clone()),
        fraction,
        seed,
        auroc: metrics.auroc,
        auprc: metrics.auprc,
        map_at_12: metrics.map_at_12,
        val_loss: best_loss,
    };
    append_jsonl(&out_dir.join("metrics.jsonl"), &record)?;
    println!(
        "finetuned on {:.0}% labels over {} epochs, best validation loss {:.6}",
        fraction * 100.0,
        history.epochs_run,
        best_loss
    );
    print_metrics(&metrics);
    println!("checkpoint {}", ft_ckpt.display());
    Ok(())
}

fn cmd_evaluate(config: &ConfigArg, checkpoint: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let (model, meta) = load_checkpoint_file(checkpoint)?;
    if model.params.get("sup.w1").is_none() {
        return Err(PaitsError::data("checkpoint has no supervised head; finetune it first"));
    }
    let seed = seed.unwrap_or_else(|| cfg.seeds[0]);
    let mut cfg = cfg;
    cfg.seqlen = Some(meta.config.seqlen);
    let pipeline = Pipeline::from_split(&load_split(&cfg)?, &cfg)?;
    let metrics = pipeline.test_metrics(&model, seed)?;
    print_metrics(&metrics);
    Ok(())
}

fn cmd_report(config: &ConfigArg, runs: Option<PathBuf>, csv: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let dir = runs.unwrap_or_else(|| PathBuf::from(&cfg.runs_dir));
    let records = collect_metrics(&dir)?;
    let table = format_report(&records)?;
    print!("{table}");
    if let Some(path) = csv {
        std::fs::write(&path, format_report_csv(&records)?)?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            entities,
            features,
            latent_dim,
            ar_coeff,
            obs_rate,
            span,
            static_dim,
            seed,
            out,
        } => cmd_gen_data(
            &config, entities, features, latent_dim, ar_coeff, obs_rate, span, static_dim, seed,
            out,
        ),
        Command::Pretrain { config, baseline, strategy, seed, run_id } => {
            cmd_pretrain(&config, baseline, strategy, seed, run_id)
        }
        Command::Search { config, budget, seed, run_id } => cmd_search(&config, budget, seed, run_id),
        Command::Finetune { config, checkpoint, fraction, seed, ft_aug, method } => {
            cmd_finetune(&config, &checkpoint, fraction, seed, ft_aug, method)
        }
        Command::Evaluate { config, checkpoint, seed } => cmd_evaluate(&config, &checkpoint, seed),
        Command::Report { config, runs, csv } => cmd_report(&config, runs, csv),
    }
}

fn exit_code(e: &PaitsError) -> u8 {
    match e {
        PaitsError::Config(_)
        | PaitsError::Data(_)
        | PaitsError::Shape(_)
        | PaitsError::Parse { .. } => 1,
        PaitsError::Numerical(_) | PaitsError::Io(_) | PaitsError::Serde(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
