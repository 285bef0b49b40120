//! Acceptance suite: one test per criterion, each printing a single
//! `[acceptance] criterion N (...): PASS|FAIL` line. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines live.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{array, Array2};
use rand::Rng;

use paits::augment::{
    apply_geometric_mask, apply_mask, build_mask_pool, sample_mask_bernoulli, MaskSampling,
    MaskValues, MaskedElements,
};
use paits::data::{derive_rng, ObservationTriplet, TripletSeries};
use paits::io::{export_csv, ingest_csv, DatasetMode, ExperimentConfig, SplitDataset};
use paits::loss::{forecast_loss, reconstruction_loss, LossWeights, ReconstructionTargets};
use paits::metrics::{auprc, auroc, map_at_k};
use paits::model::Model;
use paits::synth::{generate_synthetic, SynthConfig};
use paits::train::{
    baseline_plan, pretrain, run_search, sample_strategies, Baseline, FinetuneAug,
    PretextObjective, RunRecord, Strategy, TrainConfig,
};
use paits::experiment::Pipeline;
use paits::verify::{
    forecast_loss_oracle, grad_check, mask_statistics, reconstruction_loss_oracle, GradPath,
};

fn criterion(n: usize, name: &str, f: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("[acceptance] criterion {n} ({name}): PASS"),
        Err(e) => {
            println!("[acceptance] criterion {n} ({name}): FAIL");
            std::panic::resume_unwind(e);
        }
    }
}

fn to_array(rows: &[Vec<f64>]) -> Array2<f64> {
    let (r, c) = (rows.len(), rows[0].len());
    Array2::from_shape_fn((r, c), |(i, j)| rows[i][j])
}

#[test]
fn c1_loss_oracles() {
    criterion(1, "loss oracle equivalence", || {
        let start = Instant::now();
        let mut rng = derive_rng(101, 0);
        for case in 0..100 {
            let w = rng.gen_range(1..5usize);
            let j = rng.gen_range(1..6usize);
            let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..w).map(|_| (0..j).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
            };
            let zhat = rand_mat(&mut rng);
            let z = rand_mat(&mut rng);
            let m: Vec<Vec<f64>> = (0..w)
                .map(|_| (0..j).map(|_| f64::from(rng.gen_bool(0.5))).collect())
                .collect();
            let count = rng.gen_range(1.0..10.0);
            let got =
                forecast_loss(&to_array(&zhat), &to_array(&z), &to_array(&m), count).unwrap();
            let want = forecast_loss_oracle(&zhat, &z, &m, count);
            assert!((got - want).abs() < 1e-6, "forecast case {case}: {got} vs {want}");

            let vhat = rand_mat(&mut rng);
            let v = rand_mat(&mut rng);
            let p: Vec<Vec<f64>> = (0..w)
                .map(|_| (0..j).map(|_| f64::from(rng.gen_bool(0.8))).collect())
                .collect();
            let c: Vec<Vec<f64>> = (0..w)
                .map(|_| (0..j).map(|_| f64::from(rng.gen_bool(0.5))).collect())
                .collect();
            let targets = ReconstructionTargets {
                values: to_array(&v),
                padding: to_array(&p),
                reconstruct: to_array(&c),
            };
            let got = reconstruction_loss(&to_array(&vhat), &targets, count).unwrap();
            let want = reconstruction_loss_oracle(&vhat, &v, &p, &c, count);
            assert!((got - want).abs() < 1e-6, "reconstruction case {case}: {got} vs {want}");
        }
        // hand case: zhat=[1,3], z=[2,0], m=[1,0] -> 1.0 exactly
        let got = forecast_loss(
            &array![[1.0, 3.0]],
            &array![[2.0, 0.0]],
            &array![[1.0, 0.0]],
            1.0,
        )
        .unwrap();
        assert_eq!(got, 1.0);
        assert!(start.elapsed().as_secs_f64() < 5.0);
    });
}

#[test]
fn c2_mask_statistics() {
    criterion(2, "masking statistics", || {
        let start = Instant::now();

        // Bernoulli masked fraction within 3 sigma at n = 1e6
        for (i, &r) in [0.3, 0.5, 0.8].iter().enumerate() {
            let mut rng = derive_rng(201, i as u64);
            let masks: Vec<Vec<bool>> = (0..1000)
                .map(|_| {
                    sample_mask_bernoulli(1000, r, &mut rng)
                        .iter()
                        .map(|&m| m == 0.0)
                        .collect()
                })
                .collect();
            let stats = mask_statistics(&masks).unwrap();
            let sigma = (r * (1.0 - r) / 1e6).sqrt();
            assert!(
                (stats.fraction - r).abs() <= 3.0 * sigma,
                "bernoulli r={r}: fraction {}",
                stats.fraction
            );
        }

        // geometric: run-length mean within 5% of lm=3, fraction within
        // 3 sigma of r=0.5 (per-series fractions are i.i.d. across draws)
        let mut rng = derive_rng(202, 0);
        let pool = build_mask_pool(512, 0.5, 3.0, 2000, &mut rng).unwrap();
        let stats = mask_statistics(&pool.masks).unwrap();
        assert!(
            (stats.masked_run_mean - 3.0).abs() <= 0.15,
            "masked run mean {}",
            stats.masked_run_mean
        );
        let fracs: Vec<f64> = pool
            .masks
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / m.len() as f64)
            .collect();
        let n = fracs.len() as f64;
        let mean = fracs.iter().sum::<f64>() / n;
        let var = fracs.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - 0.5).abs() <= 3.0 * se, "fraction {mean} se {se}");

        // within-bucket consistency over 1e4 sampled series
        let mut rng = derive_rng(203, 0);
        let pool = build_mask_pool(10, 0.5, 3.0, 200, &mut rng).unwrap();
        let mut violations = 0usize;
        for _ in 0..10_000 {
            let obs: Vec<ObservationTriplet> = (0..40)
                .map(|_| ObservationTriplet {
                    t: rng.gen_range(0.0..10.0),
                    v: rng.gen_range(-1.0..1.0),
                    f: rng.gen_range(0..3usize),
                })
                .collect();
            let series = TripletSeries::new(obs);
            let mask = apply_geometric_mask(&series, &pool, 1.0, 0.0, &mut rng).unwrap();
            let mut seen: std::collections::HashMap<(usize, i64), f64> =
                std::collections::HashMap::new();
            for (j, o) in series.obs.iter().enumerate() {
                let bucket = (o.t / 1.0).floor() as i64;
                match seen.entry((o.f, bucket)) {
                    std::collections::hash_map::Entry::Occupied(e) => {
                        if *e.get() != mask[j] {
                            violations += 1;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(mask[j]);
                    }
                }
            }
        }
        assert_eq!(violations, 0);
        assert!(start.elapsed().as_secs_f64() < 60.0);
    });
}

#[test]
fn c3_gradient_check() {
    criterion(3, "gradient check", || {
        let start = Instant::now();
        for path in [GradPath::Forecast, GradPath::Reconstruction, GradPath::Supervised] {
            let err = grad_check(path, 1e-4).unwrap();
            assert!(err < 1e-4, "{path:?}: max relative error {err}");
        }
        assert!(start.elapsed().as_secs_f64() < 60.0);
    });
}

fn demo_series(rng: &mut rand_chacha::ChaCha8Rng) -> TripletSeries {
    let obs = (0..30)
        .map(|_| ObservationTriplet {
            t: rng.gen_range(0.0..10.0),
            v: rng.gen_range(-2.0..2.0),
            f: rng.gen_range(0..4usize),
        })
        .collect();
    TripletSeries::new(obs)
}

fn bit_equal(a: &TripletSeries, b: &TripletSeries) -> bool {
    a.len() == b.len()
        && a.obs.iter().zip(&b.obs).all(|(x, y)| {
            x.t.to_bits() == y.t.to_bits() && x.v.to_bits() == y.v.to_bits() && x.f == y.f
        })
}

#[test]
fn c4_augmentation_identities() {
    criterion(4, "augmentation identities", || {
        let mut rng = derive_rng(401, 0);
        let series = demo_series(&mut rng);

        // sigma = 0 and r = 0 -> bit-identical output, all-ones mask
        let strat = Strategy {
            weights: LossWeights::new(1.0, 1.0),
            noise_std: 0.0,
            mask_rate: 0.0,
            sampling: MaskSampling::Random,
            mask_value: 0.0,
            elements: MaskedElements::ALL,
            ft_aug: FinetuneAug::None,
        };
        let ctx = paits::train::AugContext {
            mask_token: 4,
            interval_width: 1.0,
            mean_run: 3.0,
            window_start: 0.0,
            window_len: 10.0,
            pool_size: 10,
        };
        let (out, mask) =
            paits::augment::augment(&series, &strat.spec(&ctx), 0.0, None, &mut rng).unwrap();
        assert!(bit_equal(&series, &out));
        assert!(mask.iter().all(|&m| m == 1.0));

        // apply_mask with an all-ones mask is the identity
        let ones = vec![1.0; series.len()];
        let values = MaskValues { time: -100.0, value: -100.0, feature: 4 };
        let out = apply_mask(&series, &ones, &values, &MaskedElements::ALL);
        assert!(bit_equal(&series, &out));

        // TST loss ignores predictions at unmasked (c = 0) positions
        let vhat = array![[0.3, -0.1, 0.7], [1.2, 0.0, -0.5]];
        let targets = ReconstructionTargets {
            values: array![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]],
            padding: array![[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]],
            reconstruct: array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]],
        };
        let base = reconstruction_loss(&vhat, &targets, 4.0).unwrap();
        let mut perturbed = vhat.clone();
        for ((i, k), v) in perturbed.indexed_iter_mut() {
            if targets.padding[[i, k]] * targets.reconstruct[[i, k]] == 0.0 {
                *v += 1e6;
            }
        }
        let after = reconstruction_loss(&perturbed, &targets, 4.0).unwrap();
        assert_eq!(base.to_bits(), after.to_bits());
    });
}

#[test]
fn c5_search_correctness() {
    criterion(5, "search correctness", || {
        // grid cardinality and exhaustive sampling
        let grid = Strategy::grid();
        assert_eq!(grid.len(), 768);
        let key = |s: &Strategy| serde_json::to_string(s).unwrap();
        let mut grid_keys: Vec<String> = grid.iter().map(key).collect();
        grid_keys.sort();
        grid_keys.dedup();
        assert_eq!(grid_keys.len(), 768, "grid has duplicate strategies");

        let sampled = sample_strategies(768, 5).unwrap();
        let mut sampled_keys: Vec<String> = sampled.iter().map(key).collect();
        sampled_keys.sort();
        assert_eq!(sampled_keys, grid_keys, "full-budget sample is not the grid exactly once");

        // stubbed evaluator: argmin with earliest-index ties, BL non-increasing
        let strategies = sample_strategies(20, 3).unwrap();
        let losses: Vec<f64> = (0..20).map(|i| ((i * 37 + 5) % 17) as f64 * 0.1).collect();
        let outcome = run_search(&strategies, |i, s| {
            Ok(RunRecord {
                index: i,
                strategy: *s,
                seed: 0,
                val_loss: Some(losses[i]),
                pretrain_skipped: false,
                pretrain_history: vec![],
                finetune_history: vec![],
                checkpoint: None,
                wall_clock_secs: 0.0,
                error: None,
            })
        })
        .unwrap();
        let argmin = losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap()
            .0;
        assert_eq!(outcome.best_index, argmin);
        assert_eq!(outcome.best_loss, losses[argmin]);
        assert!(outcome.bl_sequence.windows(2).all(|w| w[1] <= w[0]));
        for (i, &bl) in outcome.bl_sequence.iter().enumerate() {
            let prefix_min =
                losses[..=i].iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(bl, prefix_min);
        }

        // duplicate minima resolve to the earliest index
        let dup = run_search(&strategies[..4], |i, s| {
            Ok(RunRecord {
                index: i,
                strategy: *s,
                seed: 0,
                val_loss: Some(if i == 1 || i == 3 { 0.2 } else { 0.9 }),
                pretrain_skipped: false,
                pretrain_history: vec![],
                finetune_history: vec![],
                checkpoint: None,
                wall_clock_secs: 0.0,
                error: None,
            })
        })
        .unwrap();
        assert_eq!(dup.best_index, 1);
    });
}

fn ingest_to_temp(synth: &SynthConfig, split_seed: u64) -> (tempfile::TempDir, SplitDataset) {
    let data = generate_synthetic(synth).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_csv(&data, dir.path()).unwrap();
    let split = ingest_csv(
        &dir.path().join("triplets.csv"),
        &dir.path().join("statics.csv"),
        &dir.path().join("labels.csv"),
        DatasetMode::Healthcare,
        0,
        split_seed,
    )
    .unwrap();
    (dir, split)
}

fn small_cfg() -> ExperimentConfig {
    ExperimentConfig {
        windowing: paits::data::WindowingConfig {
            observation_len: 12.0,
            forecast_len: 4.0,
            stride: 12.0,
            start: 0.0,
        },
        seqlen: Some(8),
        encoder: paits::io::EncoderKnobs {
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
    }
}

#[test]
fn c6_baseline_equivalence() {
    criterion(6, "baseline equivalence", || {
        let synth = SynthConfig {
            entities: 80,
            num_features: 4,
            obs_rate: 0.25,
            span: 24.0,
            static_dim: 2,
            seed: 3,
            ..SynthConfig::default()
        };
        let (_dir, split) = ingest_to_temp(&synth, 17);
        let pipe = Pipeline::from_split(&split, &small_cfg()).unwrap();

        let (base_s, base_o) = baseline_plan(Baseline::Strats);
        let manual = Strategy {
            weights: LossWeights::new(1.0, 0.0),
            noise_std: 0.0,
            mask_rate: 0.0,
            sampling: MaskSampling::Random,
            mask_value: 0.0,
            elements: MaskedElements::ALL,
            ft_aug: FinetuneAug::None,
        };
        let (r1, m1) = pipe.evaluate_strategy(0, &base_s, base_o, 11, None).unwrap();
        let (r2, m2) =
            pipe.evaluate_strategy(0, &manual, PretextObjective::Joint, 11, None).unwrap();
        assert_eq!(r1.val_loss.unwrap().to_bits(), r2.val_loss.unwrap().to_bits());
        let t1 = pipe.test_metrics(&m1, 11).unwrap();
        let t2 = pipe.test_metrics(&m2, 11).unwrap();
        assert_eq!(t1.auroc.to_bits(), t2.auroc.to_bits());
        assert_eq!(t1.auprc.to_bits(), t2.auprc.to_bits());
        assert_eq!(m1.params, m2.params);
    });
}

#[test]
fn c7_synthetic_end_to_end() {
    criterion(7, "synthetic end-to-end", || {
        let start = Instant::now();
        let (_dir, split) = ingest_to_temp(&SynthConfig::default(), 17);

        let windowing = paits::data::WindowingConfig {
            observation_len: 24.0,
            forecast_len: 6.0,
            stride: 12.0,
            start: 0.0,
        };
        let encoder = paits::io::EncoderKnobs {
            embed_dim: 24,
            blocks: 1,
            heads: 4,
            dropout: 0.2,
            ff_width: 48,
            static_embed_dim: 24,
            supervised_hidden: 24,
        };
        let search_cfg = ExperimentConfig {
            windowing,
            seqlen: Some(32),
            encoder: encoder.clone(),
            pretrain: TrainConfig {
                max_epochs: 10,
                patience: 3,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                max_epochs: 10,
                patience: 3,
                eval_every: 2,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            pool_size: 2000,
            ..ExperimentConfig::default()
        };
        let sweep_cfg = ExperimentConfig {
            pretrain: TrainConfig {
                max_epochs: 40,
                patience: 4,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                max_epochs: 40,
                patience: 8,
                eval_every: 2,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            ..search_cfg.clone()
        };

        // Algorithm 1 at budget N = 8 selects the strategy to sweep
        let searcher = Pipeline::from_split(&split, &search_cfg).unwrap();
        let outcome = searcher.search(8, 0, None).unwrap();
        let best = outcome.best_strategy;
        eprintln!(
            "[c7] search done at {:.0}s: best index {} val_loss {:.4} strategy {}",
            start.elapsed().as_secs_f64(),
            outcome.best_index,
            outcome.best_loss,
            serde_json::to_string(&best).unwrap()
        );

        // pretrain the selected strategy once; the control shares its init
        let sweep = Pipeline::from_split(&split, &sweep_cfg).unwrap();
        let mut paits_model = Model::init(sweep.encoder.clone(), 0).unwrap();
        let pre_cfg = TrainConfig { seed: 0, ..sweep.pretrain_cfg.clone() };
        let history = pretrain(
            &mut paits_model,
            &sweep.pre_train,
            &sweep.pre_val,
            &best,
            PretextObjective::Joint,
            &sweep.aug,
            &pre_cfg,
        )
        .unwrap();
        assert!(!history.skipped, "selected strategy must actually pretrain");
        let none_model = Model::init(sweep.encoder.clone(), 0).unwrap();
        let none_strategy = Strategy::strats();
        eprintln!(
            "[c7] pretrain done at {:.0}s ({} epochs)",
            start.elapsed().as_secs_f64(),
            history.val.len()
        );

        let mut means = std::collections::HashMap::new();
        for (method, model, strat) in
            [("paits", &paits_model, &best), ("none", &none_model, &none_strategy)]
        {
            for fraction in [0.1, 1.0] {
                let mut aurocs = Vec::new();
                for seed in 0..5u64 {
                    let (ft, _) = sweep.finetune_fraction(model, strat, fraction, seed).unwrap();
                    let m = sweep.test_metrics(&ft, seed).unwrap();
                    aurocs.push(m.auroc);
                }
                let mean = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
                eprintln!(
                    "[c7] {method} @ {:.0}%: mean AUROC {mean:.4} ({aurocs:.4?}) at {:.0}s",
                    fraction * 100.0,
                    start.elapsed().as_secs_f64()
                );
                means.insert((method, (fraction * 100.0) as u32), mean);
            }
        }

        let elapsed = start.elapsed().as_secs_f64();
        assert!(
            means[&("paits", 10)] >= means[&("none", 10)] + 0.02,
            "10% labels: paits {:.4} vs none {:.4}",
            means[&("paits", 10)],
            means[&("none", 10)]
        );
        assert!(
            means[&("paits", 100)] >= means[&("none", 100)] - 0.01,
            "100% labels: paits {:.4} vs none {:.4}",
            means[&("paits", 100)],
            means[&("none", 100)]
        );
        assert!(elapsed < 45.0 * 60.0, "took {elapsed:.0}s");
    });
}

#[test]
fn c8_metric_oracles() {
    criterion(8, "metric oracles", || {
        let scores = [0.9, 0.8, 0.3];
        let labels = [1u8, 0, 1];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
        assert!((auprc(&scores, &labels).unwrap() - 0.8333).abs() <= 1e-4);
        // single relevant item ranked second -> AP = 1/2
        let got = map_at_k(&[vec![0.9, 0.8, 0.7]], &[vec![0, 1, 0]], 12).unwrap();
        assert_eq!(got, 0.5);
    });
}

#[test]
fn c9_reproducibility() {
    criterion(9, "reproducibility", || {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let runs_dir = dir.path().join("runs");
        let mut cfg = small_cfg();
        cfg.data_dir = data_dir.display().to_string();
        cfg.runs_dir = runs_dir.display().to_string();
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

        let bin = env!("CARGO_BIN_EXE_paits");
        let run = |args: &[&str]| {
            let out = std::process::Command::new(bin)
                .args(args)
                .env("RAYON_NUM_THREADS", "1")
                .output()
                .unwrap();
            assert!(
                out.status.success(),
                "paits {args:?} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        let cfg_arg = cfg_path.display().to_string();
        run(&[
            "gen-data", "--config", &cfg_arg, "--entities", "60", "--features", "4",
            "--obs-rate", "0.25", "--span", "24", "--static-dim", "2", "--seed", "3",
        ]);
        run(&["search", "--config", &cfg_arg, "--budget", "3", "--seed", "7", "--run-id", "a"]);
        run(&["search", "--config", &cfg_arg, "--budget", "3", "--seed", "7", "--run-id", "b"]);

        let a = std::fs::read(runs_dir.join("a").join("summary.jsonl")).unwrap();
        let b = std::fs::read(runs_dir.join("b").join("summary.jsonl")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "summary files differ between identical runs");
    });
}
