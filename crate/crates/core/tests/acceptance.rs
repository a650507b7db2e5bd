//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Real datasets are read from `FEDANOMALY_DATA_DIR` (default: the
//! workspace `data/` directory): `spambase.csv` and `shuttle.csv`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use fedanomaly_core::data::BatchSampler;
use fedanomaly_core::numerics::max_param_diff;
use fedanomaly_core::protocol::sampling_rng;
use fedanomaly_core::{
    add_gaussian_noise, auc_pr, auc_roc, build_federation, clip_rows, compare_overhead, compute_sigma, load_dataset,
    model_grad_check, prepare, run_experiment, run_experiment_on, run_round, sweep, AdamConfig, AdamState, DpConfig,
    ExperimentConfig, GradCheckSetup, Matrix, Parameterized, Rng, RoundOptions, Stream, SweepGrid,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn data_dir() -> PathBuf {
    std::env::var_os("FEDANOMALY_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn dataset_file(name: &str) -> Result<PathBuf, String> {
    let path = data_dir().join(format!("{name}.csv"));
    if path.is_file() {
        Ok(path)
    } else {
        Err(format!("dataset file {} not found", path.display()))
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut redraws = 0;
    for seed in 0..5 {
        let report = model_grad_check(&GradCheckSetup {
            batch: 4,
            tol: 1e-4,
            seed,
            ..GradCheckSetup::default()
        })
        .map_err(err)?;
        worst = worst.max(report.max_rel_error());
        redraws += report.redraws;
        if !report.passed() {
            failed.push(seed);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failed.is_empty() && secs < 30.0,
        format!(
            "max rel error {worst:.2e} over 5 seeds (tol 1e-4), failing seeds {failed:?}, {redraws} kink redraws, {secs:.2}s (< 30s)"
        ),
    )
}

fn split_fused_equivalence() -> Outcome {
    let cfg = ExperimentConfig {
        devices: 1,
        max_rounds: 1,
        ..ExperimentConfig::default()
    };
    let raw = load_dataset(&cfg.dataset).map_err(err)?;
    let prepared = prepare(&cfg, &raw).map_err(err)?;
    let mut fed = build_federation(&cfg, &prepared).map_err(err)?;

    // Monolithic reference: one model, one loss, one backward pass.
    let mut learner = fed.devices[0].learner().clone();
    let mut scorer = fed.coordinator.scorer().clone();
    let mut sampler = BatchSampler::new(&prepared.shards[0], cfg.batch_size, sampling_rng(cfg.seed, 0)).map_err(err)?;
    let (x, labels) = sampler.next_batch(&prepared.data);
    let (h, etape) = learner.forward(&x).map_err(err)?;
    let (_, stape) = scorer.forward(&h).map_err(err)?;
    let (sgrads, hgrad) = scorer.backward_bce(&stape, &labels).map_err(err)?;
    let egrads = learner.backward(&etape, &hgrad).map_err(err)?;
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    AdamState::new(adam, &learner.param_shapes())
        .update(learner.params_mut(), &egrads.0)
        .map_err(err)?;
    AdamState::new(adam, &scorer.param_shapes())
        .update(scorer.params_mut(), &sgrads.0)
        .map_err(err)?;

    let before_enc = fed.devices[0].learner().clone();
    let before_sc = fed.coordinator.scorer().clone();
    run_round(&mut fed.devices, &mut fed.coordinator, &RoundOptions::default()).map_err(err)?;
    let moved =
        max_param_diff(fed.devices[0].learner(), &before_enc).max(max_param_diff(fed.coordinator.scorer(), &before_sc));
    let diff =
        max_param_diff(fed.devices[0].learner(), &learner).max(max_param_diff(fed.coordinator.scorer(), &scorer));
    check(
        diff <= 1e-10 && moved > 0.0,
        format!("max |Δ_split − Δ_fused| = {diff:.2e} (≤ 1e-10), max |Δ| = {moved:.2e}"),
    )
}

fn dp_mechanism() -> Outcome {
    let cfg = DpConfig {
        clip_norm: 1.0,
        ..DpConfig::enabled(1.0, 1e-3)
    };
    let sigma = compute_sigma(&cfg).map_err(err)?;
    // sqrt(2 ln 1250), evaluated at 30 digits and rounded to f64.
    let reference = 3.776_479_532_659_047;
    let closed_form = (2.0 * 1250f64.ln()).sqrt();
    let sigma_err = (sigma - reference).abs().max((sigma - closed_form).abs());

    let n = 1_000_000;
    let clipped = clip_rows(&Matrix::zeros(1000, n / 1000), 1.0);
    let noisy = add_gaussian_noise(&clipped, &cfg, &mut Rng::derive(3, Stream::Test, &[1])).map_err(err)?;
    let mean = noisy.data().iter().sum::<f64>() / n as f64;
    let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let rel = (var.sqrt() - sigma).abs() / sigma;
    check(
        sigma_err <= 1e-9 && rel < 0.01,
        format!(
            "sigma {sigma:.10} (err {sigma_err:.1e} ≤ 1e-9), empirical std over 1e6 draws off by {:.3}% (< 1%)",
            rel * 100.0
        ),
    )
}

fn pairwise_roc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (si, &yi) in scores.iter().zip(labels) {
        for (sj, &yj) in scores.iter().zip(labels) {
            if yi == 1 && yj == 0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Mean over positives of precision at that positive's score.
fn brute_average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut pos = 0.0;
    for (si, &yi) in scores.iter().zip(labels) {
        if yi != 1 {
            continue;
        }
        pos += 1.0;
        let (mut tp, mut all) = (0.0, 0.0);
        for (sj, &yj) in scores.iter().zip(labels) {
            if sj >= si {
                all += 1.0;
                tp += f64::from(yj);
            }
        }
        total += tp / all;
    }
    total / pos
}

fn auc_oracles() -> Outcome {
    let mut rng = Rng::derive(4, Stream::Test, &[]);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = 2 + rng.below(199);
        let levels = if i % 2 == 0 { 1 + rng.below(20) } else { 1 << 30 };
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let prevalence = 0.05 + 0.9 * rng.uniform();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(prevalence))).collect();
        let (a, b) = (rng.below(n), rng.below(n - 1));
        let b = if b >= a { b + 1 } else { b };
        labels[a] = 1;
        labels[b] = 0;
        let roc = auc_roc(&scores, &labels).map_err(err)?;
        let pr = auc_pr(&scores, &labels).map_err(err)?;
        worst = worst
            .max((roc - pairwise_roc(&scores, &labels)).abs())
            .max((pr - brute_average_precision(&scores, &labels)).abs());
    }
    check(
        worst <= 1e-9,
        format!("max deviation from O(n²) references {worst:.1e} over 1000 instances (≤ 1e-9)"),
    )
}

/// Synthetic run used by criteria 5 and 10.
fn synthetic_config() -> ExperimentConfig {
    ExperimentConfig {
        devices: 3,
        feature_ratio: 0.5,
        learning_rate: 3e-4,
        max_rounds: 200,
        ..ExperimentConfig::default()
    }
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let r = run_experiment(&synthetic_config()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let roc = r.final_metrics.auc_roc;
    check(
        roc >= 0.99 && r.rounds_run <= 200 && secs < 120.0,
        format!(
            "AUC-ROC {roc:.4} (≥ 0.99) after {} rounds, {secs:.2}s (< 120s)",
            r.rounds_run
        ),
    )
}

fn spambase() -> Outcome {
    let path = dataset_file("spambase")?;
    let base = ExperimentConfig::named("spambase", &path).map_err(err)?;
    let raw = load_dataset(&base.dataset).map_err(err)?;
    let start = Instant::now();
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let cfg = ExperimentConfig {
            devices: 3,
            learning_rate: 1e-4,
            batch_size: 32,
            heads: 3,
            feature_ratio: 0.5,
            max_rounds: 5000,
            seed,
            ..base.clone()
        };
        let r = run_experiment_on(&cfg, &raw).map_err(err)?;
        per_seed.push((r.final_metrics.auc_roc, r.final_metrics.auc_pr, r.rounds_run));
    }
    let secs = start.elapsed().as_secs_f64();
    let mean = |f: fn(&(f64, f64, u32)) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len() as f64;
    let (roc, pr) = (mean(|s| s.0), mean(|s| s.1));
    let seeds: Vec<String> = per_seed
        .iter()
        .map(|s| format!("{:.3}/{:.3}@{}", s.0, s.1, s.2))
        .collect();
    check(
        roc >= 0.88 && pr >= 0.85 && secs < 1800.0,
        format!(
            "mean over seeds 0-4: AUC-ROC {roc:.4} (≥ 0.88), AUC-PR {pr:.4} (≥ 0.85), {secs:.1}s; per seed roc/pr@rounds [{}]",
            seeds.join(", ")
        ),
    )
}

fn shuttle_base() -> Result<(ExperimentConfig, fedanomaly_core::Dataset), String> {
    let path = dataset_file("shuttle")?;
    let cfg = ExperimentConfig {
        devices: 3,
        learning_rate: 1e-4,
        batch_size: 32,
        feature_ratio: 0.5,
        max_rounds: 5000,
        ..ExperimentConfig::named("shuttle", &path).map_err(err)?
    };
    let raw = load_dataset(&cfg.dataset).map_err(err)?;
    Ok((cfg, raw))
}

fn shuttle_with_dp() -> Outcome {
    let (cfg, raw) = shuttle_base()?;
    let off = run_experiment_on(&cfg, &raw).map_err(err)?.final_metrics.auc_roc;
    let dp_cfg = ExperimentConfig {
        dp: DpConfig {
            enabled: true,
            delta: 1e-3,
            ..cfg.dp
        },
        ..cfg.clone()
    };
    let on = run_experiment_on(&dp_cfg, &raw).map_err(err)?.final_metrics.auc_roc;
    check(
        off >= 0.97 && off - on <= 0.03,
        format!(
            "AUC-ROC DP off {off:.4} (≥ 0.97), DP on (ε={}, δ=1e-3) {on:.4}, degradation {:.4} (≤ 0.03)",
            cfg.dp.epsilon,
            off - on
        ),
    )
}

fn shuttle_scalability() -> Outcome {
    let (cfg, raw) = shuttle_base()?;
    let ks = [3, 6, 10];
    let seeds = [0, 1, 2];
    let grid = SweepGrid {
        devices: ks.to_vec(),
        ratios: vec![cfg.feature_ratio],
        dp: vec![false],
        seeds: seeds.to_vec(),
    };
    let cells = sweep(&cfg, &grid, &raw).map_err(err)?;
    let cell = |k: usize, s: u64| cells.iter().find(|c| c.devices == k && c.seed == s).expect("grid cell");
    let means: Vec<f64> = ks
        .iter()
        .map(|&k| seeds.iter().map(|&s| cell(k, s).auc_roc).sum::<f64>() / seeds.len() as f64)
        .collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    let monotone = seeds
        .iter()
        .filter(|&&s| {
            let rounds: Vec<u32> = ks
                .iter()
                .map(|&k| cell(k, s).converged_round.unwrap_or(u32::MAX))
                .collect();
            rounds.windows(2).all(|w| w[0] <= w[1])
        })
        .count();
    check(
        spread <= 0.01 && monotone >= 2,
        format!(
            "mean AUC-ROC K=3/6/10 {:.4}/{:.4}/{:.4}, spread {spread:.4} (≤ 0.01); convergence non-decreasing in {monotone}/3 seeds (≥ 2)",
            means[0], means[1], means[2]
        ),
    )
}

fn communication_accounting() -> Outcome {
    let base = ExperimentConfig {
        max_rounds: 2,
        early_stop: false,
        ..ExperimentConfig::default()
    };
    let raw = load_dataset(&base.dataset).map_err(err)?;
    let ratios = [0.25, 0.5, 0.75, 1.0];
    let rows = compare_overhead(&base, &ratios, &raw).map_err(err)?;
    let mut ok = rows.len() == ratios.len();
    let mut parts = Vec::new();
    for (row, &ratio) in rows.iter().zip(&ratios) {
        let expected_bytes = 8 * base.batch_size as u64 * row.feature_dim as u64;
        ok &= row.ratio == ratio && row.normalized_payload == ratio && row.feature_payload_bytes == expected_bytes;
        parts.push(format!(
            "{}→{} ({} B)",
            row.ratio, row.normalized_payload, row.feature_payload_bytes
        ));
    }
    check(ok, format!("normalized feature payload on d=20: {}", parts.join(", ")))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    let mut logs = Vec::new();
    for dir in &dirs {
        let cfg = ExperimentConfig {
            parallel: false,
            output_dir: Some(dir.path().to_path_buf()),
            ..synthetic_config()
        };
        run_experiment(&cfg).map_err(err)?;
        logs.push(std::fs::read(dir.path().join("metrics.jsonl")).map_err(err)?);
    }
    check(
        !logs[0].is_empty() && logs[0] == logs[1],
        format!(
            "metrics.jsonl {} bytes, identical across runs: {}",
            logs[0].len(),
            logs[0] == logs[1]
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let criteria: [Criterion; 10] = [
        ("gradient integrity", gradient_integrity),
        ("split/fused equivalence", split_fused_equivalence),
        ("DP mechanism", dp_mechanism),
        ("AUC oracles", auc_oracles),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("Spambase desk-scale", spambase),
        ("Shuttle desk-scale with DP", shuttle_with_dp),
        ("scalability over K", shuttle_scalability),
        ("communication accounting", communication_accounting),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
