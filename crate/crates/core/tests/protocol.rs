use fedanomaly_core::data::synth;
use fedanomaly_core::numerics::max_param_diff;
use fedanomaly_core::protocol::{download_bytes_per_device, upload_bytes_per_device};
use fedanomaly_core::{
    build_federation, detect, evaluate, load_dataset, make_split, prepare, run_experiment, run_experiment_on,
    run_round, Dataset, ExperimentConfig, Federation, RoundOptions, RoundRecord, SynthConfig,
};

fn small_synth() -> ExperimentConfig {
    ExperimentConfig {
        dataset: fedanomaly_core::DataSource::Synthetic(SynthConfig {
            normals: 1500,
            anomalies: 100,
            ..SynthConfig::default()
        }),
        ..ExperimentConfig::default()
    }
}

fn federation(cfg: &ExperimentConfig) -> Federation {
    let raw = load_dataset(&cfg.dataset).unwrap();
    build_federation(cfg, &prepare(cfg, &raw).unwrap()).unwrap()
}

fn rounds(cfg: &ExperimentConfig, n: usize) -> Vec<RoundRecord> {
    let mut fed = federation(cfg);
    let opts = RoundOptions {
        participation_rate: cfg.participation_rate,
        parallel: cfg.parallel,
        seed: cfg.seed,
    };
    (0..n)
        .map(|_| {
            let mut r = run_round(&mut fed.devices, &mut fed.coordinator, &opts).unwrap();
            r.wall_time_ms = 0.0;
            r
        })
        .collect()
}

#[test]
fn fifty_rounds_replay_bitwise() {
    let cfg = small_synth();
    let a = rounds(&cfg, 50);
    let b = rounds(&cfg, 50);
    let bits = |rs: &[RoundRecord]| -> Vec<u64> { rs.iter().map(|r| r.global_loss.unwrap().to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
}

#[test]
fn parallel_devices_match_sequential() {
    let cfg = ExperimentConfig {
        devices: 5,
        participation_rate: 0.6,
        dp: fedanomaly_core::DpConfig {
            enabled: true,
            ..Default::default()
        },
        ..small_synth()
    };
    let seq = rounds(&cfg, 30);
    let par = rounds(&ExperimentConfig { parallel: true, ..cfg }, 30);
    assert_eq!(seq, par);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let cfg = ExperimentConfig {
        learning_rate: 0.0,
        ..small_synth()
    };
    let mut fed = federation(&cfg);
    let enc: Vec<_> = fed.devices.iter().map(|d| d.learner().clone()).collect();
    let sc = fed.coordinator.scorer().clone();
    for _ in 0..5 {
        run_round(&mut fed.devices, &mut fed.coordinator, &RoundOptions::default()).unwrap();
    }
    for (d, before) in fed.devices.iter().zip(&enc) {
        assert_eq!(max_param_diff(d.learner(), before), 0.0);
    }
    assert_eq!(max_param_diff(fed.coordinator.scorer(), &sc), 0.0);
    // Same parameters and same held-out rows give the same evaluation.
    assert_eq!(evaluate(&fed).unwrap(), evaluate(&fed).unwrap());
}

#[test]
fn byte_counts_are_exact() {
    for (ratio, m) in [(0.25, 5), (0.5, 10), (1.0, 20)] {
        let cfg = ExperimentConfig {
            feature_ratio: ratio,
            ..small_synth()
        };
        let recs = rounds(&cfg, 2);
        let k = cfg.devices as u64;
        let b = cfg.batch_size;
        for r in &recs {
            assert_eq!(r.bytes_uploaded, k * upload_bytes_per_device(b, m) as u64);
            assert_eq!(r.bytes_downloaded, k * download_bytes_per_device(b, m) as u64);
            assert_eq!(r.feature_payload_bytes, k * 8 * (b * m) as u64);
        }
    }
    // Halving m halves the feature payload.
    let full = rounds(&ExperimentConfig { feature_ratio: 1.0, ..small_synth() }, 1)[0].feature_payload_bytes;
    let half = rounds(&ExperimentConfig { feature_ratio: 0.5, ..small_synth() }, 1)[0].feature_payload_bytes;
    assert_eq!(2 * half, full);
}

#[test]
fn no_participants_leaves_loss_undefined() {
    let cfg = ExperimentConfig {
        participation_rate: 1e-9,
        ..small_synth()
    };
    let recs = rounds(&cfg, 3);
    assert!(recs.iter().all(|r| r.global_loss.is_none() && r.bytes_uploaded == 0));
}

/// Trains on synthetic data in which one held-out normal row has been moved
/// 10σ away from its cluster (alternating signs per dimension, since a
/// uniform shift is removed by layer normalisation). Returns the detections
/// and the planted row.
fn planted_outlier_run() -> (Vec<fedanomaly_core::protocol::Detection>, usize, Vec<u8>, f64) {
    let synth = SynthConfig {
        normals: 2000,
        anomalies: 100,
        ..SynthConfig::default()
    };
    let cfg = ExperimentConfig {
        dataset: fedanomaly_core::DataSource::Synthetic(synth),
        learning_rate: 3e-4,
        max_rounds: 200,
        ..ExperimentConfig::default()
    };
    let raw = synth::generate(&synth).unwrap();
    let split = make_split(&raw, &cfg.split, cfg.seed).unwrap();
    let row = *split.test.iter().find(|&&i| raw.labels[i] == 0).unwrap();
    let centre = synth.cluster_centres().row(row % synth.clusters).to_vec();
    let mut features = raw.features.clone();
    for (k, (v, mu)) in features.row_mut(row).iter_mut().zip(&centre).enumerate() {
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        *v = mu + sign * 10.0 * synth.cluster_std;
    }
    let planted = Dataset::new("synthetic", features, raw.labels.clone()).unwrap();

    let prepared = prepare(&cfg, &planted).unwrap();
    let mut fed = build_federation(&cfg, &prepared).unwrap();
    let opts = RoundOptions::default();
    for _ in 0..cfg.max_rounds {
        run_round(&mut fed.devices, &mut fed.coordinator, &opts).unwrap();
    }
    let detections = detect(&fed.devices, &fed.coordinator, cfg.tau).unwrap();
    for d in &detections {
        assert_eq!(d.rows.len(), d.scores.len());
        assert_eq!(d.alerts.len(), d.scores.iter().filter(|&&s| s > cfg.tau).count());
    }
    (detections, row, raw.labels, cfg.tau)
}

#[test]
fn planted_outlier_outscores_every_normal() {
    let (detections, row, labels, _) = planted_outlier_run();
    let mut planted = None;
    let mut normal_max = f64::MIN;
    for d in &detections {
        for (&r, &s) in d.rows.iter().zip(&d.scores) {
            if r == row {
                planted = Some(s);
            } else if labels[r] == 0 {
                normal_max = normal_max.max(s);
            }
        }
    }
    let planted = planted.expect("planted row is held out");
    assert!(planted > normal_max, "planted {planted} vs normal max {normal_max}");
}

#[test]
fn planted_outlier_is_alerted() {
    let (detections, row, _, tau) = planted_outlier_run();
    let score = detections
        .iter()
        .flat_map(|d| d.rows.iter().zip(&d.scores))
        .find(|(&r, _)| r == row)
        .map(|(_, &s)| s)
        .unwrap();
    let alerted = detections.iter().flat_map(|d| &d.alerts).any(|a| a.row == row);
    assert!(alerted, "planted outlier scored {score}, not above tau {tau}");
}

#[test]
fn untrained_model_is_near_chance_on_balanced_data() {
    let cfg = ExperimentConfig {
        dataset: fedanomaly_core::DataSource::Synthetic(SynthConfig {
            normals: 1000,
            anomalies: 1000,
            ..SynthConfig::default()
        }),
        max_rounds: 0,
        ..ExperimentConfig::default()
    };
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.rounds_run, 0);
    assert_eq!(r.history.len(), 1);
    assert!((r.final_metrics.auc_roc - 0.5).abs() <= 0.15, "{}", r.final_metrics.auc_roc);
}

#[test]
fn checkpoint_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        max_rounds: 30,
        checkpoint_every: 10,
        output_dir: Some(dir.path().to_path_buf()),
        ..small_synth()
    };
    let raw = load_dataset(&cfg.dataset).unwrap();
    let r = run_experiment_on(&cfg, &raw).unwrap();
    for f in ["config.json", "manifest.json", "metrics.jsonl", "rounds.jsonl", "curve.csv", "run.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("checkpoints/round_20.ckpt").is_file());
    let again = fedanomaly_core::evaluate_run_dir(dir.path(), None).unwrap();
    assert_eq!(again.round, r.final_metrics.round);
    assert_eq!(again.auc_roc, r.final_metrics.auc_roc);
    assert_eq!(again.auc_pr, r.final_metrics.auc_pr);
    let rounds = std::fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 30);
}
