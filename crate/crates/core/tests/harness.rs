use std::collections::BTreeSet;

use metasched::harness::{
    initial_model, no_observer, replay_train, run_training, EpochSnapshot, Experiment,
    MetricsRecord, RunConfig, TrajectoryLog,
};
use metasched::losses::{resolve_sigma, TemperatureMode, SIGMA_MIN};
use metasched::nn::mean_loss_and_grad;
use metasched::DataParamState;

fn config(extra: &[&str]) -> RunConfig {
    let mut over: Vec<String> = [
        "data.classes=4",
        "data.dims=6",
        "data.train_per_class=50",
        "data.meta_per_class=5",
        "data.test_per_class=20",
        "model.widths=16",
        "train.epochs=8",
        "train.batch_size=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    over.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::parse_with_overrides("", &over).unwrap()
}

fn assert_metrics_equal(a: &[MetricsRecord], b: &[MetricsRecord]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        let pairs = [
            (x.train_loss, y.train_loss),
            (x.train_acc, y.train_acc),
            (x.test_acc.unwrap(), y.test_acc.unwrap()),
            (x.lambda_wd, y.lambda_wd),
        ];
        for (u, v) in pairs {
            assert!((u - v).abs() <= 1e-12, "epoch {}: {u} vs {v}", x.epoch);
        }
        assert_eq!(x.train_grad_evals, y.train_grad_evals);
    }
}

#[test]
fn full_batch_single_epoch_is_one_sgd_step() {
    let cfg = config(&["mode=none", "train.epochs=1", "train.batch_size=1000"]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let out = run_training(&cfg, &exp, &mut no_observer).unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.metrics[0].train_grad_evals, exp.train.len() as u64);

    let theta0 = initial_model(&cfg, &exp).unwrap();
    let (x, y) = exp.dataset.gather(&exp.train, false);
    let g = mean_loss_and_grad(&theta0, &x, &y).unwrap().1;
    for ((t0, gi), t1) in theta0.values().iter().zip(&g).zip(out.model.values()) {
        let expected = t0 - cfg.lr * (gi + cfg.wd_init * t0);
        assert!((expected - t1).abs() <= 1e-12);
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = config(&["mode=instance", "noise.p=0.3"]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let a = run_training(&cfg, &exp, &mut no_observer).unwrap();
    let b = run_training(&cfg, &exp, &mut no_observer).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.dps, b.dps);
    assert_eq!(a.trajectory, b.trajectory);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(MetricsRecord { wall_ms: 0.0, ..x.clone() }, MetricsRecord { wall_ms: 0.0, ..y.clone() });
    }
}

#[test]
fn meta_and_baseline_use_the_same_train_budget() {
    let meta = config(&["mode=instance"]);
    let base = config(&["mode=none"]);
    let exp = Experiment::prepare(&meta).unwrap();
    let a = run_training(&meta, &exp, &mut no_observer).unwrap();
    let b = run_training(&base, &exp, &mut no_observer).unwrap();
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.train_grad_evals, y.train_grad_evals);
    }
    assert!(a.final_record().meta_samples > 0);
    assert_eq!(b.final_record().meta_samples, 0);
}

#[test]
fn meta_set_is_clean_and_disjoint() {
    let cfg = config(&["mode=instance", "noise.p=0.6"]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let train: BTreeSet<_> = exp.train.iter().copied().collect();
    assert!(exp.meta.iter().all(|i| !train.contains(i)));
    assert!(exp.test.iter().all(|i| !train.contains(i)));
    for &i in exp.meta.iter().chain(&exp.test) {
        assert_eq!(exp.dataset.labels[i], exp.dataset.true_labels[i]);
    }
    let corrupted = exp.corrupted_train();
    assert!(!corrupted.is_empty());
    assert!(corrupted.iter().all(|i| train.contains(i)));
    for &i in &exp.train {
        if !corrupted.contains(&i) {
            assert_eq!(exp.dataset.labels[i], exp.dataset.true_labels[i]);
        }
    }
}

#[test]
fn unit_replay_matches_plain_sgd_metrics() {
    let cfg = config(&["mode=none"]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let base = run_training(&cfg, &exp, &mut no_observer).unwrap();
    let dps = DataParamState::new(exp.dataset.len(), exp.n_classes(), metasched::WeightMode::None, cfg.wd_init);
    let ones = TrajectoryLog {
        epochs: vec![EpochSnapshot::capture(&dps); cfg.epochs],
    };
    let replayed = replay_train(&cfg.with_overrides(&["mode=instance".into()]).unwrap(), &exp, &ones, &mut no_observer).unwrap();
    assert_metrics_equal(&base.metrics, &replayed.metrics);
}

#[test]
fn replayed_noisy_schedule_keeps_corrupt_rates_low() {
    let cfg = config(&[
        "mode=instance",
        "noise.p=0.4",
        "train.epochs=20",
        "data.meta_per_class=10",
        "data.spread=1.0",
    ]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let learned = run_training(&cfg, &exp, &mut no_observer).unwrap();
    let pool = exp.with_sets(exp.train.clone(), Vec::new());
    let replayed = replay_train(&cfg, &pool, &learned.trajectory, &mut no_observer).unwrap();
    assert!(replayed.metrics.iter().all(|r| r.meta_samples == 0));

    let corrupted = exp.corrupted_train();
    for (e, snap) in learned.trajectory.epochs.iter().enumerate().skip(5) {
        let (mut clean, mut corrupt) = (Vec::new(), Vec::new());
        for &i in &exp.train {
            let w = snap.instance_weight(i);
            if corrupted.contains(&i) { corrupt.push(w) } else { clean.push(w) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&corrupt) < mean(&clean), "epoch {e}");
        let r = &replayed.metrics[e];
        assert!((r.w_corrupt_mean.unwrap() - mean(&corrupt)).abs() <= 1e-12);
        assert!((r.w_clean_mean.unwrap() - mean(&clean)).abs() <= 1e-12);
    }
}

#[test]
fn temperature_run_keeps_sigma_above_floor() {
    for mode in ["class", "instance", "joint"] {
        let cfg = config(&[
            "meta.formulation=temperature",
            "mode=none",
            &format!("temperature.mode={mode}"),
            "temperature.lr=0.5",
        ]);
        let exp = Experiment::prepare(&cfg).unwrap();
        let out = run_training(&cfg, &exp, &mut no_observer).unwrap();
        let class = out.dps.sigma_class.clone().unwrap_or_default();
        let inst = out.dps.sigma_inst.clone().unwrap_or_default();
        match mode {
            "class" => assert!(class.iter().all(|&s| s >= SIGMA_MIN) && inst.is_empty()),
            "instance" => assert!(inst.iter().all(|&s| s >= SIGMA_MIN) && class.is_empty()),
            _ => {
                assert!(class.iter().all(|&s| s >= SIGMA_MIN));
                for &i in &exp.train {
                    let y = exp.dataset.labels[i];
                    let r = resolve_sigma(TemperatureMode::Joint, y, i, &out.dps).unwrap();
                    assert!(r.value >= SIGMA_MIN);
                    assert_eq!(r.clamped, class[y] + inst[i] < SIGMA_MIN);
                }
            }
        }
        assert!(out.final_record().test_acc.unwrap() > 0.5, "{mode}");
        let moved = class.iter().chain(&inst).any(|&s| s != 1.0 && s != 0.0);
        assert!(moved, "{mode} temperatures never moved");
    }
}

#[test]
fn every_baseline_optimizer_trains() {
    for opt in ["sgd", "momentum", "adam", "adamw", "polyak_sgd", "lookahead_sgd"] {
        let lr = if opt.starts_with("adam") { "0.01" } else { "0.1" };
        let cfg = config(&["mode=none", &format!("train.optimizer={opt}"), &format!("train.lr={lr}")]);
        let exp = Experiment::prepare(&cfg).unwrap();
        let out = run_training(&cfg, &exp, &mut no_observer).unwrap();
        let acc = out.final_record().test_acc.unwrap();
        assert!(acc > 0.5, "{opt}: {acc}");
    }
}

#[test]
fn meta_modes_reject_non_sgd() {
    let err = RunConfig::parse_with_overrides("", &["mode=instance".into(), "train.optimizer=adam".into()]);
    assert!(err.is_err());
}

#[test]
fn lr_drop_schedule_is_applied() {
    let cfg = config(&["mode=none", "train.lr_drop_epochs=3,6"]);
    let exp = Experiment::prepare(&cfg).unwrap();
    let out = run_training(&cfg, &exp, &mut no_observer).unwrap();
    let lrs: Vec<f64> = out.metrics.iter().map(|r| r.lr).collect();
    assert_eq!(lrs[2], 0.1);
    assert!((lrs[3] - 0.01).abs() < 1e-15);
    assert!((lrs[6] - 0.001).abs() < 1e-15);
}
