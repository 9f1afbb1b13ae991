use uhno::metrics::EvalOptions;
use uhno::model::{AblationMode, ModelConfig, UhnoModel};
use uhno::pde::burgers::BurgersParams;
use uhno::pde::grf::GrfParams;
use uhno::pde::{PdeSpec, Task, TrajectoryDataset};
use uhno::trainer::*;
use uhno::{Error, Tensor64};

fn small_ds(n_traj: usize, first: u64) -> TrajectoryDataset {
    let spec = PdeSpec::Burgers(BurgersParams { n: 32, snapshots: 6, ..Default::default() });
    TrajectoryDataset::generate(&spec, &GrfParams::default(), n_traj, 0, first).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig::new(1, 2, 4, 4, 3)
}

fn quick_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 4,
        log_every: 5,
        angle_every: 10,
        angle_batch: 6,
        val_samples: 3,
        val_horizon: 2,
        ..TrainConfig::default()
    }
}

fn params_of(m: &UhnoModel) -> Vec<Vec<f64>> {
    m.params().iter().map(|p| p.data().to_vec()).collect()
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut p = vec![Tensor64::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let mut st = AdamState::new(&p);
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    adamw_step(&mut p, &[vec![0.0; 3]], &mut st, 1e-3, &cfg);
    assert_eq!(p[0].data(), &[1.0, -2.0, 0.5]);
    assert_eq!(st.t, 1);
}

#[test]
fn decay_alone_shrinks_by_lr_times_wd() {
    let mut p = vec![Tensor64::new(vec![2], vec![4.0, -1.5]).unwrap()];
    let mut st = AdamState::new(&p);
    let cfg = TrainConfig { weight_decay: 0.1, ..Default::default() };
    let lr = 0.01;
    adamw_step(&mut p, &[vec![0.0; 2]], &mut st, lr, &cfg);
    let f = 1.0 - lr * 0.1;
    assert_eq!(p[0].data(), &[4.0 * f, -1.5 * f]);
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let mut p = vec![Tensor64::new(vec![2], vec![0.0, 0.0]).unwrap()];
    let mut st = AdamState::new(&p);
    let cfg = TrainConfig { weight_decay: 0.0, eps: 0.0, ..Default::default() };
    adamw_step(&mut p, &[vec![3.0, -0.2]], &mut st, 0.05, &cfg);
    assert!((p[0].data()[0] + 0.05).abs() < 1e-15);
    assert!((p[0].data()[1] - 0.05).abs() < 1e-15);
}

#[test]
fn quadratic_converges_within_500_steps() {
    let target = [3.0, -1.0, 0.25];
    let mut p = vec![Tensor64::new(vec![3], vec![0.0; 3]).unwrap()];
    let mut st = AdamState::new(&p);
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    for _ in 0..500 {
        let g: Vec<f64> = p[0].data().iter().zip(&target).map(|(x, t)| x - t).collect();
        adamw_step(&mut p, &[g], &mut st, 0.05, &cfg);
    }
    for (x, t) in p[0].data().iter().zip(&target) {
        assert!((x - t).abs() < 1e-2, "{x} vs {t}");
    }
}

#[test]
fn schedule_endpoints_and_continuity() {
    let cfg = TrainConfig { steps: 2000, ..Default::default() };
    assert_eq!(cfg.warmup_steps(), 100);
    assert_eq!(TrainConfig { steps: 20_000, ..Default::default() }.warmup_steps(), 1000);
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert!((lr_schedule(50, &cfg) - 5e-4).abs() < 1e-18);
    assert_eq!(lr_schedule(100, &cfg), 1e-3);
    assert!(lr_schedule(2000, &cfg).abs() < 1e-18);
    assert!((lr_schedule(1050, &cfg) - 5e-4).abs() < 1e-15);
    let (a, b) = (lr_schedule(99, &cfg), lr_schedule(101, &cfg));
    assert!((a - 1e-3).abs() < 2e-5 && (b - 1e-3).abs() < 1e-8);
    for s in 100..2000 {
        assert!(lr_schedule(s + 1, &cfg) <= lr_schedule(s, &cfg));
    }
}

#[test]
fn grad_angles() {
    let a = [1.0, 2.0, 0.0];
    assert!(grad_angle(&a, &[2.0, 4.0, 0.0]).unwrap().abs() < 1e-12);
    assert!((grad_angle(&a, &[-1.0, -2.0, 0.0]).unwrap() - 180.0).abs() < 1e-12);
    assert!((grad_angle(&[1.0, 0.0], &[0.0, 5.0]).unwrap() - 90.0).abs() < 1e-12);
    // shorter vector zero-padded
    assert!((grad_angle(&[1.0], &[1.0, 1.0]).unwrap() - 45.0).abs() < 1e-12);
    assert_eq!(grad_angle(&[0.0, 0.0], &[1.0]), None);
}

#[test]
fn presets_follow_task_table() {
    assert_eq!(task_model_config(Task::Burgers).k0, 24);
    assert_eq!(task_model_config(Task::Ks).k0, 32);
    assert_eq!(task_model_config(Task::Ns2d).k0, 12);
    assert_eq!(task_model_config(Task::Ns2d).dims, 2);
    assert_eq!(task_loss_weights(Task::Advection).lambda_cbc, 3e-3);
    assert_eq!(task_loss_weights(Task::AllenCahn).lambda_cbc, 5e-3);
    assert_eq!(TrainConfig::desk(Task::Kdv).batch, 32);
    assert_eq!(TrainConfig::desk(Task::Advection).batch, 16);
    assert_eq!(TrainConfig::paper(Task::Burgers).steps, 20_000);
    assert!(TrainConfig { warmup: Some(10), steps: 10, ..Default::default() }.validate().is_err());
}

#[test]
fn csv_round_trip() {
    let mut log = DiagnosticsLog::default();
    log.push(0, "loss_total", "train", "", 0.1 + 0.2);
    log.push(200, "band_error", "val", "high", 1e-17);
    log.push(200, "val_rel_l2", "val", "", f64::NAN);
    let back = DiagnosticsLog::parse_csv(&log.to_csv()).unwrap();
    assert_eq!(back.rows.len(), 3);
    assert_eq!(back.rows[0], log.rows[0]);
    assert_eq!(back.rows[1], log.rows[1]);
    assert!(back.rows[2].value.is_nan());
    assert!(DiagnosticsLog::parse_csv("a,b\n").is_err());
}

#[test]
fn training_is_deterministic_and_resumes_exactly() {
    let (tr, va) = (small_ds(6, 0), small_ds(3, 6));
    let cfg = quick_cfg(12);
    let (a, la) = train::<f64>(&small_model(), &tr, Some(&va), &cfg).unwrap();
    let (b, lb) = train::<f64>(&small_model(), &tr, Some(&va), &cfg).unwrap();
    assert_eq!(params_of(&a), params_of(&b));
    assert_eq!(la.to_csv(), lb.to_csv());
    assert_ne!(params_of(&a), params_of(&UhnoModel::new(small_model(), 0).unwrap()));

    // interrupt at 7 steps, reload from disk, continue
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.bin");
    let mut t = Trainer::<f64>::new(UhnoModel::new(small_model(), 0).unwrap(), cfg.clone(), &tr, Some(&va)).unwrap();
    t.run_until(7).unwrap();
    t.save_checkpoint(&ck).unwrap();
    let first = t.log.clone();
    let (m, h, mom) = UhnoModel::<f64>::load(&ck).unwrap();
    let (mm, vv) = mom.unwrap();
    let adam = AdamState { m: mm, v: vv, t: h.optimizer_steps.unwrap() };
    let mut r = Trainer::new(m, cfg, &tr, Some(&va)).unwrap().resume(h.step as usize, adam).unwrap();
    r.run().unwrap();
    assert_eq!(params_of(&r.model), params_of(&a));
    let mut joined = first;
    joined.extend(r.log);
    assert_eq!(joined.to_csv(), la.to_csv());
}

#[test]
fn logs_carry_every_diagnostic() {
    let (tr, va) = (small_ds(6, 0), small_ds(3, 6));
    let (_, log) = train::<f64>(&small_model(), &tr, Some(&va), &quick_cfg(10)).unwrap();
    assert_eq!(log.series("loss_total", "train", "").len(), 10);
    assert_eq!(log.series("band_error", "val", "mid").iter().map(|r| r.0).collect::<Vec<_>>(), [0, 5, 10]);
    assert_eq!(log.series("hparam", "train", "lambda_cbc")[0].1, 5e-3);
    let angles: Vec<_> = log.rows.iter().filter(|r| r.quantity == "grad_angle").collect();
    assert!(!angles.is_empty());
    assert!(angles.iter().all(|r| (r.step == 0 || r.step == 10) && (0.0..=180.0).contains(&r.value)));
    // one histogram per routed block and logging step sums to the sample count
    let h: f64 = log
        .rows
        .iter()
        .filter(|r| r.quantity == "contrast_hist" && r.step == 5)
        .map(|r| r.value)
        .sum();
    let blocks = log.rows.iter().filter(|r| r.quantity == "val_rho" && r.step == 5 && r.bin == "mean").count();
    assert!(blocks > 0);
    assert_eq!(h, (3 * blocks) as f64);
    for r in log.rows.iter().filter(|r| r.quantity.ends_with("rho")) {
        assert!((0.1..=0.9).contains(&r.value), "{r:?}");
    }
}

#[test]
fn mse_only_mode_weights_are_zero() {
    let tr = small_ds(4, 0);
    let cfg = quick_cfg(3);
    let model = small_model().with_mode(AblationMode::MseOnly);
    let (_, log) = train::<f64>(&model, &tr, None, &cfg).unwrap();
    for q in ["loss_h1_weighted", "loss_cbc_weighted"] {
        assert!(log.series(q, "train", "").iter().all(|r| r.1 == 0.0));
    }
    let total = log.series("loss_total", "train", "");
    let mse = log.series("loss_mse", "train", "");
    assert_eq!(total, mse);
}

#[test]
fn no_spar_mode_logs_no_routing() {
    let tr = small_ds(4, 0);
    let (_, log) = train::<f64>(&small_model().with_mode(AblationMode::NoSpar), &tr, Some(&tr), &quick_cfg(3)).unwrap();
    assert!(!log.rows.iter().any(|r| r.quantity.contains("rho") || r.quantity == "contrast_hist"));
}

#[test]
fn nan_aborts_with_dump() {
    let tr = small_ds(4, 0);
    let dir = tempfile::tempdir().unwrap();
    let mut m = UhnoModel::new(small_model(), 0).unwrap();
    m.params_mut()[0].data_mut()[0] = f64::NAN;
    let mut t = Trainer::<f64>::new(m, quick_cfg(3), &tr, None).unwrap().with_dump_dir(dir.path());
    match t.run() {
        Err(Error::Numerical(msg)) => assert!(msg.contains("step 0"), "{msg}"),
        other => panic!("expected numerical error, got {other:?}"),
    }
    let dump: NanDump = serde_json::from_str(&std::fs::read_to_string(dir.path().join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump.step, 0);
    assert!(!dump.nonfinite_grads.is_empty() || dump.loss[0].is_none());
}

#[test]
fn ablation_suite_reports_factors() {
    let (tr, te) = (small_ds(4, 0), small_ds(3, 4));
    let mut eval = EvalOptions::new(3);
    eval.bootstrap_resamples = 100;
    let mut seen = 0;
    let table = run_ablation_suite::<f64>(
        &small_model(),
        &tr,
        &te,
        &[AblationMode::Full, AblationMode::NoLocal],
        &[0, 1],
        &quick_cfg(2),
        &eval,
        |_, _, _, _, r| {
            seen += 1;
            r.validate()
        },
    )
    .unwrap();
    assert_eq!(seen, 4);
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.degradation("rel_l2", AblationMode::Full, 1), Some(1.0));
    assert!(table.degradation("rel_l2", AblationMode::NoLocal, 0).unwrap() > 0.0);
    let grid = table.grid_csv();
    assert_eq!(grid.lines().count(), 5);
    let head: Vec<&str> = grid.lines().next().unwrap().split(',').collect();
    let col = |name: &str| head.iter().position(|h| *h == name).unwrap();
    for line in grid.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let seed: u64 = f[col("seed")].parse().unwrap();
        let full: Vec<&str> = grid
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|g| g[col("mode")] == "full" && g[col("seed")] == f[col("seed")])
            .unwrap();
        for m in GRID_METRICS {
            let ratio = f[col(m)].parse::<f64>().unwrap() / full[col(m)].parse::<f64>().unwrap();
            assert_eq!(f[col(&format!("{m}_factor"))].parse::<f64>().unwrap(), ratio, "{m} seed {seed}");
        }
    }
    assert!(grid.lines().nth(1).unwrap().starts_with("burgers,full,Full,0,"));
}
