use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uhno::metrics::*;
use uhno::pde::{BurgersParams, DatasetHeader, GrfParams, PdeSpec, TrajectoryDataset};
use uhno::{Error, Result, Tensor64};

fn rand_field(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn sine(n: usize, k: f64, a: f64, shift: f64) -> Vec<f64> {
    (0..n).map(|i| a * (2.0 * PI * k * (i as f64 + shift) / n as f64).sin()).collect()
}

#[test]
fn rel_l2_reference_cases() {
    let u = rand_field(32, 1);
    assert_eq!(rel_l2(&u, &u).unwrap(), 0.0);
    assert!((rel_l2(&vec![0.0; 32], &u).unwrap() - 1.0).abs() < 1e-15);
    let u2: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
    assert!((rel_l2(&u2, &u).unwrap() - 1.0).abs() < 1e-15);
    assert!(matches!(rel_l2(&u, &vec![0.0; 32]), Err(Error::DegenerateReference(_))));
}

#[test]
fn rel_h1_reference_cases() {
    let s = [16usize];
    let u = rand_field(16, 2);
    assert_eq!(rel_h1(&u, &u, &s).unwrap(), 0.0);
    let c = vec![3.0; 16];
    let c_hat = vec![3.5; 16];
    assert!((rel_h1(&c_hat, &c, &s).unwrap() - rel_l2(&c_hat, &c).unwrap()).abs() < 1e-15);
}

#[test]
fn rel_h1_matches_stencil_oracle_for_shifted_sine() {
    let n = 64;
    let (k, a) = (3.0, 1.7);
    let u = sine(n, k, a, 0.0);
    let u_hat = sine(n, k, a, 0.4);
    // D sin(2 pi k (i+s)/n) = n sin(2 pi k/n) cos(2 pi k (i+s)/n), by the
    // difference-of-sines identity
    let d = |s: f64| -> Vec<f64> {
        (0..n)
            .map(|i| n as f64 * a * (2.0 * PI * k / n as f64).sin() * (2.0 * PI * k * (i as f64 + s) / n as f64).cos())
            .collect()
    };
    let (du, duh) = (d(0.0), d(0.4));
    let num: f64 = u.iter().zip(&u_hat).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
        + du.iter().zip(&duh).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let den: f64 = u.iter().map(|x| x * x).sum::<f64>() + du.iter().map(|x| x * x).sum::<f64>();
    let oracle = (num / den).sqrt();
    assert!((rel_h1(&u_hat, &u, &[n]).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn rel_h1_2d_uses_both_axes() {
    let n = 8;
    // varies along the second axis only
    let u: Vec<f64> = (0..n * n).map(|idx| (2.0 * PI * (idx % n) as f64 / n as f64).sin() + 2.0).collect();
    let mut loop_sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dy = (u[i * n + (j + 1) % n] - u[i * n + (j + n - 1) % n]) * n as f64 / 2.0;
            let dx = (u[((i + 1) % n) * n + j] - u[((i + n - 1) % n) * n + j]) * n as f64 / 2.0;
            loop_sum += dx * dx + dy * dy;
        }
    }
    assert!((grad_sq_norm(&u, &[n, n]).unwrap() - loop_sum).abs() < 1e-10);
}

fn naive_dft(u: &[f64], n: usize, dims: usize) -> Vec<(Vec<i64>, f64, f64)> {
    let signed = |j: usize| if j <= n / 2 { j as i64 } else { j as i64 - n as i64 };
    let mut out = vec![];
    let bins: Vec<Vec<usize>> = if dims == 1 {
        (0..n).map(|j| vec![j]).collect()
    } else {
        (0..n * n).map(|j| vec![j / n, j % n]).collect()
    };
    for b in bins {
        let (mut re, mut im) = (0.0, 0.0);
        for (x, v) in u.iter().enumerate() {
            let pos: Vec<usize> = if dims == 1 { vec![x] } else { vec![x / n, x % n] };
            let phase: f64 = b.iter().zip(&pos).map(|(k, p)| (k * p) as f64).sum::<f64>() * 2.0 * PI / n as f64;
            re += v * phase.cos();
            im -= v * phase.sin();
        }
        out.push((b.iter().map(|&j| signed(j)).collect(), re, im));
    }
    out
}

fn shell_oracle(u_hat: &[f64], u: &[f64], n: usize, dims: usize) -> [f64; 3] {
    let a = naive_dft(u_hat, n, dims);
    let b = naive_dft(u, n, dims);
    let (mut num, mut den) = ([0.0; 3], [0.0; 3]);
    for ((k, ar, ai), (_, br, bi)) in a.iter().zip(&b) {
        let r = k.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
        let s = if r < n as f64 / 6.0 {
            0
        } else if r < n as f64 / 3.0 {
            1
        } else {
            2
        };
        num[s] += (ar - br).powi(2) + (ai - bi).powi(2);
        den[s] += br * br + bi * bi;
    }
    [num[0] / den[0], num[1] / den[1], num[2] / den[2]]
}

#[test]
fn binned_spectral_error_matches_naive_dft_1d_and_2d() {
    let n = 16;
    let (u, u_hat) = (rand_field(n, 3), rand_field(n, 4));
    let got = binned_spectral_error(&u_hat, &u, &[n]).unwrap();
    let want = shell_oracle(&u_hat, &u, n, 1);
    for b in 0..3 {
        assert!((got[b] - want[b]).abs() < 1e-10, "band {b}: {} vs {}", got[b], want[b]);
    }
    let (u, u_hat) = (rand_field(n * n, 5), rand_field(n * n, 6));
    let got = binned_spectral_error(&u_hat, &u, &[n, n]).unwrap();
    let want = shell_oracle(&u_hat, &u, n, 2);
    for b in 0..3 {
        assert!((got[b] - want[b]).abs() < 1e-10);
    }
}

#[test]
fn band_isolation_and_identity() {
    let n = 32;
    let u = rand_field(n, 7);
    assert_eq!(binned_spectral_error(&u, &u, &[n]).unwrap(), [0.0; 3]);
    // k = 13 lies above n/3
    let bump = sine(n, 13.0, 0.3, 0.0);
    let u_hat: Vec<f64> = u.iter().zip(&bump).map(|(a, b)| a + b).collect();
    let e = binned_spectral_error(&u_hat, &u, &[n]).unwrap();
    assert!(e[0] < 1e-28 && e[1] < 1e-28, "{e:?}");
    assert!(e[2] > 1e-3);
}

#[test]
fn tiny_grid_leaves_band_empty() {
    let u = rand_field(2, 1);
    assert!(matches!(binned_spectral_error(&u, &u, &[2]), Err(Error::Config(_))));
}

#[test]
fn structure_function_of_sine_matches_closed_form_and_loop() {
    let n = 64;
    let (k, a) = (5.0, 0.8);
    let u = sine(n, k, a, 0.0);
    for r in default_lags(n) {
        let s = structure_function(&u, &[n], r).unwrap();
        let closed = 2.0 * a * a * (PI * k * r as f64 / n as f64).sin().powi(2);
        let looped: f64 = (0..n).map(|x| (u[(x + r) % n] - u[x]).powi(2)).sum::<f64>() / n as f64;
        assert!((s - closed).abs() < 1e-12 && (s - looped).abs() < 1e-12);
    }
}

#[test]
fn sf_error_cases() {
    let n = 64;
    let u = rand_field(n, 8);
    let lags = default_lags(n);
    assert_eq!(lags, vec![1, 2, 4, 8, 16, 32]);
    assert_eq!(sf_error(&u, &u, &[n], &lags).unwrap(), 0.0);
    assert!(matches!(sf_error(&u, &vec![1.0; n], &[n], &lags), Err(Error::DegenerateReference(_))));
    assert!(matches!(sf_error(&u, &u, &[n], &[64]), Err(Error::Config(_))));
    // loop oracle of the score
    let u_hat = rand_field(n, 9);
    let s = |v: &[f64], r: usize| (0..n).map(|x| (v[(x + r) % n] - v[x]).powi(2)).sum::<f64>() / n as f64;
    let num: f64 = lags.iter().map(|&r| (s(&u_hat, r) - s(&u, r)).abs()).sum();
    let den: f64 = lags.iter().map(|&r| s(&u, r)).sum();
    assert!((sf_error(&u_hat, &u, &[n], &lags).unwrap() - num / den).abs() < 1e-12);
    assert_eq!(default_lags(16), vec![1, 2, 4, 8]);
}

#[test]
fn energy_drift_cases() {
    let u = rand_field(16, 10);
    assert_eq!(energy_drift(&u, &u).unwrap(), 0.0);
    let s: Vec<f64> = u.iter().map(|x| x * 2f64.sqrt()).collect();
    assert!((energy_drift(&s, &u).unwrap() - 1.0).abs() < 1e-14);
    assert_eq!(energy_drift(&vec![0.0; 16], &u).unwrap(), 1.0);
    assert!(energy_drift(&u, &vec![0.0; 16]).is_err());
}

#[test]
fn crash_detect_fires_on_each_criterion() {
    let u0 = rand_field(16, 11);
    let truth: Vec<Vec<f64>> = (0..5).map(|_| u0.clone()).collect();
    assert!(!crash_detect(&truth, &truth, &u0));
    let mut nan = truth.clone();
    nan[2][4] = f64::NAN;
    assert_eq!(crash_step(&nan, &truth, &u0), Some(3));
    let mut inf = truth.clone();
    inf[1][0] = f64::NEG_INFINITY;
    assert!(crash_detect(&inf, &truth, &u0));
    let mut big = truth.clone();
    big[3] = u0.iter().map(|x| 1500.0 * x).collect();
    assert_eq!(crash_step(&big, &truth, &u0), Some(4));
    // growth 12x: under the ratio rule, over the relL2 rule
    let mut far = truth.clone();
    far[0] = u0.iter().map(|x| -11.0 * x).collect();
    assert_eq!(crash_step(&far, &truth, &u0), Some(1));
    let mut near = truth.clone();
    near[0] = u0.iter().map(|x| 9.0 * x).collect();
    assert!(!crash_detect(&near, &truth, &u0));
}

#[test]
fn bootstrap_of_constant_is_degenerate() {
    let (lo, hi) = bootstrap_ci(&[2.5; 7], 500, 0.95, 3).unwrap();
    assert_eq!((lo, hi), (2.5, 2.5));
    assert!(bootstrap_ci(&[], 10, 0.95, 0).is_err());
}

#[test]
fn bootstrap_matches_enumerated_resampling_distribution() {
    let xs = [0.0, 1.0, 2.0, 4.0];
    let n = xs.len();
    // exact law of the resample mean over all n^n index tuples
    let mut atoms: Vec<f64> = vec![];
    for code in 0..n.pow(n as u32) {
        let mut c = code;
        let mut s = 0.0;
        for _ in 0..n {
            s += xs[c % n];
            c /= n;
        }
        atoms.push(s / n as f64);
    }
    atoms.sort_by(f64::total_cmp);
    let total = atoms.len() as f64;
    let cdf = |v: f64| atoms.iter().filter(|&&a| a <= v).count() as f64 / total;
    let q = |p: f64| *atoms.iter().find(|&&a| cdf(a) >= p).unwrap();
    let (want_lo, want_hi) = (q(0.025), q(0.975));
    // the oracle is only sharp when no cdf jump sits near the cut points
    for a in &atoms {
        for p in [0.025, 0.975] {
            assert!((cdf(*a) - p).abs() > 0.004);
        }
    }
    let (lo, hi) = bootstrap_ci(&xs, 40_000, 0.95, 17).unwrap();
    assert_eq!((lo, hi), (want_lo, want_hi));
}

#[test]
fn bootstrap_is_seed_deterministic() {
    let xs = rand_field(20, 12);
    assert_eq!(bootstrap_ci(&xs, 1000, 0.95, 5).unwrap(), bootstrap_ci(&xs, 1000, 0.95, 5).unwrap());
    assert_ne!(bootstrap_ci(&xs, 1000, 0.95, 5).unwrap(), bootstrap_ci(&xs, 1000, 0.95, 6).unwrap());
}

#[test]
fn bootstrap_coverage_near_nominal() {
    let (mu, sd, n) = (1.3, 2.0, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut hits = 0;
    for rep in 0..200 {
        let xs: Vec<f64> = (0..n).map(|_| mu + sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let (lo, hi) = bootstrap_ci(&xs, 10_000, 0.95, rep).unwrap();
        if lo <= mu && mu <= hi {
            hits += 1;
        }
    }
    let cov = hits as f64 / 200.0;
    assert!((cov - 0.95).abs() <= 0.03, "coverage {cov}");
}

#[test]
fn wilson_interval_reference_values() {
    let (lo, hi) = wilson_interval(5, 10, Z95);
    assert!((lo - 0.236_593).abs() < 1e-5 && (hi - 0.763_407).abs() < 1e-5);
    let (lo, hi) = wilson_interval(0, 10, Z95);
    assert_eq!(lo, 0.0);
    assert!((hi - 0.277_532).abs() < 1e-5);
}

fn toy_dataset(frames: &[Vec<Vec<f64>>], n: usize) -> TrajectoryDataset {
    let spec = PdeSpec::Burgers(BurgersParams { n, snapshots: frames[0].len(), ..Default::default() });
    TrajectoryDataset {
        header: DatasetHeader {
            format: uhno::pde::DATASET_FORMAT.into(),
            spec: spec.clone(),
            grf: GrfParams::default(),
            n_traj: frames.len(),
            snapshots: frames[0].len(),
            channels: 1,
            spatial: vec![n],
            dx: 1.0 / n as f64,
            dt_solver: 1e-4,
            dt_snapshot: 0.02,
            seed: 0,
            first_index: 0,
            extras: vec![vec![]; frames.len()],
        },
        data: frames.iter().flatten().flatten().copied().collect(),
    }
}

struct Scale(f64);

impl RolloutModel for Scale {
    fn label(&self) -> String {
        format!("scale{}", self.0)
    }
    fn step(&self, x: &Tensor64) -> Result<Tensor64> {
        Ok(x.map(|v| v * self.0))
    }
}

#[test]
fn rollout_hand_computed_micro_case() {
    let n = 16;
    let a = rand_field(n, 20);
    let b = sine(n, 2.0, 1.0, 0.3);
    // stationary trajectories, so step t of the doubling model has relL2 2^t - 1
    let ds = toy_dataset(&[vec![a.clone(); 4], vec![b.clone(); 4]], n);
    let mut opts = EvalOptions::new(3);
    opts.bootstrap_resamples = 200;
    let r = rollout_evaluate(&Scale(2.0), &ds, &opts).unwrap();
    assert_eq!(r.n_crashed, 0);
    assert!((r.rel_l2.unwrap() - 11.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.step_rel_l2.len(), 3);
    for (t, v) in r.step_rel_l2.iter().enumerate() {
        assert!((v - (2f64.powi(t as i32 + 1) - 1.0)).abs() < 1e-12);
    }
    assert!((r.energy_drift.unwrap() - 63.0).abs() < 1e-10);
    // rel H1 of a scaled field equals its rel L2
    assert!((r.rel_h1.unwrap() - 11.0 / 3.0).abs() < 1e-12);
    let ms = |u: &[f64]| u.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let want_mse = (ms(&a) + ms(&b)) / 2.0 * (1.0 + 9.0 + 49.0) / 3.0;
    assert!((r.rollout_mse.unwrap() - want_mse).abs() < 1e-12);
    r.validate().unwrap();
}

#[test]
fn rollout_oracle_identity_and_crash() {
    let spec = PdeSpec::Burgers(BurgersParams { n: 32, snapshots: 6, ..Default::default() });
    let ds = TrajectoryDataset::generate(&spec, &GrfParams::default(), 4, 0, 0).unwrap();
    let mut opts = EvalOptions::new(5);
    opts.bootstrap_resamples = 200;
    let r = rollout_evaluate(&LookupModel::new(&ds), &ds, &opts).unwrap();
    assert_eq!(r.crash_rate, 0.0);
    for (name, m, _) in r.estimates() {
        assert_eq!(m.unwrap(), 0.0, "{name}");
    }
    let id = rollout_evaluate(&IdentityModel, &ds, &opts).unwrap();
    assert!(id.rel_l2.unwrap() > 0.0);
    id.validate().unwrap();
    // 100x per step: the norm ratio passes 1e3 at step 2
    let boom = rollout_evaluate(&Scale(100.0), &ds, &opts).unwrap();
    assert_eq!(boom.crash_rate, 1.0);
    assert!(boom.rel_l2.is_none() && boom.crash_rate_ci[1] == 1.0);
    boom.validate().unwrap();
    let json = boom.to_json().unwrap();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, boom);
    assert!(rollout_evaluate(&IdentityModel, &ds, &EvalOptions::new(6)).is_err());
}

#[test]
fn report_validator_rejects_broken_records() {
    let spec = PdeSpec::Burgers(BurgersParams { n: 32, snapshots: 3, ..Default::default() });
    let ds = TrajectoryDataset::generate(&spec, &GrfParams::default(), 3, 0, 0).unwrap();
    let mut opts = EvalOptions::new(2);
    opts.bootstrap_resamples = 100;
    let r = rollout_evaluate(&IdentityModel, &ds, &opts).unwrap();
    let mut bad = r.clone();
    bad.rel_l2_ci = Some([10.0, 11.0]);
    assert!(bad.validate().is_err());
    let mut bad = r.clone();
    bad.sf_error = None;
    assert!(bad.validate().is_err());
    let mut bad = r;
    bad.schema = "other".into();
    assert!(bad.validate().is_err());
}
