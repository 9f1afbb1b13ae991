//! Rollout evaluation: field errors, spectral and structure-function
//! scores, crash detection and bootstrap intervals.
//!
//! Fields are flat `f64` slices laid out `[channels, space...]`; the channel
//! count is inferred from the spatial extents. Gradients use the same
//! central circular difference as the training loss, scaled by `N/2`.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::model::UhnoModel;
use crate::pde::fourier::{wavenumber, Fourier, C64};
use crate::pde::TrajectoryDataset;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CRASH_GROWTH: f64 = 1e3;
pub const CRASH_REL_L2: f64 = 10.0;
pub const SF_LAGS: [usize; 6] = [1, 2, 4, 8, 16, 32];

fn sq(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum()
}

fn diff_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(dim_err!("fields of {} and {} values", a.len(), b.len()));
    }
    Ok(())
}

fn channels(len: usize, spatial: &[usize]) -> Result<usize> {
    let s: usize = spatial.iter().product();
    if spatial.is_empty() || spatial.len() > 2 || s == 0 || len % s != 0 {
        return Err(dim_err!("{} values do not tile spatial extents {:?}", len, spatial));
    }
    Ok(len / s)
}

fn degenerate(what: &str) -> Error {
    Error::DegenerateReference(format!("{what} of the reference is zero"))
}

pub fn rel_l2(u_hat: &[f64], u: &[f64]) -> Result<f64> {
    same_len(u_hat, u)?;
    let den = sq(u);
    if den == 0.0 {
        return Err(degenerate("L2 norm"));
    }
    Ok((diff_sq(u_hat, u) / den).sqrt())
}

/// `sum_d sum_x (D_d u)^2` with `D_d u = (u[x+1] - u[x-1]) N_d / 2`.
pub fn grad_sq_norm(u: &[f64], spatial: &[usize]) -> Result<f64> {
    let c = channels(u.len(), spatial)?;
    let per: usize = spatial.iter().product();
    let mut total = 0.0;
    for ch in 0..c {
        let f = &u[ch * per..(ch + 1) * per];
        for (ax, &n) in spatial.iter().enumerate() {
            let stride: usize = spatial[ax + 1..].iter().product();
            let scale = n as f64 / 2.0;
            for idx in 0..per {
                let i = (idx / stride) % n;
                let base = idx - i * stride;
                let fwd = f[base + ((i + 1) % n) * stride];
                let bwd = f[base + ((i + n - 1) % n) * stride];
                total += ((fwd - bwd) * scale).powi(2);
            }
        }
    }
    Ok(total)
}

pub fn rel_h1(u_hat: &[f64], u: &[f64], spatial: &[usize]) -> Result<f64> {
    same_len(u_hat, u)?;
    let e: Vec<f64> = u_hat.iter().zip(u).map(|(a, b)| a - b).collect();
    let den = sq(u) + grad_sq_norm(u, spatial)?;
    if den == 0.0 {
        return Err(degenerate("H1 norm"));
    }
    Ok(((sq(&e) + grad_sq_norm(&e, spatial)?) / den).sqrt())
}

/// Radius cut points between the low/mid/high shells: thirds of `N/2`.
pub fn band_edges(n: usize) -> [f64; 2] {
    [n as f64 / 6.0, n as f64 / 3.0]
}

/// Shell index of the bin with signed integer wavenumbers `k`.
pub fn band_of(k: &[i64], n: usize) -> usize {
    let r = k.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
    let [a, b] = band_edges(n);
    if r < a {
        0
    } else if r < b {
        1
    } else {
        2
    }
}

fn spectrum(u: &[f64], spatial: &[usize]) -> Result<Vec<C64>> {
    let c = channels(u.len(), spatial)?;
    let n = spatial[0];
    if spatial.iter().any(|&s| s != n) {
        return Err(dim_err!("spectral metrics need a square grid, got {:?}", spatial));
    }
    let per = u.len() / c;
    let mut f = Fourier::new(n, spatial.len());
    let mut out = Vec::with_capacity(u.len());
    for ch in 0..c {
        out.extend(f.forward_real(&u[ch * per..(ch + 1) * per]));
    }
    Ok(out)
}

/// `(E_low, E_mid, E_high)`: per shell, spectral error energy over reference
/// energy, summed over the full (two-sided) spectrum and all channels.
pub fn binned_spectral_error(u_hat: &[f64], u: &[f64], spatial: &[usize]) -> Result<[f64; 3]> {
    same_len(u_hat, u)?;
    let n = spatial[0];
    let dims = spatial.len();
    let (uh, ur) = (spectrum(u_hat, spatial)?, spectrum(u, spatial)?);
    let per: usize = spatial.iter().product();
    let mut band = vec![0usize; per];
    let mut count = [0usize; 3];
    for (idx, b) in band.iter_mut().enumerate() {
        let k: Vec<i64> = if dims == 1 {
            vec![wavenumber(idx, n)]
        } else {
            vec![wavenumber(idx / n, n), wavenumber(idx % n, n)]
        };
        *b = band_of(&k, n);
        count[*b] += 1;
    }
    if count.iter().any(|&c| c == 0) {
        return Err(config_err!("grid of {n} points leaves a spectral band empty"));
    }
    let (mut num, mut den) = ([0.0; 3], [0.0; 3]);
    for (i, (a, b)) in uh.iter().zip(&ur).enumerate() {
        let s = band[i % per];
        num[s] += (a - b).norm_sqr();
        den[s] += b.norm_sqr();
    }
    let mut out = [0.0; 3];
    for s in 0..3 {
        if den[s] == 0.0 {
            return Err(degenerate(&format!("spectral energy in band {s}")));
        }
        out[s] = num[s] / den[s];
    }
    Ok(out)
}

/// Lags of [`SF_LAGS`] shorter than the grid.
pub fn default_lags(n: usize) -> Vec<usize> {
    SF_LAGS.iter().copied().filter(|&r| r < n).collect()
}

/// `E_x |u(x + r) - u(x)|^2`, averaged over channels and, in 2D, over the
/// two axis-aligned lag directions.
pub fn structure_function(u: &[f64], spatial: &[usize], r: usize) -> Result<f64> {
    let c = channels(u.len(), spatial)?;
    let per: usize = spatial.iter().product();
    let mut total = 0.0;
    for ch in 0..c {
        let f = &u[ch * per..(ch + 1) * per];
        for (ax, &n) in spatial.iter().enumerate() {
            let stride: usize = spatial[ax + 1..].iter().product();
            for idx in 0..per {
                let i = (idx / stride) % n;
                let j = idx - i * stride + ((i + r) % n) * stride;
                total += (f[j] - f[idx]).powi(2);
            }
        }
    }
    Ok(total / (c * per * spatial.len()) as f64)
}

pub fn sf_error(u_hat: &[f64], u: &[f64], spatial: &[usize], lags: &[usize]) -> Result<f64> {
    same_len(u_hat, u)?;
    let n = *spatial.iter().min().unwrap_or(&0);
    if lags.is_empty() || lags.iter().any(|&r| r == 0 || r >= n) {
        return Err(config_err!("lags {:?} must lie in 1..{}", lags, n));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &r in lags {
        let s = structure_function(u, spatial, r)?;
        num += (structure_function(u_hat, spatial, r)? - s).abs();
        den += s;
    }
    if den == 0.0 {
        return Err(degenerate("structure function"));
    }
    Ok(num / den)
}

pub fn energy_drift(u_hat_t: &[f64], u_t: &[f64]) -> Result<f64> {
    same_len(u_hat_t, u_t)?;
    let e = sq(u_t);
    if e == 0.0 {
        return Err(degenerate("final energy"));
    }
    Ok((sq(u_hat_t) - e).abs() / e)
}

/// Mean squared difference over grid points (the grid-measure `L2` norm on
/// the unit cell).
pub fn mse(u_hat: &[f64], u: &[f64]) -> Result<f64> {
    same_len(u_hat, u)?;
    Ok(diff_sq(u_hat, u) / u.len() as f64)
}

/// Step `t` (1-based) at which a rollout crashes, if it does.
///
/// `pred[t-1]` and `truth[t-1]` are the predicted and reference fields at
/// step `t`; `u0` is the initial state.
pub fn crash_step(pred: &[Vec<f64>], truth: &[Vec<f64>], u0: &[f64]) -> Option<usize> {
    let n0 = sq(u0).sqrt();
    for (t, (p, u)) in pred.iter().zip(truth).enumerate() {
        if p.iter().any(|x| !x.is_finite()) {
            return Some(t + 1);
        }
        if sq(p).sqrt() > CRASH_GROWTH * n0 {
            return Some(t + 1);
        }
        if diff_sq(p, u).sqrt() > CRASH_REL_L2 * sq(u).sqrt() {
            return Some(t + 1);
        }
    }
    None
}

pub fn crash_detect(pred: &[Vec<f64>], truth: &[Vec<f64>], u0: &[f64]) -> bool {
    crash_step(pred, truth, u0).is_some()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the mean: `b` resamples with
/// replacement, linear-interpolated quantiles.
pub fn bootstrap_ci(samples: &[f64], b: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if samples.is_empty() || b == 0 {
        return Err(contract_err!("bootstrap needs samples and at least one resample"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(config_err!("confidence level {level} outside (0, 1)"));
    }
    let n = samples.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..b)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    Ok((quantile(&means, a), quantile(&means, 1.0 - a)))
}

/// Wilson score interval for `k` successes out of `n` at normal quantile `z`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub const Z95: f64 = 1.959_963_984_540_054;

/// Single-step map applied recursively during evaluation, batched as
/// `[B, C, space...]`.
pub trait RolloutModel: Sync {
    fn label(&self) -> String;
    fn step(&self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl<T: Scalar> RolloutModel for UhnoModel<T> {
    fn label(&self) -> String {
        format!("uhno-{}", self.config().ablation.name())
    }

    fn step(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let xt = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| T::lit(v)).collect())?;
        let y = self.predict(&xt)?;
        Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| v.to_f64_lossy()).collect())
    }
}

pub struct IdentityModel;

impl RolloutModel for IdentityModel {
    fn label(&self) -> String {
        "identity".into()
    }

    fn step(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(x.clone())
    }
}

/// Returns the stored next snapshot of any frame found bit-for-bit in the
/// dataset.
pub struct LookupModel {
    next: HashMap<Vec<u64>, Vec<f64>>,
}

impl LookupModel {
    pub fn new(ds: &TrajectoryDataset) -> Self {
        let mut next = HashMap::new();
        for i in 0..ds.n_traj() {
            for t in 0..ds.snapshots() - 1 {
                let key = ds.frame(i, t).iter().map(|v| v.to_bits()).collect();
                next.entry(key).or_insert_with(|| ds.frame(i, t + 1).to_vec());
            }
        }
        Self { next }
    }
}

impl RolloutModel for LookupModel {
    fn label(&self) -> String {
        "lookup".into()
    }

    fn step(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let per = x.numel() / x.shape()[0];
        let mut out = Vec::with_capacity(x.numel());
        for f in x.data().chunks(per) {
            let key: Vec<u64> = f.iter().map(|v| v.to_bits()).collect();
            let nxt = self
                .next
                .get(&key)
                .ok_or_else(|| contract_err!("lookup model queried with an unknown frame"))?;
            out.extend_from_slice(nxt);
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

/// Per-trajectory rollout scores; error fields are `None` after a crash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScores {
    pub crashed_at: Option<usize>,
    pub rollout_mse: Option<f64>,
    pub rel_l2: Option<f64>,
    pub rel_h1: Option<f64>,
    pub bands: Option<[f64; 3]>,
    pub sf_error: Option<f64>,
    pub energy_drift: Option<f64>,
    pub step_rel_l2: Vec<f64>,
}

/// Scores one rollout: per-step metrics averaged over steps; energy drift
/// at the last step.
pub fn score_rollout(pred: &[Vec<f64>], truth: &[Vec<f64>], u0: &[f64], spatial: &[usize], lags: &[usize]) -> Result<TrajectoryScores> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(dim_err!("rollout of {} steps against {} reference steps", pred.len(), truth.len()));
    }
    if let Some(t) = crash_step(pred, truth, u0) {
        return Ok(TrajectoryScores {
            crashed_at: Some(t),
            rollout_mse: None,
            rel_l2: None,
            rel_h1: None,
            bands: None,
            sf_error: None,
            energy_drift: None,
            step_rel_l2: vec![],
        });
    }
    let h = pred.len() as f64;
    let (mut m, mut l2, mut h1, mut sf, mut bands) = (0.0, 0.0, 0.0, 0.0, [0.0; 3]);
    let mut steps = Vec::with_capacity(pred.len());
    for (p, u) in pred.iter().zip(truth) {
        let r = rel_l2(p, u)?;
        steps.push(r);
        l2 += r / h;
        m += mse(p, u)? / h;
        h1 += rel_h1(p, u, spatial)? / h;
        sf += sf_error(p, u, spatial, lags)? / h;
        let b = binned_spectral_error(p, u, spatial)?;
        bands.iter_mut().zip(b).for_each(|(a, v)| *a += v / h);
    }
    Ok(TrajectoryScores {
        crashed_at: None,
        rollout_mse: Some(m),
        rel_l2: Some(l2),
        rel_h1: Some(h1),
        bands: Some(bands),
        sf_error: Some(sf),
        energy_drift: Some(energy_drift(&pred[pred.len() - 1], &truth[truth.len() - 1])?),
        step_rel_l2: steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub horizon: usize,
    pub bootstrap_resamples: usize,
    pub level: f64,
    pub seed: u64,
    /// Trajectories per model call.
    pub batch: usize,
}

impl EvalOptions {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            bootstrap_resamples: 10_000,
            level: 0.95,
            seed: 0,
            batch: 32,
        }
    }
}

pub const METRICS_SCHEMA: &str = "uhno-metrics-v1";

/// Flat per-(model, task, seed) record. Error means and intervals are
/// `None` only when every trajectory crashed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub task: String,
    pub model: String,
    pub mode: Option<String>,
    pub seed: Option<u64>,
    pub horizon: usize,
    pub n_traj: usize,
    pub n_crashed: usize,
    pub crash_rate: f64,
    pub crash_rate_ci: [f64; 2],
    pub rollout_mse: Option<f64>,
    pub rollout_mse_ci: Option<[f64; 2]>,
    pub rel_l2: Option<f64>,
    pub rel_l2_ci: Option<[f64; 2]>,
    pub rel_h1: Option<f64>,
    pub rel_h1_ci: Option<[f64; 2]>,
    pub e_low: Option<f64>,
    pub e_low_ci: Option<[f64; 2]>,
    pub e_mid: Option<f64>,
    pub e_mid_ci: Option<[f64; 2]>,
    pub e_high: Option<f64>,
    pub e_high_ci: Option<[f64; 2]>,
    pub sf_error: Option<f64>,
    pub sf_error_ci: Option<[f64; 2]>,
    pub energy_drift: Option<f64>,
    pub energy_drift_ci: Option<[f64; 2]>,
    pub band_edges: [f64; 2],
    pub sf_lags: Vec<usize>,
    /// Mean relL2 at each rollout step over non-crashed trajectories.
    pub step_rel_l2: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
}

impl MetricsReport {
    /// Every `(name, mean, interval)` triple.
    pub fn estimates(&self) -> Vec<(&'static str, Option<f64>, Option<[f64; 2]>)> {
        vec![
            ("rollout_mse", self.rollout_mse, self.rollout_mse_ci),
            ("rel_l2", self.rel_l2, self.rel_l2_ci),
            ("rel_h1", self.rel_h1, self.rel_h1_ci),
            ("e_low", self.e_low, self.e_low_ci),
            ("e_mid", self.e_mid, self.e_mid_ci),
            ("e_high", self.e_high, self.e_high_ci),
            ("sf_error", self.sf_error, self.sf_error_ci),
            ("energy_drift", self.energy_drift, self.energy_drift_ci),
        ]
    }

    /// Schema, finiteness (unless everything crashed) and interval
    /// bracketing.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Format(m));
        if self.schema != METRICS_SCHEMA {
            return bad(format!("unknown metrics schema {:?}", self.schema));
        }
        if self.n_crashed > self.n_traj || self.n_traj == 0 {
            return bad(format!("{} crashed of {}", self.n_crashed, self.n_traj));
        }
        let [lo, hi] = self.crash_rate_ci;
        if !(lo <= self.crash_rate && self.crash_rate <= hi) {
            return bad("crash-rate interval does not bracket the rate".into());
        }
        let all_crashed = self.n_crashed == self.n_traj;
        for (name, mean, ci) in self.estimates() {
            match (mean, ci) {
                (Some(m), Some([lo, hi])) => {
                    if !(m.is_finite() && lo.is_finite() && hi.is_finite()) {
                        return bad(format!("{name} is not finite"));
                    }
                    let tol = 1e-12 * m.abs().max(1.0);
                    if lo > m + tol || m > hi + tol {
                        return bad(format!("{name} interval [{lo}, {hi}] does not bracket {m}"));
                    }
                }
                (None, None) if all_crashed => {}
                _ => return bad(format!("{name} missing")),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn estimate(xs: &[f64], opts: &EvalOptions, salt: u64) -> Result<(Option<f64>, Option<[f64; 2]>)> {
    if xs.is_empty() {
        return Ok((None, None));
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let (lo, hi) = bootstrap_ci(xs, opts.bootstrap_resamples, opts.level, opts.seed.wrapping_add(salt))?;
    // float rounding can leave the mean a hair outside for constant samples
    Ok((Some(m), Some([lo.min(m), hi.max(m)])))
}

/// Rolls every trajectory forward `opts.horizon` steps from its first
/// snapshot and aggregates the scores of the non-crashed ones.
pub fn rollout_evaluate(model: &dyn RolloutModel, ds: &TrajectoryDataset, opts: &EvalOptions) -> Result<MetricsReport> {
    let h = opts.horizon;
    if h == 0 || h >= ds.snapshots() {
        return Err(config_err!("horizon {} outside 1..{}", h, ds.snapshots()));
    }
    let n = ds.n_traj();
    let spatial = ds.header.spatial.clone();
    let lags = default_lags(*spatial.iter().min().expect("spatial extents"));
    let frame_shape = ds.frame_shape();
    let mut preds: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(h); n];
    let mut state: Vec<Option<Vec<f64>>> = (0..n).map(|i| Some(ds.frame(i, 0).to_vec())).collect();
    for t in 1..=h {
        let live: Vec<usize> = (0..n).filter(|&i| state[i].is_some()).collect();
        for chunk in live.chunks(opts.batch.max(1)) {
            let mut shape = frame_shape.clone();
            shape[0] = chunk.len();
            let mut data = Vec::with_capacity(chunk.len() * ds.frame_len());
            for &i in chunk {
                data.extend_from_slice(state[i].as_ref().expect("live"));
            }
            let y = model.step(&Tensor::new(shape.clone(), data)?)?;
            if y.shape() != shape.as_slice() {
                return Err(dim_err!("model returned {:?} for input {:?}", y.shape(), shape));
            }
            for (&i, f) in chunk.iter().zip(y.data().chunks(ds.frame_len())) {
                let f = f.to_vec();
                preds[i].push(f.clone());
                let truth: Vec<Vec<f64>> = (1..=t).map(|s| ds.frame(i, s).to_vec()).collect();
                // crashed rollouts stop here
                state[i] = if crash_detect(&preds[i], &truth, ds.frame(i, 0)) { None } else { Some(f) };
            }
        }
    }
    let scores: Vec<TrajectoryScores> = (0..n)
        .into_par_iter()
        .map(|i| {
            let steps = preds[i].len();
            let truth: Vec<Vec<f64>> = (1..=steps).map(|s| ds.frame(i, s).to_vec()).collect();
            score_rollout(&preds[i], &truth, ds.frame(i, 0), &spatial, &lags)
        })
        .collect::<Result<_>>()?;
    report_from_scores(&scores, ds.task().name(), &model.label(), h, &spatial, &lags, opts)
}

pub fn report_from_scores(
    scores: &[TrajectoryScores],
    task: &str,
    model: &str,
    horizon: usize,
    spatial: &[usize],
    lags: &[usize],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let ok: Vec<&TrajectoryScores> = scores.iter().filter(|s| s.crashed_at.is_none()).collect();
    let pick = |f: &dyn Fn(&TrajectoryScores) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|s| f(s)).collect() };
    let n_crashed = scores.len() - ok.len();
    let (lo, hi) = wilson_interval(n_crashed, scores.len(), Z95);
    let (rollout_mse, rollout_mse_ci) = estimate(&pick(&|s| s.rollout_mse), opts, 1)?;
    let (rel_l2, rel_l2_ci) = estimate(&pick(&|s| s.rel_l2), opts, 2)?;
    let (rel_h1, rel_h1_ci) = estimate(&pick(&|s| s.rel_h1), opts, 3)?;
    let (e_low, e_low_ci) = estimate(&pick(&|s| s.bands.map(|b| b[0])), opts, 4)?;
    let (e_mid, e_mid_ci) = estimate(&pick(&|s| s.bands.map(|b| b[1])), opts, 5)?;
    let (e_high, e_high_ci) = estimate(&pick(&|s| s.bands.map(|b| b[2])), opts, 6)?;
    let (sf_error, sf_error_ci) = estimate(&pick(&|s| s.sf_error), opts, 7)?;
    let (energy_drift, energy_drift_ci) = estimate(&pick(&|s| s.energy_drift), opts, 8)?;
    let step_rel_l2 = (0..horizon)
        .map(|t| {
            let v: Vec<f64> = ok.iter().map(|s| s.step_rel_l2[t]).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .filter(|v| !v.is_nan())
        .collect();
    Ok(MetricsReport {
        schema: METRICS_SCHEMA.into(),
        task: task.into(),
        model: model.into(),
        mode: None,
        seed: None,
        horizon,
        n_traj: scores.len(),
        n_crashed,
        crash_rate: n_crashed as f64 / scores.len().max(1) as f64,
        crash_rate_ci: [lo, hi],
        rollout_mse,
        rollout_mse_ci,
        rel_l2,
        rel_l2_ci,
        rel_h1,
        rel_h1_ci,
        e_low,
        e_low_ci,
        e_mid,
        e_mid_ci,
        e_high,
        e_high_ci,
        sf_error,
        sf_error_ci,
        energy_drift,
        energy_drift_ci,
        band_edges: band_edges(spatial[0]),
        sf_lags: lags.to_vec(),
        step_rel_l2,
        bootstrap_resamples: opts.bootstrap_resamples,
        bootstrap_seed: opts.seed,
    })
}
