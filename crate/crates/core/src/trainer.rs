//! AdamW training on single-step pairs, diagnostics logging and the
//! ablation runner.
//!
//! Every source of randomness is keyed by `(seed, step)`, so a run resumed
//! from a checkpoint reproduces the uninterrupted run bit for bit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{self, EvalOptions, MetricsReport};
use crate::model::{AblationMode, ForwardOptions, ModelConfig, UhnoModel};
use crate::pde::{Task, TrajectoryDataset};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Steps of the reference schedule; the warmup scales with the ratio.
pub const REFERENCE_STEPS: usize = 20_000;
pub const REFERENCE_WARMUP: usize = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    /// `None` scales the reference 1000 of 20000 steps.
    pub warmup: Option<usize>,
    pub batch: usize,
    pub seed: u64,
    pub log_every: usize,
    pub angle_every: usize,
    pub angle_batch: usize,
    pub val_samples: usize,
    pub val_horizon: usize,
    /// Base loss weights; the ablation mode may zero some of them.
    pub loss: LossWeights,
    pub log_sigma_clamp: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 2000,
            warmup: None,
            batch: 32,
            seed: 0,
            log_every: 200,
            angle_every: 1000,
            angle_batch: 64,
            val_samples: 32,
            val_horizon: 5,
            loss: LossWeights::BURGERS,
            log_sigma_clamp: [-2.0, 2.0],
        }
    }
}

impl TrainConfig {
    /// Desk-scale defaults for `task`.
    pub fn desk(task: Task) -> Self {
        Self {
            batch: if task.dims() == 1 { 32 } else { 16 },
            loss: task_loss_weights(task),
            ..Self::default()
        }
    }

    /// Reference-scale schedule: 20000 steps, 128-sample validation batch.
    pub fn paper(task: Task) -> Self {
        Self {
            steps: REFERENCE_STEPS,
            val_samples: 128,
            ..Self::desk(task)
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup
            .unwrap_or_else(|| ((REFERENCE_WARMUP * self.steps) as f64 / REFERENCE_STEPS as f64).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(config_err!("steps and batch must be positive"));
        }
        if self.warmup_steps() >= self.steps {
            return Err(config_err!("warmup {} must be below steps {}", self.warmup_steps(), self.steps));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("invalid optimizer settings {:?}", self));
        }
        if self.log_every == 0 || self.angle_every == 0 {
            return Err(config_err!("logging intervals must be positive"));
        }
        if self.log_sigma_clamp[0] >= self.log_sigma_clamp[1] {
            return Err(config_err!("empty log-sigma clamp range"));
        }
        self.loss.validate()
    }
}

/// Architecture preset per task: L=3, C0=32, M=3, task-specific K0.
pub fn task_model_config(task: Task) -> ModelConfig {
    let k0 = match task {
        Task::Ks => 32,
        Task::Burgers | Task::Kdv => 24,
        _ => 12,
    };
    ModelConfig::new(task.dims(), 3, 32, k0, 3)
}

pub fn task_loss_weights(task: Task) -> LossWeights {
    LossWeights {
        lambda_h1: 1e-3,
        lambda_cbc: if task == Task::Advection { 3e-3 } else { 5e-3 },
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 at `steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps();
    if step < w {
        return cfg.lr * step as f64 / w as f64;
    }
    let span = (cfg.steps - w).max(1) as f64;
    let p = ((step - w) as f64 / span).min(1.0);
    cfg.lr * 0.5 * (1.0 + (PI * p).cos())
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f64> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled decay `p <- p (1 - lr wd)`, applied to
/// every tensor.
pub fn adamw_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Vec<T>], state: &mut AdamState<T>, lr: f64, cfg: &TrainConfig) {
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(state.t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(state.t as i32));
    let (lr_t, eps) = (T::lit(lr), T::lit(cfg.eps));
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let one = T::one();
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let g = grads[k][i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            *x = *x * decay - lr_t * upd;
        }
    }
}

/// Angle in degrees between two gradient vectors; the shorter one is
/// zero-padded. `None` when either has zero norm.
pub fn grad_angle(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // 2 atan2(|a/na - b/nb|, |a/na + b/nb|) stays accurate near 0 and 180
    let (mut d2, mut s2) = (0.0, 0.0);
    for i in 0..a.len().max(b.len()) {
        let x = a.get(i).map_or(0.0, |v| v / na);
        let y = b.get(i).map_or(0.0, |v| v / nb);
        d2 += (x - y) * (x - y);
        s2 += (x + y) * (x + y);
    }
    Some((2.0 * d2.sqrt().atan2(s2.sqrt())).to_degrees())
}

pub const CSV_HEADER: &str = "step,quantity,stage,bin,value";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub step: u64,
    pub quantity: String,
    pub stage: String,
    pub bin: String,
    pub value: f64,
}

/// Rows of `step,quantity,stage,bin,value`, in logging order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsLog {
    pub rows: Vec<DiagRow>,
}

impl DiagnosticsLog {
    pub fn push(&mut self, step: u64, quantity: &str, stage: &str, bin: &str, value: f64) {
        self.rows.push(DiagRow {
            step,
            quantity: quantity.into(),
            stage: stage.into(),
            bin: bin.into(),
            value,
        });
    }

    /// `(step, value)` of every row matching the triple.
    pub fn series(&self, quantity: &str, stage: &str, bin: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.quantity == quantity && r.stage == stage && r.bin == bin)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * 40);
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            // `{}` on f64 is the shortest round-tripping form
            writeln!(s, "{},{},{},{},{}", r.step, r.quantity, r.stage, r.bin, r.value).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Format(format!("diagnostics CSV must start with {CSV_HEADER:?}")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("diagnostics line {}: {:?}", n + 2, line));
            if f.len() != 5 {
                return Err(bad());
            }
            rows.push(DiagRow {
                step: f[0].parse().map_err(|_| bad())?,
                quantity: f[1].into(),
                stage: f[2].into(),
                bin: f[3].into(),
                value: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    pub fn extend(&mut self, other: DiagnosticsLog) {
        self.rows.extend(other.rows);
    }
}

/// Edges of the routing-contrast histogram: 20 bins of width 0.2 from 0;
/// the last bin also takes everything above.
pub const CONTRAST_BINS: usize = 20;
pub const CONTRAST_WIDTH: f64 = 0.2;

const SAMPLE_STREAM: u64 = 0x5eed_ba7c;
const ANGLE_STREAM: u64 = 0xa9_91e5;

fn stream_rng(seed: u64, salt: u64, step: u64) -> ChaCha8Rng {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(step);
    rng
}

/// `(trajectory, time)` indices of a uniformly drawn training batch.
pub fn sample_pairs(ds: &TrajectoryDataset, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| (rng.random_range(0..ds.n_traj()), rng.random_range(0..ds.snapshots() - 1)))
        .collect()
}

/// Stacks input and target frames of the given pairs as `[B, C, space...]`.
pub fn pair_batch<T: Scalar>(ds: &TrajectoryDataset, pairs: &[(usize, usize)]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut shape = ds.frame_shape();
    shape[0] = pairs.len();
    let mut x = Vec::with_capacity(pairs.len() * ds.frame_len());
    let mut y = Vec::with_capacity(pairs.len() * ds.frame_len());
    for &(i, t) in pairs {
        x.extend(ds.frame(i, t).iter().map(|&v| T::lit(v)));
        y.extend(ds.frame(i, t + 1).iter().map(|&v| T::lit(v)));
    }
    Ok((Tensor::new(shape.clone(), x)?, Tensor::new(shape, y)?))
}

/// Written next to the checkpoint when a step produces a non-finite loss
/// or gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NanDump {
    pub step: usize,
    /// total, mse, h1, cbc; non-finite values as `null`
    pub loss: [Option<f64>; 4],
    pub lr: f64,
    pub nonfinite_grads: Vec<String>,
    pub grad_norms: Vec<(String, Option<f64>)>,
}

pub struct Trainer<'a, T: Scalar = f64> {
    pub model: UhnoModel<T>,
    pub cfg: TrainConfig,
    pub adam: AdamState<T>,
    pub step: usize,
    pub log: DiagnosticsLog,
    train: &'a TrajectoryDataset,
    val: Option<&'a TrajectoryDataset>,
    weights: LossWeights,
    dump_dir: Option<PathBuf>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: UhnoModel<T>, cfg: TrainConfig, train: &'a TrajectoryDataset, val: Option<&'a TrajectoryDataset>) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if train.header.channels != mc.in_channels || train.header.channels != mc.out_channels {
            return Err(config_err!(
                "dataset has {} channels, model maps {} -> {}",
                train.header.channels,
                mc.in_channels,
                mc.out_channels
            ));
        }
        mc.check_extents(&train.header.spatial)?;
        if let Some(v) = val {
            if v.header.spatial != train.header.spatial || v.header.channels != train.header.channels {
                return Err(config_err!("validation and training frames differ in shape"));
            }
        }
        let weights = mc.ablation.loss_weights(cfg.loss);
        let adam = AdamState::new(model.params());
        Ok(Self {
            model,
            cfg,
            adam,
            step: 0,
            log: DiagnosticsLog::default(),
            train,
            val,
            weights,
            dump_dir: None,
        })
    }

    /// Continues from a saved step and optimizer state.
    pub fn resume(mut self, step: usize, adam: AdamState<T>) -> Result<Self> {
        if adam.m.len() != self.model.params().len() || step > self.cfg.steps {
            return Err(config_err!("resume state does not fit this run"));
        }
        self.step = step;
        self.adam = adam;
        Ok(self)
    }

    pub fn with_dump_dir(mut self, dir: &Path) -> Self {
        self.dump_dir = Some(dir.to_path_buf());
        self
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.weights
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    fn log_hparams(&mut self) {
        let c = self.cfg.clone();
        for (k, v) in [
            ("lr", c.lr),
            ("weight_decay", c.weight_decay),
            ("beta1", c.beta1),
            ("beta2", c.beta2),
            ("eps", c.eps),
            ("warmup", c.warmup_steps() as f64),
            ("steps", c.steps as f64),
            ("batch", c.batch as f64),
            ("lambda_h1", self.weights.lambda_h1),
            ("lambda_cbc", self.weights.lambda_cbc),
        ] {
            self.log.push(0, "hparam", "train", k, v);
        }
    }

    /// Runs until `until` steps (capped at the configured total) are done.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.cfg.steps);
        if self.step == 0 && self.log.rows.is_empty() {
            self.log_hparams();
            self.diagnostics()?;
        }
        while self.step < until {
            self.train_step()?;
            if self.step % self.cfg.log_every == 0 || self.step == self.cfg.steps {
                self.diagnostics()?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.steps)
    }

    fn train_step(&mut self) -> Result<()> {
        let s = self.step as u64;
        let pairs = sample_pairs(self.train, self.cfg.batch, &mut stream_rng(self.cfg.seed, SAMPLE_STREAM, s));
        let (x, y) = pair_batch::<T>(self.train, &pairs)?;
        let out = self.model.loss_and_grads(&x, &y, &self.weights, ForwardOptions::default())?;
        let lr = lr_schedule(self.step + 1, &self.cfg);
        let l = out.loss;
        let bad_grads: Vec<String> = out
            .grads
            .iter()
            .zip(self.model.param_names())
            .filter(|(g, _)| g.iter().any(|v| !v.is_finite()))
            .map(|(_, n)| n.clone())
            .collect();
        if !l.total.is_finite() || !bad_grads.is_empty() {
            return Err(self.nan_abort(&out.grads, [l.total, l.mse, l.h1, l.cbc], lr, bad_grads));
        }
        for (q, v) in [
            ("loss_total", l.total),
            ("loss_mse", l.mse),
            ("loss_h1", l.h1),
            ("loss_cbc", l.cbc),
            ("loss_h1_weighted", l.weighted_h1),
            ("loss_cbc_weighted", l.weighted_cbc),
            ("lr", lr),
        ] {
            self.log.push(s, q, "train", "", v);
        }
        for (label, st) in &out.trace.routing {
            log_spread(&mut self.log, s, "rho", label, &st.rho);
        }
        adamw_step(self.model.params_mut(), &out.grads, &mut self.adam, lr, &self.cfg);
        let [lo, hi] = self.cfg.log_sigma_clamp;
        self.model.clamp_log_sigma(lo, hi);
        self.step += 1;
        Ok(())
    }

    fn nan_abort(&self, grads: &[Vec<T>], loss: [f64; 4], lr: f64, bad: Vec<String>) -> Error {
        let dump = NanDump {
            step: self.step,
            loss: loss.map(finite),
            lr,
            nonfinite_grads: bad,
            grad_norms: grads
                .iter()
                .zip(self.model.param_names())
                .map(|(g, n)| (n.clone(), finite(g.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())))
                .collect(),
        };
        let mut msg = format!("non-finite loss or gradient at step {}: loss terms {:?}", self.step, loss);
        if let Some(dir) = &self.dump_dir {
            let path = dir.join("nan_dump.json");
            match serde_json::to_string_pretty(&dump).map_err(Error::from).and_then(|j| Ok(std::fs::write(&path, j)?)) {
                Ok(()) => write!(msg, "; dump written to {}", path.display()).expect("string write"),
                Err(e) => write!(msg, "; dump failed: {e}").expect("string write"),
            }
        }
        Error::Numerical(msg)
    }

    /// Validation band errors, routing statistics and (on its own cadence)
    /// branch gradient angles, all tagged with the current step.
    fn diagnostics(&mut self) -> Result<()> {
        let s = self.step as u64;
        if let Some(val) = self.val {
            self.validation_diagnostics(val, s)?;
        }
        if self.step % self.cfg.angle_every == 0 || self.step == self.cfg.steps {
            self.angle_diagnostics(s)?;
        }
        Ok(())
    }

    fn validation_diagnostics(&mut self, val: &TrajectoryDataset, s: u64) -> Result<()> {
        let n = self.cfg.val_samples.min(val.n_traj());
        let h = self.cfg.val_horizon.min(val.snapshots() - 1);
        if n == 0 || h == 0 {
            return Ok(());
        }
        let spatial = val.header.spatial.clone();
        let pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, 0)).collect();
        let (mut x, _) = pair_batch::<T>(val, &pairs)?;
        let (mut bands, mut l2, mut ok) = ([0.0; 3], 0.0, vec![true; n]);
        for t in 1..=h {
            let (y, trace) = if t == 1 {
                let (y, tr) = self.model.predict_traced(&x)?;
                (y, Some(tr))
            } else {
                (self.model.predict(&x)?, None)
            };
            if let Some(tr) = trace {
                for (label, st) in &tr.routing {
                    log_spread(&mut self.log, s, "val_rho", label, &st.rho);
                    let mut hist = [0.0; CONTRAST_BINS];
                    for &c in &st.contrast {
                        let b = ((c / CONTRAST_WIDTH).floor().max(0.0) as usize).min(CONTRAST_BINS - 1);
                        hist[b] += 1.0;
                    }
                    for (b, v) in hist.iter().enumerate() {
                        self.log.push(s, "contrast_hist", label, &format!("{:.1}", b as f64 * CONTRAST_WIDTH), *v);
                    }
                }
            }
            let per = val.frame_len();
            for (i, f) in y.data().chunks(per).enumerate() {
                if !ok[i] {
                    continue;
                }
                let f: Vec<f64> = f.iter().map(|v| v.to_f64_lossy()).collect();
                let truth = val.frame(i, t);
                match (metrics::binned_spectral_error(&f, truth, &spatial), metrics::rel_l2(&f, truth)) {
                    (Ok(b), Ok(r)) if f.iter().all(|v| v.is_finite()) => {
                        bands.iter_mut().zip(b).for_each(|(a, v)| *a += v);
                        l2 += r;
                    }
                    _ => ok[i] = false,
                }
            }
            x = y;
        }
        let good = ok.iter().filter(|&&v| v).count();
        let denom = (good * h) as f64;
        for (b, name) in ["low", "mid", "high"].iter().enumerate() {
            self.log.push(s, "band_error", "val", name, if good > 0 { bands[b] / denom } else { f64::NAN });
        }
        self.log.push(s, "val_rel_l2", "val", "", if good > 0 { l2 / denom } else { f64::NAN });
        self.log.push(s, "val_failed", "val", "", (n - good) as f64);
        Ok(())
    }

    fn angle_diagnostics(&mut self, s: u64) -> Result<()> {
        let slots: Vec<_> = self
            .model
            .branch_slots()
            .into_iter()
            .filter(|b| !b.spectral.is_empty() && !b.gaussian.is_empty())
            .collect();
        if slots.is_empty() {
            return Ok(());
        }
        let pairs = sample_pairs(self.train, self.cfg.angle_batch, &mut stream_rng(self.cfg.seed, ANGLE_STREAM, s));
        let (x, y) = pair_batch::<T>(self.train, &pairs)?;
        let out = self.model.loss_and_grads(&x, &y, &self.weights, ForwardOptions::default())?;
        let flat = |idx: &[usize]| -> Vec<f64> {
            idx.iter()
                .flat_map(|&k| out.grads[k].iter().map(|v| v.to_f64_lossy()))
                .collect()
        };
        let mut skipped = 0.0;
        for b in &slots {
            match grad_angle(&flat(&b.spectral), &flat(&b.gaussian)) {
                Some(a) => self.log.push(s, "grad_angle", &b.label, "", a),
                None => skipped += 1.0,
            }
        }
        self.log.push(s, "grad_angle_skipped", "train", "", skipped);
        Ok(())
    }

    /// Saves parameters with the optimizer state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.model.save(
            path,
            self.cfg.seed,
            self.step as u64,
            Some((&self.adam.m, &self.adam.v, self.adam.t)),
        )
    }

    pub fn into_parts(self) -> (UhnoModel<T>, DiagnosticsLog, AdamState<T>) {
        (self.model, self.log, self.adam)
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn log_spread(log: &mut DiagnosticsLog, step: u64, q: &str, stage: &str, xs: &[f64]) {
    if xs.is_empty() {
        return;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    log.push(step, q, stage, "mean", mean);
    log.push(step, q, stage, "min", min);
    log.push(step, q, stage, "max", max);
}

/// Trains a fresh model: initialization and batches both keyed by `cfg.seed`.
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    train_ds: &TrajectoryDataset,
    val_ds: Option<&TrajectoryDataset>,
    cfg: &TrainConfig,
) -> Result<(UhnoModel<T>, DiagnosticsLog)> {
    let model = UhnoModel::new(model_cfg.clone(), cfg.seed)?;
    let mut t = Trainer::new(model, cfg.clone(), train_ds, val_ds)?;
    t.run()?;
    let (m, log, _) = t.into_parts();
    Ok((m, log))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub params: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, mode: AblationMode, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode && r.seed == seed)
    }

    /// `metric(mode) / metric(Full)` per seed; `None` when either side is
    /// missing or the Full value is zero.
    pub fn degradation(&self, metric: &str, mode: AblationMode, seed: u64) -> Option<f64> {
        let pick = |m| -> Option<f64> {
            self.get(m, seed)?
                .report
                .estimates()
                .into_iter()
                .find(|(n, _, _)| *n == metric)?
                .1
        };
        let (full, other) = (pick(AblationMode::Full)?, pick(mode)?);
        (full != 0.0).then(|| other / full)
    }

    /// One row per `(mode, seed)` with the three table metrics and their
    /// ratios to Full on the same seed, as CSV.
    pub fn grid_csv(&self) -> String {
        let mut s = String::from("task,mode,letter,seed,params,n_crashed,crash_rate");
        for m in GRID_METRICS {
            write!(s, ",{m}").expect("string write");
        }
        for m in GRID_METRICS {
            write!(s, ",{m}_factor").expect("string write");
        }
        s.push('\n');
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| (r.seed, r.mode));
        let opt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |x| x.to_string());
        for r in rows {
            write!(
                s,
                "{},{},{},{},{},{},{}",
                self.task,
                r.mode.name(),
                r.mode.letter(),
                r.seed,
                r.params,
                r.report.n_crashed,
                r.report.crash_rate
            )
            .expect("string write");
            let est = r.report.estimates();
            for m in GRID_METRICS {
                write!(s, ",{}", opt(est.iter().find(|e| e.0 == m).and_then(|e| e.1))).expect("string write");
            }
            for m in GRID_METRICS {
                write!(s, ",{}", opt(self.degradation(m, r.mode, r.seed))).expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

/// Metric columns of the ablation grid.
pub const GRID_METRICS: [&str; 3] = ["rollout_mse", "rel_l2", "rel_h1"];

/// Trains and evaluates every `(mode, seed)` with one shared schedule.
/// `on_run` sees each trained model before it is dropped.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_suite<T: Scalar>(
    base: &ModelConfig,
    train_ds: &TrajectoryDataset,
    test_ds: &TrajectoryDataset,
    modes: &[AblationMode],
    seeds: &[u64],
    cfg: &TrainConfig,
    eval: &EvalOptions,
    mut on_run: impl FnMut(AblationMode, u64, &UhnoModel<T>, &DiagnosticsLog, &MetricsReport) -> Result<()>,
) -> Result<AblationTable> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(config_err!("ablation needs at least one mode and one seed"));
    }
    let mut table = AblationTable {
        task: test_ds.task().name().into(),
        rows: vec![],
    };
    for &seed in seeds {
        for &mode in modes {
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let (model, log) = train::<T>(&base.clone().with_mode(mode), train_ds, Some(test_ds), &run_cfg)?;
            let mut report = metrics::rollout_evaluate(&model, test_ds, eval)?;
            report.mode = Some(mode.name().into());
            report.seed = Some(seed);
            on_run(mode, seed, &model, &log, &report)?;
            table.rows.push(AblationRow {
                mode,
                seed,
                params: model.param_count(),
                report,
            });
        }
    }
    Ok(table)
}
