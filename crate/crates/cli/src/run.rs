//! Commands and the per-run artifact layout.
//!
//! A run directory `out/<task>/<mode>/seed<k>/` holds `checkpoint.bin`,
//! `diagnostics.csv`, `manifest.json` and, once evaluated, `metrics.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uhno::metrics::{rollout_evaluate, EvalOptions, LookupModel, MetricsReport, RolloutModel};
use uhno::pde::grf::GrfParams;
use uhno::pde::{PdeSpec, TrajectoryDataset};
use uhno::trainer::{AblationRow, AblationTable, AdamState, DiagnosticsLog, Trainer};
use uhno::{AblationMode, LossWeights, UhnoModel};

use crate::config::Experiment;
use crate::CliError;

pub const RUN_SCHEMA: &str = "uhno-run-v1";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";

/// Git-style content hash: sha256 over `"blob <len>\0"` and the bytes.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Writes through a sibling temp file so readers never see a torn file.
fn write_atomic(path: &Path, f: impl FnOnce(&Path) -> Result<(), CliError>) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    if let Err(e) = f(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(uhno::Error::from)?;
    write_atomic(path, |p| Ok(fs::write(p, text + "\n")?))
}

pub fn generate_dataset(
    spec: &PdeSpec,
    grf: &GrfParams,
    n_traj: usize,
    seed: u64,
    first_index: u64,
    out: &Path,
) -> Result<TrajectoryDataset, CliError> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let t = Instant::now();
    let ds = TrajectoryDataset::generate(spec, grf, n_traj, seed, first_index)?;
    write_atomic(out, |p| Ok(ds.save(p)?))?;
    println!(
        "wrote {} ({} trajectories x {} snapshots, grid {:?}) in {:.1}s",
        out.display(),
        ds.n_traj(),
        ds.snapshots(),
        ds.header.spatial,
        t.elapsed().as_secs_f64()
    );
    print_summary(&ds);
    Ok(ds)
}

/// Conservation summary over all trajectories.
fn print_summary(ds: &TrajectoryDataset) {
    let n = ds.frame_len() as f64;
    let (mut drift, mut growth, mut amp) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for i in 0..ds.n_traj() {
        let f0 = ds.frame(i, 0);
        let m0 = f0.iter().sum::<f64>() / n;
        let e0 = f0.iter().map(|v| v * v).sum::<f64>();
        for t in 1..ds.snapshots() {
            let f = ds.frame(i, t);
            drift = drift.max((f.iter().sum::<f64>() / n - m0).abs());
            let e = f.iter().map(|v| v * v).sum::<f64>();
            if e0 > 0.0 {
                growth = growth.max(e / e0 - 1.0);
            }
            amp = amp.max(f.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
    }
    println!("validated: max |mean drift| {drift:.3e}, max relative energy change {growth:+.3e}, max |u| {amp:.3e}");
}

pub fn load_dataset(path: &Path, what: &str) -> Result<TrajectoryDataset, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} dataset {} does not exist", path.display())));
    }
    Ok(TrajectoryDataset::load(path)?)
}

fn check_task(exp: &Experiment, ds: &TrajectoryDataset, path: &Path) -> Result<(), CliError> {
    if ds.task() != exp.task {
        return Err(CliError::Usage(format!("{} holds {} data, config is for {}", path.display(), ds.task(), exp.task)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRef {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub task: String,
    pub mode: String,
    pub letter: String,
    pub seed: u64,
    pub config: Experiment,
    /// Weights actually optimized after the mode is applied.
    pub loss_weights: LossWeights,
    pub params: usize,
    pub train_data: DataRef,
    pub test_data: Option<DataRef>,
    pub steps_completed: usize,
    pub complete: bool,
    pub checkpoint: String,
    pub diagnostics: String,
    pub metrics: Option<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))
    }

    /// Same experiment and data, ignoring progress fields.
    fn same_run(&self, other: &Manifest) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.train_data == other.train_data
            && self.test_data == other.test_data
    }
}

/// Rows tagged `step` that the interrupted run had not written yet are the
/// per-update ones; everything else at `step` came from the diagnostics pass.
fn truncate_log(log: &mut DiagnosticsLog, step: usize) {
    let per_update = |q: &str| q.starts_with("loss_") || q == "lr" || q == "rho";
    log.rows
        .retain(|r| (r.step as usize) < step || (r.step as usize == step && !per_update(&r.quantity)));
}

pub struct RunOptions {
    pub resume: bool,
    /// Stop after this many total steps, leaving a resumable run.
    pub until: Option<usize>,
    /// Reuse a finished run with an identical manifest.
    pub reuse: bool,
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub report: Option<MetricsReport>,
}

pub fn train_run(exp: &Experiment, mode: AblationMode, seed: u64, opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let train_ds = load_dataset(&exp.data.train, "training")?;
    check_task(exp, &train_ds, &exp.data.train)?;
    let test_ds = match &exp.data.test {
        Some(p) => {
            let d = load_dataset(p, "test")?;
            check_task(exp, &d, p)?;
            Some(d)
        }
        None => None,
    };
    let dir = exp.run_dir(mode, seed);
    fs::create_dir_all(&dir)?;

    let mut run_exp = exp.clone();
    run_exp.mode = mode;
    run_exp.seeds = vec![seed];
    run_exp.model.ablation = mode;
    run_exp.train.seed = seed;
    let model_cfg = run_exp.model.clone();
    let mut manifest = Manifest {
        schema: RUN_SCHEMA.into(),
        task: exp.task.name().into(),
        mode: mode.name().into(),
        letter: mode.letter().into(),
        seed,
        loss_weights: mode.loss_weights(run_exp.train.loss),
        params: uhno::model::param_count(&model_cfg),
        train_data: DataRef { path: exp.data.train.clone(), hash: content_hash(&exp.data.train)? },
        test_data: match &exp.data.test {
            Some(p) => Some(DataRef { path: p.clone(), hash: content_hash(p)? }),
            None => None,
        },
        config: run_exp.clone(),
        steps_completed: 0,
        complete: false,
        checkpoint: CHECKPOINT.into(),
        diagnostics: DIAGNOSTICS.into(),
        metrics: None,
    };

    let previous = Manifest::read(&dir).ok().filter(|m| m.same_run(&manifest));
    if opts.reuse {
        if let Some(prev) = previous.as_ref().filter(|m| m.complete && m.metrics.is_some()) {
            let text = fs::read_to_string(dir.join(METRICS))?;
            let report: MetricsReport = serde_json::from_str(&text).map_err(|e| CliError::Core(e.into()))?;
            eprintln!("{}: reusing finished run", dir.display());
            return Ok(RunOutcome { dir, manifest: prev.clone(), report: Some(report) });
        }
    }

    let ck = dir.join(CHECKPOINT);
    let mut trainer = if opts.resume {
        if previous.is_none() || !ck.is_file() {
            return Err(CliError::Usage(format!("{}: nothing to resume for this configuration", dir.display())));
        }
        let (model, header, moments) = UhnoModel::<f64>::load(&ck)?;
        let (m, v) = moments.ok_or_else(|| CliError::Usage("checkpoint has no optimizer state".into()))?;
        let adam = AdamState { m, v, t: header.optimizer_steps.unwrap_or(0) };
        let step = header.step as usize;
        let mut log = DiagnosticsLog::read_csv(&dir.join(DIAGNOSTICS))?;
        truncate_log(&mut log, step);
        let mut t = Trainer::new(model, run_exp.train.clone(), &train_ds, test_ds.as_ref())?.resume(step, adam)?;
        t.log = log;
        eprintln!("{}: resuming at step {step}", dir.display());
        t
    } else {
        let model = UhnoModel::<f64>::new(model_cfg, seed)?;
        Trainer::new(model, run_exp.train.clone(), &train_ds, test_ds.as_ref())?
    }
    .with_dump_dir(&dir);
    let _ = fs::remove_file(dir.join(METRICS));

    let total = run_exp.train.steps;
    let stop = opts.until.unwrap_or(total).min(total);
    let started = Instant::now();
    let from = trainer.step;
    while trainer.step < stop {
        let next = ((trainer.step / exp.checkpoint_every + 1) * exp.checkpoint_every).min(stop);
        trainer.run_until(next)?;
        save_progress(&trainer, &dir, &mut manifest)?;
        let done = trainer.step - from;
        let rate = started.elapsed().as_secs_f64() / done.max(1) as f64;
        let loss = trainer.log.series("loss_total", "train", "").last().map_or(f64::NAN, |r| r.1);
        eprintln!("{}: step {}/{} loss {loss:.4e} ({rate:.2}s/step)", dir.display(), trainer.step, total);
    }
    if trainer.step == from {
        save_progress(&trainer, &dir, &mut manifest)?;
    }

    let mut report = None;
    if trainer.is_done() {
        if let Some(test) = &test_ds {
            let mut r = rollout_evaluate(&trainer.model, test, &run_exp.eval)?;
            r.mode = Some(mode.name().into());
            r.seed = Some(seed);
            r.validate()?;
            write_json(&dir.join(METRICS), &r)?;
            manifest.metrics = Some(METRICS.into());
            report = Some(r);
        }
        manifest.complete = true;
        write_json(&dir.join(MANIFEST), &manifest)?;
    }
    Ok(RunOutcome { dir, manifest, report })
}

fn save_progress(trainer: &Trainer<'_, f64>, dir: &Path, manifest: &mut Manifest) -> Result<(), CliError> {
    write_atomic(&dir.join(DIAGNOSTICS), |p| Ok(trainer.log.write_csv(p)?))?;
    write_atomic(&dir.join(CHECKPOINT), |p| Ok(trainer.save_checkpoint(p)?))?;
    manifest.steps_completed = trainer.step;
    write_json(&dir.join(MANIFEST), manifest)
}

/// `checkpoint` may be the literal `oracle`, which looks frames up in the
/// dataset itself.
pub fn evaluate(checkpoint: &str, data: &Path, opts: &EvalOptions, out: Option<&Path>) -> Result<MetricsReport, CliError> {
    let ds = load_dataset(data, "evaluation")?;
    let model: Box<dyn RolloutModel> = if checkpoint == "oracle" {
        Box::new(LookupModel::new(&ds))
    } else {
        let p = Path::new(checkpoint);
        if !p.is_file() {
            return Err(CliError::Usage(format!("checkpoint {checkpoint} does not exist")));
        }
        let (m, _, _) = UhnoModel::<f64>::load(p)?;
        let c = m.config();
        if c.in_channels != ds.header.channels || c.out_channels != ds.header.channels {
            return Err(CliError::Usage(format!(
                "checkpoint maps {} -> {} channels, dataset has {}",
                c.in_channels, c.out_channels, ds.header.channels
            )));
        }
        c.check_extents(&ds.header.spatial)?;
        Box::new(m)
    };
    let report = rollout_evaluate(model.as_ref(), &ds, opts)?;
    report.validate()?;
    if let Some(o) = out {
        write_json(o, &report)?;
    }
    Ok(report)
}

pub fn ablate(exp: &Experiment, modes: &[AblationMode], seeds: &[u64], reuse: bool) -> Result<AblationTable, CliError> {
    if exp.data.test.is_none() {
        return Err(CliError::Usage("ablation needs [data] test".into()));
    }
    for p in std::iter::once(&exp.data.train).chain(exp.data.test.as_ref()) {
        load_dataset(p, "ablation")?;
    }
    let mut table = AblationTable { task: exp.task.name().into(), rows: vec![] };
    let opts = RunOptions { resume: false, until: None, reuse };
    for &seed in seeds {
        for &mode in modes {
            let run = train_run(exp, mode, seed, &opts)?;
            let report = run.report.ok_or_else(|| CliError::Usage("run finished without metrics".into()))?;
            table.rows.push(AblationRow { mode, seed, params: run.manifest.params, report });
        }
    }
    let dir = exp.out_dir.join(exp.task.name());
    let grid = table.grid_csv();
    write_atomic(&dir.join("ablation_grid.csv"), |p| Ok(fs::write(p, &grid)?))?;
    write_json(&dir.join("ablation.json"), &table)?;
    Ok(table)
}
