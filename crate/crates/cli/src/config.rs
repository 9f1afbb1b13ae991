//! Experiment files: a task preset plus per-section overrides.
//!
//! ```toml
//! task = "burgers"
//! scale = "desk"            # or "paper"
//! mode = "full"             # letter or name
//! seeds = [0]
//! out_dir = "out"
//! checkpoint_every = 500
//!
//! [data]
//! train = "data/burgers/train.bin"
//! test = "data/burgers/test.bin"
//! n_train = 200
//! n_test = 200
//! seed = 0
//!
//! [pde]      # generator fields, e.g. n = 128, nu = 0.01
//! [grf]      # alpha, tau, sigma
//! [model]    # levels, c0, k0, scales, sigma_init, [model.spar]
//! [train]    # lr, weight_decay, steps, warmup, batch, log_every, ...
//! [eval]     # horizon, bootstrap_resamples, level, seed, batch
//! ```
//!
//! Every override key must already exist in the preset; relative paths are
//! taken from the working directory.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uhno::metrics::EvalOptions;
use uhno::pde::grf::GrfParams;
use uhno::pde::{PdeSpec, Task};
use uhno::trainer::{task_model_config, TrainConfig};
use uhno::{AblationMode, ModelConfig};

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: String,
    #[serde(default = "desk")]
    scale: String,
    #[serde(default = "full")]
    mode: String,
    #[serde(default = "seed0")]
    seeds: Vec<u64>,
    #[serde(default = "out")]
    out_dir: PathBuf,
    #[serde(default = "every")]
    checkpoint_every: usize,
    data: DataSection,
    #[serde(default)]
    pde: toml::Table,
    #[serde(default)]
    grf: toml::Table,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    eval: toml::Table,
}

fn desk() -> String {
    "desk".into()
}
fn full() -> String {
    "full".into()
}
fn seed0() -> Vec<u64> {
    vec![0]
}
fn out() -> PathBuf {
    "out".into()
}
fn every() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "n200")]
    pub n_train: usize,
    #[serde(default = "n200")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

fn n200() -> usize {
    200
}

/// Fully resolved experiment; echoed verbatim into run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub task: Task,
    pub scale: String,
    pub mode: AblationMode,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub data: DataSection,
    pub pde: PdeSpec,
    pub grf: GrfParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

/// Overwrites keys of `base` with `patch`, refusing keys `base` lacks.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    let (Value::Object(b), Value::Object(p)) = (&mut *base, patch) else {
        *base = patch.clone();
        return Ok(());
    };
    for (k, v) in p {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match b.get_mut(k) {
            None => return Err(CliError::Usage(format!("unknown config key [{here}]"))),
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
            Some(slot) => *slot = v.clone(),
        }
    }
    Ok(())
}

fn patched<T: Serialize + DeserializeOwned>(base: &T, patch: &toml::Table, section: &str) -> Result<T, CliError> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Usage(e.to_string()))?;
    let p = serde_json::to_value(patch).map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut v, &p, section)?;
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

/// `key=value` overrides for one flat section; values parse as TOML.
pub fn parse_sets(sets: &[String]) -> Result<toml::Table, CliError> {
    let mut t = toml::Table::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {s:?}")))?;
        let val: toml::Value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        t.insert(k.trim().to_string(), val);
    }
    Ok(t)
}

/// Generator spec for `task` with overrides.
pub fn pde_spec(task: Task, patch: &toml::Table) -> Result<PdeSpec, CliError> {
    let mut p = patch.clone();
    p.remove("pde");
    let spec: PdeSpec = patched(&PdeSpec::default_for(task), &p, "pde")?;
    spec.validate()?;
    Ok(spec)
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let task: Task = raw.task.parse()?;
        let mode: AblationMode = raw.mode.parse()?;
        let train_base = match raw.scale.as_str() {
            "desk" => TrainConfig::desk(task),
            "paper" => TrainConfig::paper(task),
            s => return Err(CliError::Usage(format!("scale must be \"desk\" or \"paper\", got {s:?}"))),
        };
        let pde = pde_spec(task, &raw.pde)?;
        let grf: GrfParams = patched(&GrfParams::default(), &raw.grf, "grf")?;
        let mut model: ModelConfig = patched(&task_model_config(task), &raw.model, "model")?;
        if model.dims != task.dims() {
            return Err(CliError::Usage(format!("task {} is {}D but [model] dims = {}", task, task.dims(), model.dims)));
        }
        model.ablation = mode;
        let train: TrainConfig = patched(&train_base, &raw.train, "train")?;
        train.validate()?;
        let eval: EvalOptions = patched(&EvalOptions::new(task.test_horizon()), &raw.eval, "eval")?;
        if raw.seeds.is_empty() {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        if raw.checkpoint_every == 0 {
            return Err(CliError::Usage("checkpoint_every must be positive".into()));
        }
        Ok(Self {
            task,
            scale: raw.scale,
            mode,
            seeds: raw.seeds,
            out_dir: raw.out_dir,
            checkpoint_every: raw.checkpoint_every,
            data: raw.data,
            pde,
            grf,
            model,
            train,
            eval,
        })
    }

    /// `out/<task>/<mode>/seed<k>`.
    pub fn run_dir(&self, mode: AblationMode, seed: u64) -> PathBuf {
        self.out_dir.join(self.task.name()).join(mode.name()).join(format!("seed{seed}"))
    }
}
