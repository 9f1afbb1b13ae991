//! Reference solvers and trajectory datasets for the six benchmark PDEs.
//!
//! Every solver is a [`Stepper`] that advances one solver step at a time;
//! [`run_trajectory`] samples it at the snapshot interval. Datasets are
//! generated trajectory-parallel with one RNG stream per trajectory index,
//! so the thread count never changes the bytes written.

pub mod advection;
pub mod allen_cahn;
pub mod burgers;
pub mod fourier;
pub mod grf;
pub mod kdv;
pub mod ks;
pub mod ns2d;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::io;

pub use advection::{AdvectionParams, AdvectionSolver};
pub use allen_cahn::{AllenCahnParams, AllenCahnSolver};
pub use burgers::{BurgersParams, BurgersSolver};
pub use grf::{grf_sample, grf_sample_seeded, GrfParams};
pub use kdv::{KdvParams, KdvSolver};
pub use ks::{KsParams, KsSolver};
pub use ns2d::{NsParams, NsSolver};

pub trait Stepper {
    fn step(&mut self) -> Result<()>;

    /// Current physical-space field.
    fn field(&mut self) -> Vec<f64>;

    /// Blow-up test, run at every snapshot.
    fn check(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Records `snapshots` frames `substeps` solver steps apart, starting with
/// the initial state.
pub fn run_trajectory(s: &mut dyn Stepper, snapshots: usize, substeps: usize) -> Result<Vec<f64>> {
    let mut out = s.field();
    for _ in 1..snapshots {
        for _ in 0..substeps {
            s.step()?;
        }
        s.check()?;
        out.extend(s.field());
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite value in trajectory".into()));
    }
    Ok(out)
}

/// Solver steps per snapshot interval; the ratio must be integral.
pub fn substeps(dt_snapshot: f64, dt: f64) -> Result<usize> {
    let r = dt_snapshot / dt;
    if !(r >= 1.0) || (r - r.round()).abs() > 1e-6 * r {
        return Err(config_err!(
            "snapshot interval {dt_snapshot} is not a whole number of solver steps {dt}"
        ));
    }
    Ok(r.round() as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Burgers,
    Ks,
    Kdv,
    Advection,
    AllenCahn,
    Ns2d,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Burgers,
        Task::Ks,
        Task::Kdv,
        Task::Advection,
        Task::AllenCahn,
        Task::Ns2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Burgers => "burgers",
            Task::Ks => "ks",
            Task::Kdv => "kdv",
            Task::Advection => "advection",
            Task::AllenCahn => "allen_cahn",
            Task::Ns2d => "ns2d",
        }
    }

    pub fn dims(self) -> usize {
        match self {
            Task::Burgers | Task::Ks | Task::Kdv => 1,
            _ => 2,
        }
    }

    /// Rollout length used at evaluation.
    pub fn test_horizon(self) -> usize {
        if self.dims() == 1 {
            25
        } else {
            10
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    /// Canonical names plus `-` for `_` and a few spelled-out aliases.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let key = match key.as_str() {
            "advection2d" | "advection_2d" => "advection",
            "allen_cahn2d" | "allen_cahn_2d" | "allencahn" => "allen_cahn",
            "ns" | "navier_stokes" | "ns_2d" => "ns2d",
            "kuramoto_sivashinsky" => "ks",
            k => k,
        };
        Task::ALL
            .into_iter()
            .find(|t| t.name() == key)
            .ok_or_else(|| config_err!("unknown task {s:?}"))
    }
}

/// Generator choice plus its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pde", rename_all = "snake_case")]
pub enum PdeSpec {
    Burgers(BurgersParams),
    Ks(KsParams),
    Kdv(KdvParams),
    Advection(AdvectionParams),
    AllenCahn(AllenCahnParams),
    Ns2d(NsParams),
}

impl PdeSpec {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Burgers => PdeSpec::Burgers(Default::default()),
            Task::Ks => PdeSpec::Ks(Default::default()),
            Task::Kdv => PdeSpec::Kdv(Default::default()),
            Task::Advection => PdeSpec::Advection(Default::default()),
            Task::AllenCahn => PdeSpec::AllenCahn(Default::default()),
            Task::Ns2d => PdeSpec::Ns2d(Default::default()),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            PdeSpec::Burgers(_) => Task::Burgers,
            PdeSpec::Ks(_) => Task::Ks,
            PdeSpec::Kdv(_) => Task::Kdv,
            PdeSpec::Advection(_) => Task::Advection,
            PdeSpec::AllenCahn(_) => Task::AllenCahn,
            PdeSpec::Ns2d(_) => Task::Ns2d,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            PdeSpec::Burgers(p) => p.n,
            PdeSpec::Ks(p) => p.n,
            PdeSpec::Kdv(p) => p.n,
            PdeSpec::Advection(p) => p.n,
            PdeSpec::AllenCahn(p) => p.n,
            PdeSpec::Ns2d(p) => p.n,
        }
    }

    pub fn snapshots(&self) -> usize {
        match self {
            PdeSpec::Burgers(p) => p.snapshots,
            PdeSpec::Ks(p) => p.snapshots,
            PdeSpec::Kdv(p) => p.snapshots,
            PdeSpec::Advection(p) => p.snapshots,
            PdeSpec::AllenCahn(p) => p.snapshots,
            PdeSpec::Ns2d(p) => p.snapshots,
        }
    }

    pub fn dt_snapshot(&self) -> f64 {
        match self {
            PdeSpec::Burgers(p) => p.dt_snapshot,
            PdeSpec::Ks(p) => p.dt_snapshot,
            PdeSpec::Kdv(p) => p.dt_snapshot,
            PdeSpec::Advection(p) => p.dt_snapshot,
            PdeSpec::AllenCahn(p) => p.dt_snapshot,
            PdeSpec::Ns2d(p) => p.dt_snapshot,
        }
    }

    /// Solver step; the snapshot interval for the exact advection solver.
    pub fn dt_solver(&self) -> f64 {
        match self {
            PdeSpec::Burgers(p) => p.dt,
            PdeSpec::Ks(p) => p.dt,
            PdeSpec::Kdv(p) => p.dt,
            PdeSpec::Advection(p) => p.dt_snapshot,
            PdeSpec::AllenCahn(p) => p.dt,
            PdeSpec::Ns2d(p) => p.dt,
        }
    }

    pub fn domain_length(&self) -> f64 {
        match self {
            PdeSpec::Ks(p) => p.lx,
            PdeSpec::Kdv(p) => p.lx,
            _ => 1.0,
        }
    }

    pub fn dims(&self) -> usize {
        self.task().dims()
    }

    pub fn spatial(&self) -> Vec<usize> {
        vec![self.n(); self.dims()]
    }

    pub fn dx(&self) -> f64 {
        self.domain_length() / self.n() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n() < 4 || self.n() % 2 != 0 {
            return Err(config_err!("grid size must be even and >= 4, got {}", self.n()));
        }
        if self.snapshots() < 2 {
            return Err(config_err!("need at least 2 snapshots"));
        }
        substeps(self.dt_snapshot(), self.dt_solver())?;
        Ok(())
    }

    /// Solver started from `u0`. `velocity` is only read by advection.
    pub fn stepper(&self, u0: &[f64], velocity: [f64; 2]) -> Result<Box<dyn Stepper>> {
        Ok(match self {
            PdeSpec::Burgers(p) => Box::new(BurgersSolver::new(p, u0)?),
            PdeSpec::Ks(p) => Box::new(KsSolver::new(p, u0)?),
            PdeSpec::Kdv(p) => Box::new(KdvSolver::new(p, u0)?),
            PdeSpec::Advection(p) => Box::new(AdvectionSolver::new(p.n, velocity, p.dt_snapshot, u0)?),
            PdeSpec::AllenCahn(p) => Box::new(AllenCahnSolver::new(p, u0)?),
            PdeSpec::Ns2d(p) => Box::new(NsSolver::new(p, u0)?),
        })
    }

    /// Snapshots from a given initial state.
    pub fn solve(&self, u0: &[f64], velocity: [f64; 2]) -> Result<Vec<f64>> {
        self.validate()?;
        let mut s = self.stepper(u0, velocity)?;
        run_trajectory(s.as_mut(), self.snapshots(), substeps(self.dt_snapshot(), self.dt_solver())?)
    }

    /// One random trajectory and its per-trajectory parameters (the
    /// advection velocity, empty otherwise).
    pub fn sample<R: Rng>(&self, grf: &GrfParams, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
        let u0 = grf_sample(self.n(), self.dims(), grf, rng);
        let (velocity, extra) = match self {
            PdeSpec::Advection(p) => {
                let c = [
                    rng.random_range(-p.c_max..=p.c_max),
                    rng.random_range(-p.c_max..=p.c_max),
                ];
                (c, c.to_vec())
            }
            _ => ([0.0; 2], Vec::new()),
        };
        Ok((self.solve(&u0, velocity)?, extra))
    }
}

pub const DATASET_FORMAT: &str = "uhno-dataset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub spec: PdeSpec,
    pub grf: GrfParams,
    pub n_traj: usize,
    pub snapshots: usize,
    pub channels: usize,
    pub spatial: Vec<usize>,
    pub dx: f64,
    pub dt_solver: f64,
    pub dt_snapshot: f64,
    pub seed: u64,
    /// RNG stream of trajectory 0; trajectory `i` uses stream `first_index + i`.
    pub first_index: u64,
    /// Per-trajectory generation parameters (advection velocity).
    pub extras: Vec<Vec<f64>>,
}

/// `[traj, time, channels, space...]` block of `f64` with its header.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    pub data: Vec<f64>,
}

/// Trajectory RNG: the same seed with one stream per trajectory index.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl TrajectoryDataset {
    /// Generates trajectories `first_index .. first_index + n_traj`.
    pub fn generate(spec: &PdeSpec, grf: &GrfParams, n_traj: usize, seed: u64, first_index: u64) -> Result<Self> {
        spec.validate()?;
        if n_traj == 0 {
            return Err(config_err!("n_traj must be positive"));
        }
        let runs: Vec<(Vec<f64>, Vec<f64>)> = (0..n_traj as u64)
            .into_par_iter()
            .map(|i| spec.sample(grf, &mut trajectory_rng(seed, first_index + i)))
            .collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(runs.iter().map(|r| r.0.len()).sum());
        let mut extras = Vec::with_capacity(n_traj);
        for (traj, extra) in runs {
            data.extend(traj);
            extras.push(extra);
        }
        let ds = Self {
            header: DatasetHeader {
                format: DATASET_FORMAT.into(),
                spec: spec.clone(),
                grf: *grf,
                n_traj,
                snapshots: spec.snapshots(),
                channels: 1,
                spatial: spec.spatial(),
                dx: spec.dx(),
                dt_solver: spec.dt_solver(),
                dt_snapshot: spec.dt_snapshot(),
                seed,
                first_index,
                extras,
            },
            data,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn frame_len(&self) -> usize {
        self.header.channels * self.header.spatial.iter().product::<usize>()
    }

    pub fn traj_len(&self) -> usize {
        self.frame_len() * self.header.snapshots
    }

    pub fn n_traj(&self) -> usize {
        self.header.n_traj
    }

    pub fn snapshots(&self) -> usize {
        self.header.snapshots
    }

    pub fn task(&self) -> Task {
        self.header.spec.task()
    }

    pub fn trajectory(&self, i: usize) -> &[f64] {
        let l = self.traj_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn frame(&self, i: usize, t: usize) -> &[f64] {
        let f = self.frame_len();
        &self.trajectory(i)[t * f..(t + 1) * f]
    }

    /// Shape of one frame with a unit batch axis: `[1, C, space...]`.
    pub fn frame_shape(&self) -> Vec<usize> {
        let mut s = vec![1, self.header.channels];
        s.extend(&self.header.spatial);
        s
    }

    /// First `count` trajectories.
    pub fn take(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.n_traj() {
            return Err(config_err!("cannot take {count} of {} trajectories", self.n_traj()));
        }
        let mut header = self.header.clone();
        header.n_traj = count;
        header.extras.truncate(count);
        Ok(Self {
            header,
            data: self.data[..count * self.traj_len()].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write(path, &self.header, &self.data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, data): (DatasetHeader, Vec<f64>) = io::read(path)?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Format(format!("{}: not a dataset ({})", path.display(), header.format)));
        }
        let ds = Self { header, data };
        ds.check_shape()?;
        Ok(ds)
    }

    fn check_shape(&self) -> Result<()> {
        let h = &self.header;
        if h.spatial != h.spec.spatial() || h.snapshots != h.spec.snapshots() || h.extras.len() != h.n_traj {
            return Err(Error::Format("dataset header disagrees with its generator spec".into()));
        }
        if self.data.len() != h.n_traj * self.traj_len() {
            return Err(Error::Format(format!(
                "dataset block has {} values, header implies {}",
                self.data.len(),
                h.n_traj * self.traj_len()
            )));
        }
        Ok(())
    }

    /// Shape, finiteness and the per-equation conservation or dissipation
    /// properties, on every trajectory.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        if self.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("dataset contains NaN or Inf".into()));
        }
        let steps = substeps(self.header.dt_snapshot, self.header.dt_solver)? as f64;
        for i in 0..self.n_traj() {
            let frames: Vec<&[f64]> = (0..self.snapshots()).map(|t| self.frame(i, t)).collect();
            check_trajectory(&self.header.spec, &frames, steps)
                .map_err(|e| Error::Numerical(format!("trajectory {i}: {e}")))?;
        }
        Ok(())
    }
}

fn mean(u: &[f64]) -> f64 {
    u.iter().sum::<f64>() / u.len() as f64
}

fn energy(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64
}

fn max_abs(u: &[f64]) -> f64 {
    u.iter().fold(0f64, |m, x| m.max(x.abs()))
}

fn check_trajectory(spec: &PdeSpec, frames: &[&[f64]], steps: f64) -> std::result::Result<(), String> {
    let m0 = mean(frames[0]);
    let e0 = energy(frames[0]);
    for (t, w) in frames.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let t = t + 1;
        match spec {
            PdeSpec::Burgers(_) => {
                if (mean(b) - mean(a)).abs() > 1e-10 * steps {
                    return Err(format!("mean drifted at snapshot {t}"));
                }
                if energy(b) > energy(a) * (1.0 + 1e-12) {
                    return Err(format!("energy increased at snapshot {t}"));
                }
            }
            PdeSpec::Kdv(_) => {
                if (mean(b) - m0).abs() > 1e-8 {
                    return Err(format!("momentum drifted at snapshot {t}"));
                }
            }
            PdeSpec::Advection(_) => {
                if (energy(b) - e0).abs() > 1e-12 * e0.max(f64::MIN_POSITIVE) {
                    return Err(format!("norm changed at snapshot {t}"));
                }
            }
            PdeSpec::AllenCahn(_) => {
                if max_abs(b) > max_abs(frames[0]).max(1.0) + 1e-6 {
                    return Err(format!("left the double-well bound at snapshot {t}"));
                }
            }
            PdeSpec::Ns2d(p) => {
                if (mean(b) - m0).abs() > 1e-10 {
                    return Err(format!("mean vorticity drifted at snapshot {t}"));
                }
                if p.forcing == 0.0 && p.nu > 0.0 && energy(b) > energy(a) * (1.0 + 1e-12) {
                    return Err(format!("enstrophy increased at snapshot {t}"));
                }
            }
            PdeSpec::Ks(_) => {}
        }
    }
    Ok(())
}
