//! `uhno` command line: generate, train, evaluate, ablate.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure (NaN loss, solver blow-up), 1 anything else.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uhno::metrics::EvalOptions;
use uhno::pde::grf::GrfParams;
use uhno::pde::Task;
use uhno::AblationMode;

use config::{parse_sets, pde_spec, Experiment};
use run::RunOptions;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] uhno::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use uhno::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Numerical(_)) => 3,
            CliError::Core(E::Config(_) | E::Dimension(_) | E::Format(_) | E::Json(_) | E::DegenerateReference(_)) => 2,
            CliError::Core(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "uhno", version, about = "Hybrid neural operator: data, training, evaluation, ablations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a trajectory dataset, or both datasets named in a config.
    Generate {
        /// burgers, ks, kdv, advection, allen_cahn, ns2d
        task: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_traj: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Absolute index of the first trajectory's random stream.
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        /// Generator override, e.g. `--set n=64 --set snapshots=11`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Write `[data] train` and `test` of this experiment instead.
        #[arg(long, conflicts_with_all = ["task", "out"])]
        config: Option<PathBuf>,
    },
    /// Train one run per seed of an experiment file.
    Train {
        config: PathBuf,
        /// Overrides the config's mode.
        #[arg(long)]
        mode: Option<String>,
        /// Overrides the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop once this many steps are done; the run stays resumable.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Roll a checkpoint out on a dataset and print the metrics report.
    Evaluate {
        /// Checkpoint file, or `oracle` to look frames up in the dataset.
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        /// Rollout length; defaults to the task's test horizon.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        bootstrap_seed: u64,
    },
    /// Train and evaluate every (mode, seed) and write the ablation grid.
    Ablate {
        config: PathBuf,
        /// Comma-separated letters or names; `all` for Full and A-I.
        #[arg(long, default_value = "all")]
        modes: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Retrain even when a finished run with the same manifest exists.
        #[arg(long)]
        force: bool,
    },
}

fn parse_modes(s: &str) -> Result<Vec<AblationMode>, CliError> {
    if s.trim() == "all" {
        return Ok(AblationMode::ALL.to_vec());
    }
    s.split(',').map(|m| Ok(m.parse()?)).collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Generate { task, out, n_traj, seed, first_index, sets, config } => {
            if let Some(path) = config {
                let exp = Experiment::load(&path)?;
                let d = &exp.data;
                run::generate_dataset(&exp.pde, &exp.grf, d.n_train, d.seed, 0, &d.train)?;
                if let Some(test) = &d.test {
                    run::generate_dataset(&exp.pde, &exp.grf, d.n_test, d.seed, d.n_train as u64, test)?;
                }
                return Ok(());
            }
            let task: Task = task
                .ok_or_else(|| CliError::Usage("generate needs a task or --config".into()))?
                .parse()?;
            let out = out.ok_or_else(|| CliError::Usage("generate needs --out".into()))?;
            let spec = pde_spec(task, &parse_sets(&sets)?)?;
            run::generate_dataset(&spec, &GrfParams::default(), n_traj, seed, first_index, &out)?;
        }
        Cmd::Train { config, mode, seeds, resume, until } => {
            let exp = Experiment::load(&config)?;
            let mode = match mode {
                Some(m) => m.parse()?,
                None => exp.mode,
            };
            let opts = RunOptions { resume, until, reuse: false };
            for seed in seeds.unwrap_or_else(|| exp.seeds.clone()) {
                let out = run::train_run(&exp, mode, seed, &opts)?;
                match &out.report {
                    Some(r) => println!(
                        "{}: relL2 {:.4e} relH1 {:.4e} crash rate {:.3}",
                        out.dir.display(),
                        r.rel_l2.unwrap_or(f64::NAN),
                        r.rel_h1.unwrap_or(f64::NAN),
                        r.crash_rate
                    ),
                    None => println!("{}: {} steps done", out.dir.display(), out.manifest.steps_completed),
                }
            }
        }
        Cmd::Evaluate { checkpoint, data, horizon, out, resamples, bootstrap_seed } => {
            let ds = run::load_dataset(&data, "evaluation")?;
            let mut opts = EvalOptions::new(horizon.unwrap_or(ds.task().test_horizon()));
            opts.bootstrap_resamples = resamples;
            opts.seed = bootstrap_seed;
            drop(ds);
            let report = run::evaluate(&checkpoint, &data, &opts, out.as_deref())?;
            println!("{}", report.to_json()?);
        }
        Cmd::Ablate { config, modes, seeds, force } => {
            let exp = Experiment::load(&config)?;
            let modes = parse_modes(&modes)?;
            let seeds = seeds.unwrap_or_else(|| exp.seeds.clone());
            let table = run::ablate(&exp, &modes, &seeds, !force)?;
            print!("{}", table.grid_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
