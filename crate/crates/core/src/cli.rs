//! Command-line driver.
//!
//! Exit codes: 0 on success, 2 for configuration and usage errors, 3 for
//! numeric failures (non-finite values, divergence), 1 for anything else.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use crate::analysis::{
    its_from_parts, level_set_curve, plateau_index, potential_surface, sample_equilibrium, simulate_reduced,
    ItsSettings, ReducedSimSettings,
};
use crate::error::{Error, Result};
use crate::io::{load_json, load_trajectory, save_frames, save_json, save_trajectory, write_csv_table};
use crate::msm::ItsRow;
use crate::simulate::{make_benchmark_dataset, Benchmark, SimOverrides};
use crate::training::{Checkpoint, EpochRecord, TrainConfig, Trainer};
use crate::trajectory::Trajectory;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rcflow", version, about = "Reaction-coordinate flows with Brownian reduced kinetics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Its,
    Surface,
    Levelset,
    Project,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleMode {
    Equilibrium,
    Reconstruct,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a benchmark system and write its trajectory.
    Simulate {
        /// doublewell, mueller or swissroll.
        #[arg(long)]
        system: String,
        /// JSON file of simulation overrides (`{}` keeps the defaults).
        #[arg(long)]
        config: PathBuf,
        /// Output trajectory (.csv or .rct).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the latent trajectory of the Swiss roll.
        #[arg(long)]
        latent: Option<PathBuf>,
    },
    /// Train a model on one or more trajectories.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        /// JSON training configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch loss table; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analyse a trained checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        /// Output file: CSV table, or a trajectory file for `project`.
        #[arg(long)]
        out: PathBuf,
        /// Trajectories to project (`project`) or to compare against (`its`).
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Full-state timescale table for `its --data`; defaults to
        /// `<out stem>.full.csv`.
        #[arg(long)]
        full_out: Option<PathBuf>,
        /// Grid points per axis for `surface` and `levelset`.
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        /// Comma-separated lower grid bounds; defaults to the mixture grid.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        lb: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        ub: Option<Vec<f64>>,
        /// Frames of reduced dynamics for `its`.
        #[arg(long, default_value_t = 100_000)]
        frames: usize,
        #[arg(long, default_value_t = 50)]
        states: usize,
        /// Comma-separated lags in frames for `its`.
        #[arg(long, value_delimiter = ',')]
        lags: Option<Vec<usize>>,
        #[arg(long, default_value_t = 6)]
        timescales: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Draw configurations from a trained model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: SampleMode,
        /// Number of equilibrium samples.
        #[arg(long, default_value_t = 0)]
        n: usize,
        /// `(z, v)` rows to map back for `reconstruct`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_OTHER
    }
}

/// Read a configuration file; any failure is a configuration error.
fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    load_json(path).map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::config(format!("cannot read configuration: {other}")),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = load_json(path)?;
    if ckpt.format_version != crate::training::CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", ckpt.format_version),
        ));
    }
    Ok(ckpt)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            system,
            config,
            out,
            frames,
            seed,
            latent,
        } => simulate(&system, &config, &out, frames, seed, latent.as_deref()),
        Command::Train {
            data,
            config,
            out,
            resume,
            loss_csv,
            seed,
        } => train(&data, &config, &out, resume.as_deref(), loss_csv, seed),
        Command::Analyze {
            ckpt,
            mode,
            out,
            data,
            full_out,
            resolution,
            lb,
            ub,
            frames,
            states,
            lags,
            timescales,
            seed,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            match mode {
                AnalyzeMode::Its => {
                    let mut settings = ItsSettings {
                        n_states: states,
                        n_timescales: timescales,
                        kmeans_seed: seed,
                        ..ItsSettings::default()
                    };
                    if let Some(l) = lags {
                        settings.lags = l;
                    }
                    let sim = ReducedSimSettings {
                        n_frames: frames,
                        seed,
                        ..ReducedSimSettings::default()
                    };
                    let full_out = full_out.unwrap_or_else(|| with_suffix(&out, ".full.csv"));
                    analyze_its(&ckpt, &data, &out, &full_out, &sim, &settings)
                }
                AnalyzeMode::Surface => analyze_surface(&ckpt, &out, resolution, lb, ub),
                AnalyzeMode::Levelset => analyze_levelset(&ckpt, &out, resolution, lb, ub),
                AnalyzeMode::Project => analyze_project(&ckpt, &data, &out),
            }
        }
        Command::Sample {
            ckpt,
            mode,
            n,
            input,
            out,
            seed,
        } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let x = match mode {
                SampleMode::Equilibrium => sample_equilibrium(&ckpt, n, seed)?,
                SampleMode::Reconstruct => {
                    let input = input.ok_or_else(|| Error::config("reconstruct needs --input with (z, v) rows"))?;
                    let zv = load_trajectory(&input)?;
                    if zv.dim() != ckpt.flow.dim() {
                        return Err(Error::config(format!(
                            "reconstruct input has {} columns, the flow maps {} (z, v) coordinates",
                            zv.dim(),
                            ckpt.flow.dim()
                        )));
                    }
                    ckpt.reconstruct(zv.frames())?
                }
            };
            save_frames(&out, x)
        }
    }
}

fn simulate(system: &str, config: &Path, out: &Path, frames: Option<usize>, seed: Option<u64>, latent: Option<&Path>) -> Result<()> {
    let system: Benchmark = system.parse()?;
    let mut overrides: SimOverrides = load_config(config)?;
    if frames.is_some() {
        overrides.n_frames = frames;
    }
    if seed.is_some() {
        overrides.seed = seed;
    }
    let cfg = system.config_with(&overrides);
    cfg.validate()?;
    log::info!("simulating {system}: {} frames, beta {}, step {}", cfg.n_frames, cfg.beta, cfg.step);
    let data = make_benchmark_dataset(system, &cfg)?;
    save_trajectory(out, &data.trajectory)?;
    if let Some(path) = latent {
        let lat = data
            .latent
            .ok_or_else(|| Error::config(format!("{system} has no latent trajectory")))?;
        save_trajectory(path, &lat)?;
    }
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from("epoch,phase,lr,loss_kin,loss_eq,loss_total\n");
    for r in history {
        let f = crate::io::fmt_f64;
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.phase,
            f(r.learning_rate),
            f(r.loss_kin),
            r.loss_eq.map_or_else(|| "nan".to_string(), f),
            f(r.loss_total)
        ));
    }
    crate::io::write_atomic(path, text.as_bytes())
}

fn train(data: &[PathBuf], config: &Path, out: &Path, resume: Option<&Path>, loss_csv: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let trajs: Vec<Trajectory> = data.iter().map(|p| load_trajectory(p)).collect::<Result<_>>()?;
    let loss_path = loss_csv.unwrap_or_else(|| with_suffix(out, ".loss.csv"));
    let mut trainer = match resume {
        Some(p) => Trainer::resume(load_checkpoint(p)?, cfg, &trajs)?,
        None => Trainer::new(cfg, &trajs)?,
    };
    log::info!(
        "training on {} pairs of dimension {} (lag {} frames, tau {})",
        trainer.dataset().len(),
        trainer.dataset().dim(),
        trainer.dataset().lag_steps(),
        trainer.dataset().tau()
    );
    let result = trainer.run(&mut |t| {
        save_json(out, &t.checkpoint())?;
        write_loss_csv(&loss_path, t.history())
    });
    match result {
        Ok(()) => {
            save_json(out, &trainer.checkpoint())?;
            write_loss_csv(&loss_path, trainer.history())
        }
        Err(e) => {
            if e.is_numeric() {
                let dump = with_suffix(out, ".diverged.json");
                if save_json(&dump, &trainer.checkpoint()).is_ok() {
                    log::error!("model state at the failure written to {}", dump.display());
                }
            }
            Err(e)
        }
    }
}

fn its_table(rows: &[ItsRow], n: usize) -> (Vec<String>, Vec<Vec<Option<f64>>>) {
    let header = std::iter::once("lag".to_string())
        .chain((1..=n).map(|i| format!("t{i}")))
        .collect();
    let body = rows
        .iter()
        .map(|r| std::iter::once(Some(r.tau)).chain(r.timescales.iter().copied()).collect())
        .collect();
    (header, body)
}

fn analyze_its(ckpt: &Checkpoint, data: &[PathBuf], out: &Path, full_out: &Path, sim: &ReducedSimSettings, s: &ItsSettings) -> Result<()> {
    let reduced = simulate_reduced(ckpt, sim)?;
    let red_rows = its_from_parts(&[reduced.frames()], ckpt.time_per_frame, s)?;
    let (h, b) = its_table(&red_rows, s.n_timescales);
    write_csv_table(out, &h, &b)?;
    if data.is_empty() {
        return Ok(());
    }
    let trajs: Vec<Trajectory> = data.iter().map(|p| load_trajectory(p)).collect::<Result<_>>()?;
    if let Some(t) = trajs.iter().find(|t| t.dim() != ckpt.input_dim()) {
        return Err(Error::config(format!(
            "comparison data have dimension {}, the model expects {}",
            t.dim(),
            ckpt.input_dim()
        )));
    }
    let views: Vec<_> = trajs.iter().map(|t| t.frames()).collect();
    let full_rows = its_from_parts(&views, ckpt.time_per_frame, s)?;
    let (h, b) = its_table(&full_rows, s.n_timescales);
    write_csv_table(full_out, &h, &b)?;
    if let Some(i) = plateau_index(&full_rows, 0.1) {
        if let Some(red) = red_rows.iter().find(|r| r.lag_steps == full_rows[i].lag_steps) {
            for (k, (f, r)) in full_rows[i].timescales.iter().zip(&red.timescales).enumerate() {
                if let (Some(f), Some(r)) = (f, r) {
                    println!(
                        "lag {}: t{} full {:.6e} reduced {:.6e} ratio {:.4}",
                        full_rows[i].tau,
                        k + 1,
                        f,
                        r,
                        r / f
                    );
                }
            }
        }
    }
    Ok(())
}

fn surface_bounds(ckpt: &Checkpoint, lb: Option<Vec<f64>>, ub: Option<Vec<f64>>) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = ckpt.potential()?.grid();
    let lb = lb.unwrap_or_else(|| grid.lb.clone());
    let ub = ub.unwrap_or_else(|| grid.ub.clone());
    if lb.len() != ckpt.rc_dim() || ub.len() != ckpt.rc_dim() {
        return Err(Error::config(format!("--lb and --ub need {} values", ckpt.rc_dim())));
    }
    Ok((lb, ub))
}

fn analyze_surface(ckpt: &Checkpoint, out: &Path, resolution: usize, lb: Option<Vec<f64>>, ub: Option<Vec<f64>>) -> Result<()> {
    let (lb, ub) = surface_bounds(ckpt, lb, ub)?;
    let s = potential_surface(&ckpt.snapshot()?, &lb, &ub, resolution)?;
    let header = (0..ckpt.rc_dim())
        .map(|j| format!("z{j}"))
        .chain(std::iter::once("V".to_string()))
        .collect::<Vec<_>>();
    write_csv_table(out, &header, &rows_of(&s))
}

fn analyze_levelset(ckpt: &Checkpoint, out: &Path, resolution: usize, lb: Option<Vec<f64>>, ub: Option<Vec<f64>>) -> Result<()> {
    if ckpt.rc_dim() != 1 {
        return Err(Error::config(format!(
            "levelset needs a 1-dimensional reaction coordinate, model has {}",
            ckpt.rc_dim()
        )));
    }
    let (lb, ub) = surface_bounds(ckpt, lb, ub)?;
    let c = level_set_curve(ckpt, lb[0], ub[0], resolution)?;
    let header = std::iter::once("z".to_string())
        .chain((0..c.ncols() - 1).map(|j| format!("x{j}")))
        .collect::<Vec<_>>();
    write_csv_table(out, &header, &rows_of(&c))
}

fn analyze_project(ckpt: &Checkpoint, data: &[PathBuf], out: &Path) -> Result<()> {
    let [path] = data else {
        return Err(Error::config("project needs exactly one --data trajectory"));
    };
    let t = load_trajectory(path)?;
    let z = ckpt.project(t.frames())?;
    save_trajectory(out, &t.map_frames(z)?)
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<Option<f64>>> {
    a.rows().into_iter().map(|r| r.iter().map(|v| Some(*v)).collect()).collect()
}

/// Apply `RCFLOW_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RCFLOW_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("RCFLOW_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::config("RCFLOW_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("cannot configure worker threads: {e}")))?;
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    let outcome = configure_threads().and_then(|()| run(cli));
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
