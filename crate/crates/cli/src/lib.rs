//! Command-line driver: argument parsing, configuration and the workflows.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for
//! runtime failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hemopinn::backend::{Backend, NumericalBackend};
use hemopinn::evalkit::evaluate_surrogate_both;
use hemopinn::inverse::{fit, synthetic_study, DeConfig, MeasuredBeat};
use hemopinn::model::{Multipliers, ValveLaw, N_PARAMS, PARAM_NAMES};
use hemopinn::sampling::{
    calibrate_volume_scaling, calibration_design, lhs_sample, write_dataset, VolumeScaling,
    EXTREME_DIMS,
};
use hemopinn::seeds;
use hemopinn::sobol::analyze;
use hemopinn::solver::{solve_steady, SolverConfig};
use hemopinn::surrogate::SurrogateModel;
use hemopinn::trainer::{train, training_cases};
use serde::Serialize;

pub mod config;

/// Prints to stdout; a closed pipe is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Input {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] hemopinn::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use hemopinn::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Input { .. } => 1,
            CliError::Output { .. } => 2,
            CliError::Core(e) => match e {
                E::InvalidArgument(_)
                | E::OutOfRange { .. }
                | E::Validation(_)
                | E::DegenerateReference { .. }
                | E::Format(_)
                | E::Json(_) => 1,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "hemopinn",
    version,
    about = "Circulation model, neural surrogate, sensitivity analysis and beat fitting"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON config file, or one of the presets default, desk, full.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<String>,
    /// Root seed; overrides the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for the parallel stages (default: logical cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the circulation to steady state and write the waveforms.
    Simulate {
        /// Ten comma-separated multipliers (default: all 1).
        #[arg(long, value_delimiter = ',', num_args = 1)]
        multipliers: Option<Vec<f64>>,
    },
    /// Latin hypercube sample of multipliers.
    Dataset {
        /// Number of cases (default: train.n_cases).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Bracket the compartment volumes for the surrogate output scaling.
    Calibrate,
    /// Calibrate, then train the surrogate on the ODE residual.
    Train {
        /// Use this scaling instead of calibrating.
        #[arg(long, value_name = "PATH")]
        scaling: Option<PathBuf>,
    },
    /// Compare a surrogate against the numerical solver.
    Eval {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Number of cases (default: eval.n_cases).
        #[arg(long)]
        n_cases: Option<usize>,
    },
    /// Sobol indices of the waveform outputs.
    Sobol {
        /// Use this surrogate instead of the numerical solver.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Fit the parameters to one measured beat.
    Fit {
        /// CSV with header t_ms,V_lv_ml,P_lv_mmHg.
        #[arg(long, value_name = "PATH")]
        beat: PathBuf,
        /// Fit with this surrogate instead of the numerical solver.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Beat period (ms); default is inferred from the samples.
        #[arg(long)]
        period: Option<f64>,
        /// Sample index where systole starts.
        #[arg(long, default_value_t = 0)]
        systole_start: usize,
    },
    /// Generate beats from known parameters and measure their recovery.
    SyntheticStudy {
        /// Fit with this surrogate instead of the numerical solver.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Print parameter names, baselines and the resolved configuration.
    Info {
        /// Also describe this model file.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        // A pool that already exists (repeated in-process runs) is kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let cfg = RunConfig::load(g.config.as_deref().unwrap_or("default"))?.resolve(g.seed, g.out)?;
    match cli.command {
        Command::Info { model } => info(&cfg, model.as_deref()),
        cmd => {
            create_dir(&cfg.out)?;
            cfg.write_resolved()?;
            match cmd {
                Command::Simulate { multipliers } => simulate(&cfg, multipliers),
                Command::Dataset { n } => dataset(&cfg, n),
                Command::Calibrate => calibrate(&cfg).map(|_| ()),
                Command::Train { scaling } => train_cmd(&cfg, scaling.as_deref()),
                Command::Eval { model, n_cases } => eval(&cfg, &model, n_cases),
                Command::Sobol { model } => sobol(&cfg, model.as_deref()),
                Command::Fit {
                    beat,
                    model,
                    period,
                    systole_start,
                } => fit_cmd(&cfg, &beat, model.as_deref(), period, systole_start),
                Command::SyntheticStudy { model } => synthetic(&cfg, model.as_deref()),
                Command::Info { .. } => unreachable!(),
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Output {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Output {
            path: path.to_path_buf(),
            source: e,
        })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Input {
            path: path.to_path_buf(),
            source: e,
        })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(hemopinn::Error::from)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Output {
            path: path.to_path_buf(),
            source: e,
        })
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<()> {
    w.flush().map_err(|e| CliError::Output {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(path: &Path) -> Result<SurrogateModel> {
    if !path.is_file() {
        return Err(CliError::Input {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such model file"),
        });
    }
    Ok(SurrogateModel::load(path)?)
}

fn numerical(cfg: &RunConfig) -> Result<NumericalBackend> {
    Ok(NumericalBackend {
        space: cfg.space.build()?,
        constants: cfg.constants,
        solver: cfg.solver,
    })
}

#[derive(Serialize)]
struct SimulateSummary {
    multipliers: Multipliers,
    cycles_run: usize,
    converged: bool,
    cyclic_residual: f64,
    stroke_volume_ml: f64,
    aortic_throughput_ml: f64,
    mitral_throughput_ml: f64,
}

fn simulate(cfg: &RunConfig, multipliers: Option<Vec<f64>>) -> Result<()> {
    let m = match multipliers {
        None => Multipliers::ones(),
        Some(v) => {
            let a: [f64; N_PARAMS] = v.try_into().map_err(|v: Vec<f64>| {
                CliError::Usage(format!(
                    "--multipliers needs {N_PARAMS} values, got {}",
                    v.len()
                ))
            })?;
            Multipliers(a)
        }
    };
    let space = cfg.space.build()?;
    let p = space.apply_multipliers(&m)?;
    let sol = solve_steady(&p, &cfg.constants, &cfg.solver)?;
    let path = cfg.out.join("waveforms.csv");
    let mut w = create(&path)?;
    sol.write_csv(&mut w)?;
    finish(&path, w)?;
    write_json(
        &cfg.out.join("summary.json"),
        &SimulateSummary {
            multipliers: m,
            cycles_run: sol.cycles_run,
            converged: sol.converged,
            cyclic_residual: sol.cyclic_residual,
            stroke_volume_ml: sol.stroke_volume(),
            aortic_throughput_ml: sol.aortic_throughput,
            mitral_throughput_ml: sol.mitral_throughput,
        },
    )?;
    say!(
        "{} (converged: {}, {} cycles)",
        path.display(),
        sol.converged,
        sol.cycles_run
    );
    Ok(())
}

fn dataset(cfg: &RunConfig, n: Option<usize>) -> Result<()> {
    let space = cfg.space.build()?;
    let cases = lhs_sample(
        n.unwrap_or(cfg.train.n_cases),
        &space,
        seeds::derive_seed(cfg.seed, seeds::DATASET),
    )?;
    let path = cfg.out.join("dataset.csv");
    let mut w = create(&path)?;
    write_dataset(&cases, &mut w)?;
    finish(&path, w)?;
    say!("{}", path.display());
    Ok(())
}

/// Solver used to bracket volumes for a model trained towards `alpha_final`.
fn calibration_solver(cfg: &RunConfig) -> SolverConfig {
    SolverConfig {
        law: ValveLaw::Smooth {
            alpha: cfg.train.alpha_final,
        },
        ..cfg.solver
    }
}

fn calibrate(cfg: &RunConfig) -> Result<VolumeScaling> {
    let space = cfg.space.build()?;
    let design = calibration_design(
        &space,
        &EXTREME_DIMS,
        cfg.surrogate.calibration_lhs,
        seeds::derive_seed(cfg.seed, seeds::CALIBRATION),
    )?;
    let scaling =
        calibrate_volume_scaling(&design, &space, &cfg.constants, &calibration_solver(cfg))?;
    let path = cfg.out.join("scaling.json");
    write_json(&path, &scaling)?;
    say!("{}", path.display());
    Ok(scaling)
}

fn train_cmd(cfg: &RunConfig, scaling: Option<&Path>) -> Result<()> {
    let scaling = match scaling {
        Some(p) => {
            let s: VolumeScaling = serde_json::from_reader(open(p)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            s.validate()?;
            s
        }
        None => calibrate(cfg)?,
    };
    let space = cfg.space.build()?;
    let (train_set, test_set) = training_cases(&space, &cfg.train)?;
    let mut model = SurrogateModel::new(
        cfg.surrogate.architecture(),
        cfg.surrogate.n_harmonics,
        space,
        scaling,
        cfg.train.alpha_initial,
        cfg.constants,
        seeds::derive_seed(cfg.seed, seeds::INIT),
    )?;
    let log_path = cfg.out.join("train_log.csv");
    let model_path = cfg.out.join("model.bin");
    let result = train(
        &mut model,
        &train_set,
        &test_set,
        &cfg.train,
        Some(&model_path),
        |r| {
            eprintln!("{}", r.csv_row());
        },
    );
    // The log is written even when training stops on divergence.
    let log = match result {
        Ok(log) => log,
        Err(e) => {
            model.save(&model_path)?;
            return Err(e.into());
        }
    };
    let mut w = create(&log_path)?;
    log.write_csv(&mut w)?;
    finish(&log_path, w)?;
    model.save(&model_path)?;
    say!(
        "{} (best epoch {}, test MSE {:.3e} -> {:.3e})",
        model_path.display(),
        log.best_epoch,
        log.initial_test_mse,
        log.final_test_mse
    );
    Ok(())
}

fn eval(cfg: &RunConfig, model: &Path, n_cases: Option<usize>) -> Result<()> {
    let model = load_model(model)?;
    let n = n_cases.unwrap_or(cfg.eval.n_cases);
    let (smooth, hard) = evaluate_surrogate_both(
        &model,
        n,
        seeds::derive_seed(cfg.seed, seeds::EVAL),
        &cfg.solver,
    )?;
    write_json(&cfg.out.join("eval_smooth.json"), &smooth)?;
    write_json(&cfg.out.join("eval_hard.json"), &hard)?;
    let path = cfg.out.join("eval_cases.csv");
    let mut w = create(&path)?;
    smooth.write_cases_csv(&mut w)?;
    finish(&path, w)?;
    for c in &smooth.compartments {
        say!("{:6} mean {:.4} max {:.4}", c.name, c.rmae.mean, c.rmae.max);
    }
    Ok(())
}

fn sobol(cfg: &RunConfig, model: Option<&Path>) -> Result<()> {
    let backend: Box<dyn Backend> = match model {
        Some(p) => Box::new(load_model(p)?),
        None => Box::new(numerical(cfg)?),
    };
    let result = analyze(backend.as_ref(), &cfg.sobol)?;
    write_json(&cfg.out.join("sobol.json"), &result)?;
    let path = cfg.out.join("sobol_timepoints.csv");
    let mut w = create(&path)?;
    result.write_timepoint_csv(&mut w)?;
    finish(&path, w)?;
    for o in &result.outputs {
        let st: Vec<String> = o
            .time_averaged
            .st
            .iter()
            .zip(&result.parameters)
            .map(|(s, n)| format!("{n}={s:.3}"))
            .collect();
        say!("{} ST: {}", o.output.name(), st.join(" "));
    }
    Ok(())
}

fn fit_backend(cfg: &RunConfig, model: Option<&Path>) -> Result<Box<dyn Backend>> {
    Ok(match model {
        Some(p) => Box::new(load_model(p)?),
        None => Box::new(numerical(cfg)?),
    })
}

fn fit_cmd(
    cfg: &RunConfig,
    beat: &Path,
    model: Option<&Path>,
    period: Option<f64>,
    systole_start: usize,
) -> Result<()> {
    let beat = MeasuredBeat::read_csv(open(beat)?, period, systole_start)?;
    let backend = fit_backend(cfg, model)?;
    let de = DeConfig {
        seed: seeds::derive_seed(cfg.seed, seeds::DE),
        ..cfg.de.clone()
    };
    let result = fit(&beat, backend.as_ref(), &de, &[])?;
    let path = cfg.out.join("fit.json");
    write_json(&path, &result)?;
    say!(
        "{} (R2 volume {:.5}, R2 pressure {:.5})",
        path.display(),
        result.r2_volume,
        result.r2_pressure
    );
    Ok(())
}

fn synthetic(cfg: &RunConfig, model: Option<&Path>) -> Result<()> {
    let generator = numerical(cfg)?;
    let fitter = fit_backend(cfg, model)?;
    let study = synthetic_study(&generator, fitter.as_ref(), &cfg.de, &cfg.synthetic)?;
    write_json(&cfg.out.join("synthetic.json"), &study)?;
    let path = cfg.out.join("synthetic.csv");
    let mut w = create(&path)?;
    study.write_csv(&mut w)?;
    finish(&path, w)?;
    for (n, e) in study.parameters.iter().zip(&study.rmae) {
        say!("{n:6} RMAE {e:.5}");
    }
    say!(
        "min R2 volume {:.5}, pressure {:.5}, failed {}",
        study.r2_volume_min,
        study.r2_pressure_min,
        study.n_failed
    );
    Ok(())
}

#[derive(Serialize)]
struct ModelInfo {
    architecture: hemopinn::surrogate::Architecture,
    n_params: usize,
    alpha: f64,
    free_parameters: Vec<String>,
    scaling: VolumeScaling,
}

#[derive(Serialize)]
struct Info<'a> {
    version: &'a str,
    parameters: Vec<&'a str>,
    baseline: [f64; N_PARAMS],
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelInfo>,
}

fn info(cfg: &RunConfig, model: Option<&Path>) -> Result<()> {
    let model = model
        .map(|p| -> Result<ModelInfo> {
            let m = load_model(p)?;
            Ok(ModelInfo {
                architecture: m.architecture(),
                n_params: m.n_params(),
                alpha: m.alpha,
                free_parameters: m
                    .space
                    .free_dims()
                    .iter()
                    .map(|&d| PARAM_NAMES[d].to_string())
                    .collect(),
                scaling: m.scaling,
            })
        })
        .transpose()?;
    let info = Info {
        version: env!("CARGO_PKG_VERSION"),
        parameters: PARAM_NAMES.to_vec(),
        baseline: hemopinn::model::InputParameters::baseline().to_array(),
        config: cfg,
        model,
    };
    say!(
        "{}",
        serde_json::to_string_pretty(&info).map_err(hemopinn::Error::from)?
    );
    Ok(())
}
