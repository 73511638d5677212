use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use wnsf::crb::{mbar_limit, DEFAULT_GRID_SIZE};
use wnsf::nalgebra::DMatrix;
use wnsf::eval::McResult;
use wnsf::{
    compute_mcl, compute_mcr, run_monte_carlo, simulate, wnsf_identify, CrbResult, DataSet, Error, ExperimentConfig,
    LoopKind, ModelOrders, SpectrumModel, WnsfOptions,
};

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const IO: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const SIMULATION: u8 = 3;
    pub const IDENTIFICATION: u8 = 4;
    pub const BOUND: u8 = 5;

    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Maps a library error raised while running a command whose own failure
    /// class is `stage`.
    fn from_lib(stage: u8, e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => Self::IO,
            Error::Json(_) | Error::Csv(_) | Error::InvalidArgument(_) => Self::CONFIG,
            Error::UnstableLoop(_) | Error::NonFiniteOutput | Error::ZeroNoiseEnergy => Self::SIMULATION,
            Error::NonInformative(_) => Self::BOUND,
            _ => stage,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new(CliError::IO, format!("{}: {e}", path.display()))
}

/// Reads and validates a config, reporting the JSON path of schema errors.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(CliError::CONFIG, format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        CliError::new(CliError::CONFIG, format!("{}: at `{at}`: {}", path.display(), e.into_inner()))
    })?;
    cfg.validate()
        .map_err(|e| CliError::new(CliError::CONFIG, format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(CliError::IO, e.to_string()))?;
    match out {
        Some(path) => {
            let mut f = File::create(path).map_err(|e| io_error(path, e))?;
            writeln!(f, "{text}").map_err(|e| io_error(path, e))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

/// `data.csv` -> `data.config.json`.
pub fn echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

pub fn simulate_cmd(config: &Path, out: Option<PathBuf>, seed: Option<u64>, with_noise: bool) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    let out = out
        .or_else(|| cfg.output.dataset.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::new(CliError::CONFIG, "no output path: pass --out or set output.dataset"))?;
    if let Some(s) = seed {
        cfg.experiment.seed = s;
    }
    let lc = cfg
        .loop_config(cfg.experiment.seed)
        .map_err(|e| CliError::from_lib(CliError::CONFIG, e))?;
    let data = simulate(&lc).map_err(|e| CliError::from_lib(CliError::SIMULATION, e))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let file = File::create(&out).map_err(|e| io_error(&out, e))?;
    data.write_csv(BufWriter::new(file), with_noise)
        .map_err(|e| CliError::from_lib(CliError::IO, e))?;
    cfg.output.dataset = Some(out.display().to_string());
    write_json(&cfg, Some(&echo_path(&out)))?;
    log::info!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

pub struct IdentifyArgs {
    pub data: PathBuf,
    pub orders: ModelOrders,
    pub n_grid: Vec<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub known_zero_ic: bool,
    pub no_noise_model: bool,
    pub delta_reg: f64,
    pub out: Option<PathBuf>,
}

pub fn identify_cmd(args: IdentifyArgs) -> CliResult<()> {
    let data = DataSet::load_csv(&args.data).map_err(|e| match e {
        Error::Io(io) => io_error(&args.data, io),
        other => CliError::new(CliError::CONFIG, format!("{}: {other}", args.data.display())),
    })?;
    let options = WnsfOptions {
        n_grid: args.n_grid,
        max_iter: args.max_iter,
        tol: args.tol,
        estimate_noise_model: !args.no_noise_model,
        delta_reg: args.delta_reg,
        known_zero_ic: args.known_zero_ic,
    };
    options
        .validate(data.len())
        .map_err(|e| CliError::new(CliError::CONFIG, e.to_string()))?;
    let est = wnsf_identify(&data, args.orders, &options)
        .map_err(|e| CliError::from_lib(CliError::IDENTIFICATION, e))?;
    write_json(&est, args.out.as_deref())
}

pub fn montecarlo_cmd(config: &Path, runs: Option<usize>, jobs: Option<usize>, out_dir: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let out_dir = out_dir
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::new(CliError::CONFIG, "no output directory: pass --out-dir or set output.dir"))?;
    let runs = runs.unwrap_or(cfg.experiment.runs);
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    // Infeasible loops fail every run the same way; report them up front.
    let lc = cfg
        .loop_config(cfg.experiment.seed)
        .map_err(|e| CliError::from_lib(CliError::CONFIG, e))?;
    if cfg.random_system.is_none() {
        lc.transfers(lc.loop_kind)
            .map_err(|e| CliError::from_lib(CliError::SIMULATION, e))?;
    }
    let mc: McResult = run_monte_carlo(&cfg, runs, jobs).map_err(|e| CliError::from_lib(CliError::IDENTIFICATION, e))?;
    mc.save(&out_dir).map_err(|e| CliError::from_lib(CliError::IO, e))?;
    write_json(&cfg, Some(&out_dir.join("config.json")))?;
    match &mc.fit {
        Some(fit) => println!(
            "{} runs, {} failed; FIT mean {:.4} median {:.4}{}",
            mc.runs,
            mc.failures,
            fit.mean,
            fit.median,
            mc.mse.as_ref().map(|m| format!("; MSE mean {:.6e}", m.mean)).unwrap_or_default()
        ),
        None => println!("{} runs, all failed", mc.runs),
    }
    if mc.failures == mc.runs {
        let first = mc.records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(CliError::new(CliError::IDENTIFICATION, format!("every run failed; first error: {first}")));
    }
    Ok(())
}

#[derive(Serialize)]
struct MbarReport {
    n: usize,
    #[serde(rename = "M_bar", with = "wnsf::crb::matrix_json")]
    matrix: DMatrix<f64>,
    relative_distance: f64,
}

#[derive(Serialize)]
struct CrbReport {
    system_seed: u64,
    loop_kind: LoopKind,
    noise_var: f64,
    grid_size: usize,
    mcr: CrbResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    mcl: Option<CrbResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mbar: Option<MbarReport>,
}

pub fn crb_cmd(config: &Path, grid_size: Option<usize>, seed: Option<u64>, mbar_order: Option<usize>, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let grid_size = grid_size.unwrap_or(DEFAULT_GRID_SIZE);
    let seed = seed.unwrap_or(cfg.experiment.seed);
    let lc = cfg.loop_config(seed).map_err(|e| CliError::from_lib(CliError::CONFIG, e))?;
    let sm = SpectrumModel::from_loop(&lc).map_err(|e| CliError::from_lib(CliError::BOUND, e))?;
    let mcr = compute_mcr(&sm, grid_size).map_err(|e| CliError::from_lib(CliError::BOUND, e))?;
    let mcl = match sm.loop_kind {
        LoopKind::Open => None,
        _ => Some(compute_mcl(&sm, grid_size).map_err(|e| CliError::from_lib(CliError::BOUND, e))?),
    };
    let mbar = match mbar_order {
        Some(n) => {
            let m = mbar_limit(&sm, n, grid_size).map_err(|e| CliError::from_lib(CliError::BOUND, e))?;
            let relative_distance = (&m - &mcr.m).norm() / mcr.m.norm();
            Some(MbarReport {
                n,
                matrix: m,
                relative_distance,
            })
        }
        None => None,
    };
    let report = CrbReport {
        system_seed: seed,
        loop_kind: sm.loop_kind,
        noise_var: sm.noise_var,
        grid_size,
        mcr,
        mcl,
        mbar,
    };
    write_json(&report, out.as_deref())
}
