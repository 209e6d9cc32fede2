//! `convreg`: run spectral-regularization experiments on convolution kernels,
//! audit the implementation, and inspect the structured matrix of a kernel.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use convreg_core::spectral::{SpectralSolver, SvdBackend};
use convreg_core::structured::build_multi;
use convreg_core::validation::{verify, VerifyOptions};
use convreg_core::{init_kernel, run, GdConfig, InitScheme, KernelTensor, PenaltyKind, RunStatus};

#[derive(Parser)]
#[command(name = "convreg", version, about = "Spectral regularizers for convolution kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run gradient descent on one penalty and write trace, kernel and summary.
    Run(RunArgs),
    /// Run the oracle suite; exits nonzero if any check fails.
    Verify(VerifyArgs),
    /// Print the structure and extreme singular values of a kernel's matrix.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct KernelShape {
    k: usize,
    g: usize,
    h: usize,
}

impl FromStr for KernelShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad kernel shape {s:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        match parts[..] {
            [k1, k2, g, h] if k1 == k2 && k1 > 0 && g > 0 && h > 0 => Ok(Self { k: k1, g, h }),
            [k1, k2, _, _] if k1 != k2 => Err(format!("kernel must be square, got {k1}x{k2}")),
            _ => Err(format!("expected k,k,g,h with positive entries, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Uniform01,
    File,
}

impl FromStr for InitArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SvdArg {
    Dense,
    Iterative,
}

impl FromStr for SvdArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        <Self as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Kernel shape as k,k,g,h.
    #[arg(long)]
    kernel_shape: Option<KernelShape>,
    /// Spatial size N of the N×N inputs [default: 20].
    #[arg(long)]
    input_size: Option<usize>,
    /// Penalty: frob, sigma-min or combined [default: frob].
    #[arg(long)]
    reg: Option<PenaltyKind>,
    /// Step size [default: 1e-5].
    #[arg(long)]
    lr: Option<f64>,
    /// Number of updates [default: 100].
    #[arg(long)]
    iters: Option<usize>,
    /// Seed for the uniform initializer [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Initial kernel for `--init file`.
    #[arg(long)]
    kernel_file: Option<PathBuf>,
    #[arg(long)]
    out_trace: Option<PathBuf>,
    #[arg(long)]
    out_kernel: Option<PathBuf>,
    #[arg(long)]
    out_summary: Option<PathBuf>,
    #[arg(long, value_enum)]
    svd: Option<SvdArg>,
    /// Relative gap below which σ_min counts as repeated [default: 1e-8].
    #[arg(long)]
    gap_threshold: Option<f64>,
    /// Record every this many iterations [default: 1].
    #[arg(long)]
    trace_every: Option<usize>,
    /// Write the final kernel's matrix in Matrix Market format.
    #[arg(long)]
    export_mm: Option<PathBuf>,
    /// File of `key = value` lines using the flag names; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Largest N in the operator and Ω grid.
    #[arg(long, default_value_t = 8)]
    grid_max_n: usize,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Corrupt analytic results to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    kernel_file: Option<PathBuf>,
    /// Kernel shape as k,k,g,h when no file is given.
    #[arg(long)]
    kernel_shape: Option<KernelShape>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    input_size: usize,
    #[arg(long, value_enum, default_value_t = SvdArg::Dense)]
    svd: SvdArg,
    #[arg(long)]
    export_mm: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] convreg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}:{line}: {message}")]
    Config { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parsed `key = value` config file.
struct ConfigFile {
    path: PathBuf,
    entries: HashMap<String, (usize, String)>,
}

impl ConfigFile {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(path, &text)
    }

    fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().trim_start_matches("--").replace('_', "-");
            if !RUN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("unknown key {key:?}"),
                });
            }
            entries.insert(key, (i + 1, value.trim().to_string()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    fn get<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|e: T::Err| CliError::Config {
                path: self.path.clone(),
                line: *line,
                message: format!("{key}: {e}"),
            }),
        }
    }
}

const RUN_KEYS: [&str; 15] = [
    "kernel-shape",
    "input-size",
    "reg",
    "lr",
    "iters",
    "seed",
    "init",
    "kernel-file",
    "out-trace",
    "out-kernel",
    "out-summary",
    "svd",
    "gap-threshold",
    "trace-every",
    "export-mm",
];

impl RunArgs {
    /// Fills every unset flag from the config file.
    fn merge_config(mut self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let cfg = ConfigFile::load(&path)?;
        macro_rules! fill {
            ($($field:ident => $key:literal),* $(,)?) => {
                $(if self.$field.is_none() {
                    self.$field = cfg.get($key)?;
                })*
            };
        }
        fill!(
            kernel_shape => "kernel-shape",
            input_size => "input-size",
            reg => "reg",
            lr => "lr",
            iters => "iters",
            seed => "seed",
            init => "init",
            kernel_file => "kernel-file",
            out_trace => "out-trace",
            out_kernel => "out-kernel",
            out_summary => "out-summary",
            svd => "svd",
            gap_threshold => "gap-threshold",
            trace_every => "trace-every",
            export_mm => "export-mm",
        );
        Ok(self)
    }
}

fn solver_for(svd: SvdArg, gap_threshold: Option<f64>) -> SpectralSolver {
    let mut solver = SpectralSolver::default();
    if svd == SvdArg::Iterative {
        solver.backend = SvdBackend::iterative();
    }
    if let Some(thr) = gap_threshold {
        solver.gap_threshold = thr;
    }
    solver
}

#[derive(Debug, Serialize)]
struct Summary {
    initial_sigma_max: f64,
    initial_sigma_min: f64,
    final_sigma_max: f64,
    final_sigma_min: f64,
    initial_penalty: f64,
    final_penalty: f64,
    iters: usize,
    status: &'static str,
}

fn initial_kernel(args: &RunArgs) -> Result<KernelTensor, CliError> {
    let init = args.init.unwrap_or(if args.kernel_file.is_some() {
        InitArg::File
    } else {
        InitArg::Uniform01
    });
    match init {
        InitArg::Uniform01 => {
            let shape = args
                .kernel_shape
                .ok_or_else(|| CliError::Usage("--kernel-shape is required with --init uniform01".into()))?;
            Ok(init_kernel(shape.k, shape.g, shape.h, args.seed.unwrap_or(1), &InitScheme::Uniform01)?)
        }
        InitArg::File => {
            let path = args
                .kernel_file
                .clone()
                .ok_or_else(|| CliError::Usage("--init file needs --kernel-file".into()))?;
            match args.kernel_shape {
                Some(s) => Ok(init_kernel(s.k, s.g, s.h, 0, &InitScheme::File(path))?),
                None => Ok(KernelTensor::read(&path)?),
            }
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, CliError> {
    let args = args.merge_config()?;
    let k0 = initial_kernel(&args)?;
    let n = args.input_size.unwrap_or(20);
    let kind = args.reg.unwrap_or(PenaltyKind::Frobenius);
    let mut cfg = GdConfig::new(kind, args.lr.unwrap_or(1e-5), args.iters.unwrap_or(100));
    cfg.trace_every = args.trace_every.unwrap_or(1);
    cfg.seed = args.seed.unwrap_or(1);
    cfg.solver = solver_for(args.svd.unwrap_or(SvdArg::Dense), args.gap_threshold);

    let out = run(&k0, n, &cfg)?;

    if let Some(path) = &args.out_trace {
        out.trace.write_csv(path)?;
    }
    if let Some(path) = &args.out_kernel {
        out.kernel.write(path)?;
    }
    if let Some(path) = &args.export_mm {
        export_matrix_market(&out.kernel, n, path)?;
    }
    let summary = Summary {
        initial_sigma_max: out.initial.sigma_max,
        initial_sigma_min: out.initial.sigma_min,
        final_sigma_max: out.last.sigma_max,
        final_sigma_min: out.last.sigma_min,
        initial_penalty: out.initial.penalty,
        final_penalty: out.last.penalty,
        iters: out.iters,
        status: out.status.as_str(),
    };
    if !out.sigma_min_drops.is_empty() {
        eprintln!(
            "warning: sigma_min decreased at {} recorded iterations (first at {}); consider a smaller --lr",
            out.sigma_min_drops.len(),
            out.sigma_min_drops[0]
        );
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    match &args.out_summary {
        Some(path) => fs::write(path, format!("{json}\n")).map_err(io_err(path))?,
        None => println!("{json}"),
    }
    eprintln!(
        "{}: {} iters, sigma_max {:.6e} -> {:.6e}, sigma_min {:.6e} -> {:.6e}",
        out.status.as_str(),
        out.iters,
        summary.initial_sigma_max,
        summary.final_sigma_max,
        summary.initial_sigma_min,
        summary.final_sigma_min
    );
    Ok(if out.status == RunStatus::DegenerateSigma {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn export_matrix_market(kernel: &KernelTensor, n: usize, path: &Path) -> Result<(), CliError> {
    let matrix = build_multi(kernel, n)?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    matrix.write_matrix_market(&mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode, CliError> {
    if args.grid_max_n < 3 {
        return Err(CliError::Usage("--grid-max-n must be at least 3".into()));
    }
    let report = verify(&VerifyOptions {
        grid_max_n: args.grid_max_n,
        seed: args.seed,
        inject_fault: args.inject_fault,
        ..VerifyOptions::default()
    })?;
    print!("{report}");
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_inspect(args: InspectArgs) -> Result<ExitCode, CliError> {
    let kernel = match (&args.kernel_file, args.kernel_shape) {
        (Some(path), _) => KernelTensor::read(path)?,
        (None, Some(s)) => init_kernel(s.k, s.g, s.h, args.seed, &InitScheme::Uniform01)?,
        (None, None) => return Err(CliError::Usage("inspect needs --kernel-file or --kernel-shape".into())),
    };
    let n = args.input_size;
    let matrix = build_multi(&kernel, n)?;
    let bw = matrix.bandwidth();
    println!("kernel      {}x{}x{}x{}", kernel.k(), kernel.k(), kernel.g(), kernel.h());
    println!("input_size  {n}");
    println!("matrix      {}x{}", matrix.n_rows(), matrix.n_cols());
    println!("nnz         {}", matrix.nnz());
    println!("blocks      {}x{} grid of {}x{} banded blocks", kernel.h(), kernel.g(), n * n, n * n);
    println!(
        "bandwidth   outer lower={} upper={}, inner lower={} upper={}",
        bw.outer_lower, bw.outer_upper, bw.inner_lower, bw.inner_upper
    );
    let pairs = solver_for(args.svd, None).extreme_pairs(&kernel, n)?;
    println!("sigma_max   {:.12e}", pairs.max.sigma);
    println!("sigma_min   {:.12e}", pairs.min.sigma);
    println!("gap         {:.6e}", pairs.min.gap);
    if let Some(path) = &args.export_mm {
        export_matrix_market(&kernel, n, path)?;
        println!("exported    {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
