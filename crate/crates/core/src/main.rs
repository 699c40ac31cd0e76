use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use voxsr::cli::{self, GradcheckGrid, RunConfig, EXIT_OK, EXIT_USAGE, EXIT_VERIFY};
use voxsr::dataset::{build_training_set_with, load_dataset, save_dataset};
use voxsr::metrics::{format_metric, mse3d, psnr, ssim3d, SsimParams};
use voxsr::network::{load_model, save_model, BackwardFault, GradCheckOptions, Network, INIT_STD};
use voxsr::optimizer::train;
use voxsr::reconstruct::{super_resolve_with, Margin, TileSpec};
use voxsr::{load_volume, save_volume, Dims, Error, Result};

#[derive(Parser)]
#[command(
    name = "voxsr",
    version,
    about = "Volumetric CT super-resolution with a 3D residual CNN"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for initialization, shuffling and sampling; overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision for inference and benchmarks.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade, crop and mix volumes into a training-set file.
    Prepare {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a network on a prepared dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        history_csv: Option<PathBuf>,
        /// Standard deviation of the initial weights.
        #[arg(long, default_value_t = INIT_STD)]
        init_std: f64,
    },
    /// Super-resolve a volume with a trained model.
    Sr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long, default_value_t = TileSpec::default().tile)]
        tile: usize,
        #[arg(long, default_value = "auto")]
        margin: Margin,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two volumes; prints `metric,value` CSV.
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
        metrics: Vec<Metric>,
    },
    /// Finite-difference check of the analytic gradients (always 64-bit).
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "2,6,12")]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        kernels: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "true,false")]
        residual: Vec<bool>,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        spatial: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Write the per-config report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_relu_fault: bool,
    },
    /// Time forward+backward across a depth/kernel sweep.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "5,12,20")]
        depths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "3")]
        kernels: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Psnr,
    Ssim,
    Mse,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

fn config_or_default(path: Option<&PathBuf>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), cli::load_config)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Prepare {
            inputs,
            out,
            config,
        } => {
            let cfg = config_or_default(config.as_ref())?;
            let vols = inputs.iter().map(load_volume).collect::<Result<Vec<_>>>()?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let ds = build_training_set_with(&vols, &cfg.factors, &cfg.crop, &cfg.cubic, seed)?;
            save_dataset(&ds, out)?;
            println!("wrote {} sub-block pairs to {}", ds.len(), out.display());
        }
        Command::Train {
            dataset,
            config,
            out_model,
            history_csv,
            init_std,
        } => {
            if cli.precision == Precision::F64 {
                return Err(Error::config("precision", "training runs in 32-bit only"));
            }
            let mut cfg = config_or_default(config.as_ref())?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if !(*init_std >= 0.0 && init_std.is_finite()) {
                return Err(Error::config("init-std", "must be finite and non-negative"));
            }
            let ds = load_dataset(dataset, cfg.train.seed)?;
            let mut net = Network::<f32>::init_gaussian(cfg.network, cfg.train.seed, *init_std)?;
            let history = train(&mut net, &ds, &cfg.train)?;
            save_model(&net, out_model)?;
            if let Some(path) = history_csv {
                history.write_csv(path)?;
            }
            if let Some(loss) = history.final_loss() {
                println!("final loss {loss:e}");
            }
        }
        Command::Sr {
            model,
            input,
            factor,
            tile,
            margin,
            out,
        } => {
            let net = load_model(model)?;
            let lr = load_volume(input)?;
            let spec = TileSpec::new(*tile, *margin);
            let cubic = Default::default();
            let hr = match cli.precision {
                Precision::F32 => super_resolve_with(&net, &lr, *factor, &spec, &cubic, None)?,
                Precision::F64 => {
                    super_resolve_with(&net.cast::<f64>(), &lr, *factor, &spec, &cubic, None)?
                }
            };
            save_volume(&hr, out)?;
            println!("wrote {} volume to {}", hr.dims(), out.display());
        }
        Command::Eval { a, b, metrics } => {
            let (a, b) = (load_volume(a)?, load_volume(b)?);
            println!("metric,value");
            for m in metrics {
                let (name, v) = match m {
                    Metric::Psnr => ("psnr", psnr(&a, &b)?),
                    Metric::Ssim => ("ssim", ssim3d(&a, &b, &SsimParams::for_dtype(a.dtype()))?),
                    Metric::Mse => ("mse", mse3d(&a, &b)?),
                };
                println!("{name},{}", format_metric(v));
            }
        }
        Command::Gradcheck {
            depths,
            kernels,
            residual,
            channels,
            spatial,
            eps,
            tolerance,
            report,
            inject_relu_fault,
        } => {
            let grid = GradcheckGrid {
                depths: depths.clone(),
                kernels: kernels.clone(),
                residual: residual.clone(),
                channels: *channels,
                spatial: Dims::cube(*spatial),
                seed: cli.seed.unwrap_or(1),
                eps: *eps,
                tolerance: *tolerance,
            };
            let opts = GradCheckOptions {
                fault: inject_relu_fault.then_some(BackwardFault::ReluSignFlip),
                ..GradCheckOptions::default()
            };
            let rows = cli::run_gradcheck(&grid, &opts)?;
            match report {
                Some(path) => {
                    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                    cli::write_csv(&rows, f)?;
                }
                None => cli::write_csv(&rows, std::io::stdout().lock())?,
            }
            if rows.iter().any(|r| !r.pass) {
                eprintln!("gradient check failed for at least one config");
                return Ok(EXIT_VERIFY);
            }
        }
        Command::Bench {
            config,
            depths,
            kernels,
            m,
            reps,
            csv,
        } => {
            let cfg = config_or_default(config.as_ref())?;
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let rows = match cli.precision {
                Precision::F32 => {
                    cli::run_bench::<f32>(&cfg.network, depths, kernels, *m, *reps, seed)?
                }
                Precision::F64 => {
                    cli::run_bench::<f64>(&cfg.network, depths, kernels, *m, *reps, seed)?
                }
            };
            match csv {
                Some(path) => {
                    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                    cli::write_csv(&rows, f)?;
                }
                None => cli::write_csv(&rows, std::io::stdout().lock())?,
            }
        }
    }
    Ok(EXIT_OK)
}
