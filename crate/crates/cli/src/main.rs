use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctdl_cli::commands::{self, ReconArgs, ReconMethod};
use ctdl_cli::config::{PhantomChoice, KEYS};
use ctdl_cli::{exit_code, ExperimentConfig};
use ctdl_core::diagnostics::Region;
use ctdl_core::Result;

#[derive(Parser)]
#[command(name = "ctdl", version, about = "Low-dose interior CT simulation, reconstruction and evaluation")]
struct Cli {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Kind {
    SheppLogan,
    Ellipses,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom attenuation map.
    Phantom {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long, default_value = "phantom.ctdl")]
        output: String,
    },
    /// Project an image and simulate a truncated low-dose scan.
    Simulate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "scan")]
        prefix: String,
    },
    /// Reconstruct a sinogram, optionally scoring it against a reference.
    Recon {
        #[arg(long, value_enum)]
        method: ReconMethod,
        #[arg(long)]
        sino: PathBuf,
        /// Truncation mask (default: every detector measured).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<String>,
        #[arg(long, default_value = "metrics.csv")]
        metrics: String,
        /// Sample label in the metrics CSV (default: the method name).
        #[arg(long)]
        label: Option<String>,
    },
    /// Train a network on simulated data, checkpointing every epoch.
    Train {
        #[arg(long, default_value = "model.ctdl")]
        checkpoint: String,
        #[arg(long, default_value = "loss.csv")]
        curves: String,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Compare methods over a simulated test set.
    Eval {
        #[arg(long, value_enum, value_delimiter = ',', default_value = "fbp,extrapolate-fbp,tv")]
        methods: Vec<ReconMethod>,
        /// Trained model to include (repeatable).
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "roi")]
        region: Region,
        #[arg(short, long, default_value = "eval.csv")]
        output: String,
    },
    /// Hankel singular-value spectra of stage-1 feature maps.
    Diagnose {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(short, long, default_value = "spectra.csv")]
        output: String,
    },
    /// Render an image container as an 8-bit PGM.
    Render {
        #[arg(long)]
        image: PathBuf,
        #[arg(short, long, default_value = "render.pgm")]
        output: String,
        /// Window low end (HU unless --raw).
        #[arg(long, allow_hyphen_values = true)]
        low: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        high: Option<f64>,
        /// Interpret the window in stored units.
        #[arg(long)]
        raw: bool,
    },
    /// List the configuration keys.
    Keys,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ctdl_core::Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Phantom { kind, nx, seed, output } => {
            if let Some(s) = seed {
                cfg.sim_seed = s;
            }
            let kind = match kind {
                Kind::SheppLogan => PhantomChoice::SheppLogan,
                Kind::Ellipses => PhantomChoice::Ellipses,
            };
            commands::cmd_phantom(&cfg, kind, nx, &output)?;
        }
        Command::Simulate { image, prefix } => {
            commands::cmd_simulate(&cfg, &image, &prefix)?;
        }
        Command::Recon { method, sino, mask, truth, checkpoint, output, metrics, label } => {
            let args = ReconArgs {
                method,
                sino: &sino,
                mask: mask.as_deref(),
                truth: truth.as_deref(),
                checkpoint: checkpoint.as_deref(),
                output: output.as_deref(),
                metrics: &metrics,
                label: label.as_deref(),
            };
            commands::cmd_recon(&cfg, &args)?;
        }
        Command::Train { checkpoint, curves, resume } => {
            commands::cmd_train(&cfg, &checkpoint, &curves, resume)?;
        }
        Command::Eval { methods, checkpoint, region, output } => {
            commands::cmd_eval(&cfg, &methods, &checkpoint, region, &output)?;
        }
        Command::Diagnose { checkpoint, output } => {
            commands::cmd_diagnose(&cfg, &checkpoint, &output)?;
        }
        Command::Render { image, output, low, high, raw } => {
            commands::cmd_render(&cfg, &image, &output, low, high, raw)?;
        }
        Command::Keys => {
            for (k, doc) in KEYS {
                println!("{k:<22} {doc}");
            }
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
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
