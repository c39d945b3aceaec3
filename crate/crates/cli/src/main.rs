mod cmd;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "nimbus", version, about = "Procedural clouds, latent diffusion priors and inverse volume rendering")]
struct Cli {
    /// Worker thread cap; falls back to NIMBUS_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every config-driven command.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Options of the posterior-sampling commands.
#[derive(Args, Clone, Debug, Default)]
pub struct Solve {
    #[command(flatten)]
    pub common: Common,
    /// Diffuse-denoise rounds appended to every posterior draw.
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural cloud volumes.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train, apply and inspect the monoplanar codec.
    Codec {
        #[command(subcommand)]
        op: cmd::codec::Op,
    },
    /// Train the latent diffusion prior or sample from it.
    Diffusion {
        #[command(subcommand)]
        op: cmd::diffusion::Op,
    },
    /// Joint latent and rendering-parameter recovery from images.
    Reconstruct(Solve),
    /// Super-resolve a volume from coarse samples.
    Superres(Solve),
    /// Complete a partially observed volume.
    Inpaint(Solve),
    /// Reconstruct density from a transmittance image.
    Transmit(Solve),
    /// Prior-guided interpolation between two latents.
    Interp(Solve),
    /// Compare monoplanar, triplanar and dense-grid codecs.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of mono,tri,grid.
        #[arg(long, value_delimiter = ',')]
        reps: Option<Vec<String>>,
    },
    /// Volume quality metrics between a reference and a test volume.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("NIMBUS_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("NIMBUS_THREADS={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = threads(cli.threads)? {
        if n == 0 {
            return Err(CliError::config("thread count must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    match cli.command {
        Command::Gen { common, count } => cmd::gen::run(&common, count),
        Command::Codec { op } => cmd::codec::run(op),
        Command::Diffusion { op } => cmd::diffusion::run(op),
        Command::Reconstruct(a) => cmd::reconstruct::run(&a),
        Command::Superres(a) => cmd::solve::superres(&a),
        Command::Inpaint(a) => cmd::solve::inpaint(&a),
        Command::Transmit(a) => cmd::solve::transmit(&a),
        Command::Interp(a) => cmd::solve::interp(&a),
        Command::Bench { common, reps } => cmd::bench::run(&common, reps),
        Command::Metrics { reference, test, out } => cmd::metrics::run(&reference, &test, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
