//! `fovx` — field-of-view extension for diffusion MRI.
//!
//! Verbs: phantom | train | impute | evaluate | qa. Exit codes: 0 success,
//! 2 configuration error, 3 data/format error, 1 unexpected failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fovx_core::cli::{cmd_evaluate, cmd_impute, cmd_phantom, cmd_qa, cmd_train, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "fovx", version, about = "Field-of-view extension for diffusion MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, jobs: self.jobs, ..Overrides::default() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom datasets plus a manifest.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Output directory for the dataset.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the four plane/shell generators from a dataset manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest CSV.
        #[arg(long)]
        manifest: PathBuf,
        /// Output bundle directory.
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Impute missing slices for every manifest subject.
    Impute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Trained bundle directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Output directory for imputed studies.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare imputed outputs against a reference manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Reference (ground-truth) manifest CSV.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<subject>_fovx.nii.gz` outputs.
        #[arg(long)]
        test_dir: PathBuf,
        /// Output directory for the CSV report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate cutoff thickness and side for every manifest subject.
    Qa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for qa.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> fovx_core::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Phantom { common, out } => {
            let mut ov = common.overrides();
            ov.out = Some(out);
            let cfg = RunConfig::load(common.config.as_deref(), &ov)?;
            cmd_phantom(&cfg)
        }
        Command::Train { common, manifest, bundle } => {
            let mut ov = common.overrides();
            ov.manifest = Some(manifest);
            ov.bundle = Some(bundle);
            let cfg = RunConfig::load(common.config.as_deref(), &ov)?;
            cmd_train(&cfg)
        }
        Command::Impute { common, manifest, bundle, out } => {
            let mut ov = common.overrides();
            ov.manifest = Some(manifest);
            ov.bundle = Some(bundle);
            ov.out = Some(out);
            let cfg = RunConfig::load(common.config.as_deref(), &ov)?;
            cmd_impute(&cfg)
        }
        Command::Evaluate { common, manifest, test_dir, out } => {
            let mut ov = common.overrides();
            ov.manifest = Some(manifest);
            ov.test_dir = Some(test_dir);
            ov.out = Some(out);
            let cfg = RunConfig::load(common.config.as_deref(), &ov)?;
            cmd_evaluate(&cfg)
        }
        Command::Qa { common, manifest, out } => {
            let mut ov = common.overrides();
            ov.manifest = Some(manifest);
            ov.out = Some(out);
            let cfg = RunConfig::load(common.config.as_deref(), &ov)?;
            cmd_qa(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fovx: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
