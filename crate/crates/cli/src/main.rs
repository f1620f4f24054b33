use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "nz", version, about = "Perpetual view generation: train, generate, evaluate, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config layering shared by every command.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// Config file with dotted `section.key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes runs/<name>/{config.toml, checkpoints/, metrics.jsonl}.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Roll out frames from one input image.
    Generate(GenerateArgs),
    /// Score a checkpoint; writes report.json.
    Evaluate(EvaluateArgs),
    /// Start the interactive flythrough HTTP/WebSocket service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Listen address; defaults to flight.bind.
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Autopilot,
    TrajectoryFile,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Start image (PNG or JPEG).
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    pub input: Option<PathBuf>,
    /// 16-bit grayscale disparity for `--input`; larger is nearer.
    #[arg(long, requires = "input")]
    pub disparity: Option<PathBuf>,
    /// Start from synthetic scene number N instead of an image file.
    #[arg(long)]
    pub scene: Option<usize>,
    /// Number of frames; defaults to generate.steps, or the whole file in trajectory-file mode.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value = "autopilot")]
    pub mode: Mode,
    /// Trajectory JSON for `--mode trajectory-file`.
    #[arg(long, required_if_eq("mode", "trajectory-file"))]
    pub trajectory: Option<PathBuf>,
    #[arg(long)]
    pub no_sky_correction: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to runs/<name>/frames.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Sliding-window size for windowed FID.
    #[arg(long)]
    pub window: Option<usize>,
    /// Number of evaluation scenes or images.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub short_length: Option<usize>,
    #[arg(long)]
    pub long_length: Option<usize>,
    #[arg(long)]
    pub fid_length: Option<usize>,
    /// Report path; defaults to runs/<name>/report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::Train { cfg, resume } => commands::train(&cfg, resume.as_deref()),
        Command::Generate(a) => commands::generate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Serve { checkpoint, cfg, bind } => commands::serve(&checkpoint, &cfg, bind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
