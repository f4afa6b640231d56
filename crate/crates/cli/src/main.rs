mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use forest_structure::{Error, ErrorKind};

use manifest::Recorder;

const EXIT_CODES: &str = "\
Exit status:
  0  success
  2  bad input (missing files, shape mismatches, missing members, invalid configuration)
  3  numeric failure (divergence, non-finite values, failed gradient check)
  4  format error (malformed tile, checkpoint or JSON headers)";

#[derive(Parser)]
#[command(name = "fstr", version, about = "Forest structure retrieval with calibrated uncertainty", after_help = EXIT_CODES)]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "FSTR_THREADS")]
    threads: Option<usize>,

    /// Where to write the run manifest (default: `<out>.manifest.json`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Rasterize ALS point-cloud variables onto a grid.
    Derive(DeriveArgs),
    /// Train one ensemble member.
    Train(TrainArgs),
    /// Tiled ensemble inference over one scene.
    Predict(PredictArgs),
    /// Inverse-variance fusion of prediction tiles.
    Fuse(FuseArgs),
    /// Metrics and diagnostics of predictions against a dataset split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one ensemble per input configuration.
    Ablate(AblateArgs),
    /// Finite-difference verification of the analytic gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scene width and height in pixels.
    #[arg(long, default_value_t = 90)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub scenes: usize,
    /// Optional scene configuration JSON; `--size` overrides its extent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DeriveArgs {
    /// CSV with header `x,y,z` or `x,y,dz`.
    #[arg(long)]
    pub points: PathBuf,
    /// `x0,y0,resolution,width,height` with (x0, y0) the north-west corner.
    #[arg(long)]
    pub grid: String,
    /// Tile whose mask plane (or first band, nonzero = forest) restricts the output.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Flat terrain elevation for `x,y,z` input.
    #[arg(long, conflicts_with = "dtm")]
    pub ground_elevation: Option<f64>,
    /// Terrain model tile (first band) for `x,y,z` input.
    #[arg(long)]
    pub dtm: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub member: usize,
    /// Checkpoint path; the history goes to `<out minus extension>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Directory of `*.ckpt` members.
    #[arg(long)]
    pub models: PathBuf,
    /// Scene directory.
    #[arg(long)]
    pub scene: PathBuf,
    /// Optical acquisition index.
    #[arg(long, default_value_t = 0)]
    pub optical: usize,
    /// Ascending-orbit acquisition index.
    #[arg(long, default_value_t = 0)]
    pub asc: usize,
    /// Descending-orbit acquisition index.
    #[arg(long, default_value_t = 0)]
    pub desc: usize,
    /// Use the descending orbit for single-orbit members.
    #[arg(long)]
    pub descending: bool,
    #[arg(long, default_value_t = 15)]
    pub window: usize,
    #[arg(long, default_value_t = 9)]
    pub stride: usize,
    #[arg(long, default_value_t = 11)]
    pub keep: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub predictions: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Prediction tiles in dataset scene order, or one directory of them.
    #[arg(long = "pred", num_args = 1.., required = true)]
    pub pred: Vec<PathBuf>,
    /// Dataset directory holding the references.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write SVG plots.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated input configurations.
    #[arg(long, default_value = "S2+S1,S2,S1", value_delimiter = ',')]
    pub configs: Vec<String>,
    /// Members per configuration.
    #[arg(long, default_value_t = 1)]
    pub members: usize,
    /// Training JSON as for `train`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Model configuration JSON (default: the desk architecture).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates checked per network parameter tensor; 0 checks all.
    #[arg(long, default_value_t = 8)]
    pub coords: usize,
    /// Report JSON.
    #[arg(long, default_value = "gradcheck.json")]
    pub out: PathBuf,
}

/// A failed command: library errors keep their class, failed checks are numeric.
pub enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(e) => match e.kind() {
                ErrorKind::BadInput => 2,
                ErrorKind::Numeric => 3,
                ErrorKind::Format => 4,
            },
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Lib(e) => e.to_string(),
            Failure::Check(m) => m.clone(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (name, out) = match &cli.command {
        Command::Synth(a) => ("synth", &a.out),
        Command::Derive(a) => ("derive", &a.out),
        Command::Train(a) => ("train", &a.out),
        Command::Predict(a) => ("predict", &a.out),
        Command::Fuse(a) => ("fuse", &a.out),
        Command::Evaluate(a) => ("evaluate", &a.out),
        Command::Ablate(a) => ("ablate", &a.out),
        Command::Gradcheck(a) => ("gradcheck", &a.out),
    };
    let manifest_path = cli.manifest.clone().unwrap_or_else(|| manifest::default_path(out));
    let mut rec = Recorder::new(name, cli.threads);
    let result = match &cli.command {
        _ if cli.threads == Some(0) => Err(Failure::Lib(Error::InvalidInput("--threads must be at least 1".into()))),
        Command::Synth(a) => commands::synth(a, &mut rec),
        Command::Derive(a) => commands::derive(a, &mut rec),
        Command::Train(a) => commands::train(a, &mut rec),
        Command::Predict(a) => commands::predict(a, &mut rec),
        Command::Fuse(a) => commands::fuse(a, &mut rec),
        Command::Evaluate(a) => commands::evaluate(a, &mut rec),
        Command::Ablate(a) => commands::ablate(a, &mut rec),
        Command::Gradcheck(a) => commands::gradcheck(a, &mut rec),
    };
    let (status, code) = match &result {
        Ok(()) => ("ok".to_string(), 0),
        Err(f) => (f.message(), f.exit_code()),
    };
    if let Err(f) = &result {
        eprintln!("error: {}", f.message());
    }
    if let Err(e) = rec.finish(&manifest_path, status, code as i32) {
        eprintln!("error: cannot write manifest {}: {e}", manifest_path.display());
        return ExitCode::from(if code == 0 { 2 } else { code });
    }
    ExitCode::from(code)
}
