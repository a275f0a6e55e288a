//! `retinex-mef`: train, decompose, fuse and evaluate from the command line.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use retinex_mef::Error;

#[derive(Parser, Debug)]
#[command(name = "retinex-mef", version, about = "Glare-aware Retinex decomposition and exposure fusion")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the decomposition networks on a dataset root.
    Train(TrainArgs),
    /// Fuse an under/over pair into one image.
    Fuse(FuseArgs),
    /// Render one fused image per target exposure.
    Adjust(AdjustArgs),
    /// Dump every decomposition component as raw maps and previews.
    Decompose(PairArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
    /// Tabulate the exposure curve.
    Curve(CurveArgs),
    /// Generate synthetic scenes with ground truth.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub crops_per_scene: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// One of recon_on_r_hat, no_smooth, no_init, no_suppress, no_consist.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Hold out this many scenes; the split is written to split.json.
    #[arg(long, default_value_t = 0)]
    pub test_count: usize,
    /// Continue from a checkpoint manifest.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Keep a checkpoint for every epoch.
    #[arg(long)]
    pub keep_all: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PairArgs {
    #[arg(long)]
    pub under: PathBuf,
    #[arg(long)]
    pub over: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Arithmetic used for inference.
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("mode").args(["k", "exposure"]).multiple(false)))]
pub struct FuseArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Curve parameter (default 0.5, plain averaging).
    #[arg(long)]
    pub k: Option<f64>,
    /// Target exposure level, inverted for k.
    #[arg(long)]
    pub exposure: Option<f64>,
}

#[derive(Args, Debug)]
pub struct AdjustArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// start:stop:step, inclusive.
    #[arg(long)]
    pub sweep: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset root with one sequence directory per scene.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Directory holding `<scene>.png` (or .ppm) fused results.
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    #[arg(long, default_value_t = 101)]
    pub samples: usize,
    /// Curve parameters to tabulate, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    pub ks: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON scene config; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Exit code for each error class.
pub fn exit_code(err: &Error) -> u8 {
    match err.class() {
        "io" | "ingest" | "codec" => 3,
        "range" | "domain" => 4,
        "checkpoint" => 5,
        "numerical" => 6,
        "config" => 7,
        "shape" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 2 {
                let first = e.to_string().lines().next().unwrap_or_default().to_string();
                eprintln!("error class=usage code=2 msg={:?}", first.trim_start_matches("error: "));
                eprintln!("{e}");
            } else {
                print!("{e}");
            }
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error class={} code={code} msg={:?}", e.class(), e.to_string());
            ExitCode::from(code)
        }
    }
}
