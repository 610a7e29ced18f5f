//! Command-line front end: argument parsing, configuration layering and
//! the subcommands, callable in-process.

mod commands;
mod context;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use gfi_core::io::RunConfig;

/// Saliency masks for CNN classifiers by guided feature inversion.
#[derive(Parser, Debug)]
#[command(name = "gfi", version, about, allow_negative_numbers = true)]
pub struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct GlobalArgs {
    /// Architecture name from the registry (vgg19, alexnet, resnet18, toy).
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Checkpoint in safetensors format; defaults to the registry file name
    /// looked up in $GFI_WEIGHTS_DIR or the working directory.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Alternative architecture registry (TOML).
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Class to explain; defaults to the top-1 prediction.
    #[arg(long, global = true)]
    target_class: Option<usize>,
    /// Background image: gray, noise or blur.
    #[arg(long, global = true)]
    baseline: Option<String>,
    #[arg(long, global = true)]
    blur_radius: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stage-1 l1 weight.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Stage-2 l1 weight.
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Stage-2 background-activation weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    iters1: Option<usize>,
    #[arg(long, global = true)]
    iters2: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Override the inversion tap layer.
    #[arg(long, global = true)]
    inversion_layer: Option<String>,
    /// Override the layer whose channels compose the mask.
    #[arg(long, global = true)]
    base_layer: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Flat TOML file with any of the options above; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-image parallelism (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

impl GlobalArgs {
    fn to_run_config(&self) -> RunConfig {
        RunConfig {
            arch: self.arch.clone(),
            weights: self.weights.clone(),
            registry: self.registry.clone(),
            target_class: self.target_class,
            baseline: self.baseline.clone(),
            blur_radius: self.blur_radius,
            seed: self.seed,
            gamma: self.gamma,
            delta: self.delta,
            lambda: self.lambda,
            iters1: self.iters1,
            iters2: self.iters2,
            lr: self.lr,
            inversion_layer: self.inversion_layer.clone(),
            base_layer: self.base_layer.clone(),
            out_dir: self.out_dir.clone(),
            threads: self.threads,
            ..Default::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Explain images (files or directories); writes masks, overlays and a manifest.
    Explain(commands::explain::ExplainArgs),
    /// Bounding-box localization error against box annotations.
    EvalLocalization(commands::eval::LocalizationArgs),
    /// Pointing-game accuracy, with the image-center baseline.
    PointingGame(commands::eval::PointingArgs),
    /// Precision, recall, F-beta and MAE against ground-truth object masks.
    SaliencyDetect(commands::eval::DetectArgs),
    /// Adversarial inputs by FGSM and explanations of the true class.
    FgsmDemo(commands::fgsm::FgsmArgs),
    /// Vanilla-gradient saliency maps.
    GradBaseline(commands::explain::GradArgs),
}

/// 1 for problems with what the user supplied, 2 for internal failures.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<gfi_core::Error>() {
            return if e.is_user_error() { 1 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 1;
        }
    }
    2
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let flags = cli.global.to_run_config();
    let cfg = match &cli.global.config {
        Some(path) => RunConfig::from_path(path)?.merged(flags),
        None => flags,
    };
    match cli.command {
        Command::Explain(a) => commands::explain::run(cfg, a),
        Command::EvalLocalization(a) => commands::eval::localization(cfg, a),
        Command::PointingGame(a) => commands::eval::pointing(cfg, a),
        Command::SaliencyDetect(a) => commands::eval::detect(cfg, a),
        Command::FgsmDemo(a) => commands::fgsm::run(cfg, a),
        Command::GradBaseline(a) => commands::explain::grad(cfg, a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| gfi_core::Error::Input(e.to_string()))?;
    run(cli)
}
