use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fuselens::commands::{cmd_batch, cmd_eval, cmd_fuse, cmd_phantom, Method, ReportFormat, RunConfig};
use fuselens::fuse::OptimConfig;
use fuselens::image::PatchSpec;
use fuselens::losses::LossWeights;

/// Semantic-aware CT/MR image fusion: variational fusion against the
/// composite semantic + MEF-SSIM objective, classical baselines, quality
/// metrics, and batch evaluation.
#[derive(Parser)]
#[command(name = "fuselens", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse one registered CT/MR pair and write fused.png plus trace.json.
    Fuse(FuseArgs),
    /// Evaluate a fused image against its sources and print one record.
    Eval(EvalArgs),
    /// Fuse and evaluate every entry of a dataset manifest.
    Batch(BatchArgs),
    /// Generate a synthetic CT/MR phantom dataset with a manifest.
    Phantom(PhantomArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Variational,
    Average,
    Laplacian,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Variational => Method::Variational,
            MethodArg::Average => Method::Average,
            MethodArg::Laplacian => Method::Laplacian,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

/// Optimizer and patch parameters shared by `fuse` and `batch`. The MEF-SSIM
/// stability constant C is fixed at 0.0009.
#[derive(Args)]
struct TuneArgs {
    /// Weight on the semantic loss term.
    #[arg(long, default_value_t = 0.005)]
    alpha: f64,
    /// Weight on the MEF-SSIM loss term.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Optimizer learning rate.
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Maximum optimizer iterations.
    #[arg(long, default_value_t = 300)]
    iters: usize,
    /// Semantic-loss patch size.
    #[arg(long, default_value_t = 5)]
    sl_patch: usize,
    /// Semantic-loss patch stride.
    #[arg(long, default_value_t = 3)]
    sl_stride: usize,
    /// MEF-SSIM patch size.
    #[arg(long, default_value_t = 7)]
    mef_patch: usize,
    /// MEF-SSIM patch stride.
    #[arg(long, default_value_t = 1)]
    mef_stride: usize,
    /// Patches darker than this in both modalities are background.
    #[arg(long, default_value_t = 0.01)]
    bg_threshold: f64,
    /// Run seed, recorded for reproducibility.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TuneArgs {
    fn to_optim(&self) -> Result<OptimConfig, fuselens::FusionError> {
        Ok(OptimConfig {
            weights: LossWeights::new(self.alpha, self.beta)?,
            sl_spec: PatchSpec::new(self.sl_patch, self.sl_stride, self.bg_threshold)?,
            mef_spec: PatchSpec::new(self.mef_patch, self.mef_stride, 0.0)?,
            learning_rate: self.lr,
            max_iters: self.iters,
            seed: self.seed,
            ..OptimConfig::default()
        })
    }
}

#[derive(Args)]
#[command(after_help = "The MEF-SSIM stability constant C is fixed at 0.0009.")]
struct FuseArgs {
    /// CT-like source image (PGM or PNG).
    #[arg(long)]
    ct: PathBuf,
    /// MR-like source image (PGM or PNG).
    #[arg(long)]
    mr: PathBuf,
    /// Fusion method.
    #[arg(long, value_enum, default_value_t = MethodArg::Variational)]
    method: MethodArg,
    #[command(flatten)]
    tune: TuneArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// CT-like source image.
    #[arg(long)]
    ct: PathBuf,
    /// MR-like source image.
    #[arg(long)]
    mr: PathBuf,
    /// Fused image to score.
    #[arg(long)]
    fused: PathBuf,
    /// Report format.
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Args)]
#[command(after_help = "The MEF-SSIM stability constant C is fixed at 0.0009.")]
struct BatchArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Fusion method.
    #[arg(long, value_enum, default_value_t = MethodArg::Variational)]
    method: MethodArg,
    #[command(flatten)]
    tune: TuneArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for batch entries.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Report format.
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Args)]
struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs to generate.
    #[arg(long, default_value_t = 13)]
    count: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length in pixels (at least 32).
    #[arg(long, default_value_t = 256)]
    size: usize,
}

fn run(cli: Cli) -> Result<(), fuselens::FusionError> {
    match cli.command {
        Command::Fuse(args) => {
            let cfg = RunConfig {
                method: args.method.into(),
                optim: args.tune.to_optim()?,
                out_dir: args.out,
                ..RunConfig::default()
            };
            cmd_fuse(&args.ct, &args.mr, &cfg)
        }
        Command::Eval(args) => {
            let record = cmd_eval(&args.ct, &args.mr, &args.fused, args.format.into())?;
            print!("{record}");
            Ok(())
        }
        Command::Batch(args) => {
            if args.jobs == 0 {
                return Err(fuselens::FusionError::Validation(
                    "--jobs must be at least 1".to_string(),
                ));
            }
            let cfg = RunConfig {
                method: args.method.into(),
                optim: args.tune.to_optim()?,
                out_dir: args.out,
                format: args.format.into(),
                jobs: args.jobs,
            };
            cmd_batch(&args.manifest, &cfg)
        }
        Command::Phantom(args) => cmd_phantom(&args.out, args.count, args.seed, args.size),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
