use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod attack;
mod evaluate;
mod metrics;

/// Exit status for bad flags, configs or manifests.
pub const EXIT_USAGE: u8 = 2;
/// Exit status when at least one pair or sample failed.
pub const EXIT_FAILED: u8 = 1;

#[derive(Parser)]
#[command(name = "praf", version, about = "Targeted transfer attack on a toy ViT ensemble")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Craft adversarial PNGs for every pair in a manifest.
    Attack(attack::AttackArgs),
    /// PSNR / SSIM between clean and adversarial images.
    Metrics(metrics::MetricsArgs),
    /// Score caption pairs with an LLM judge.
    Evaluate(evaluate::EvaluateArgs),
    /// Print the effective configuration as TOML.
    ShowConfig(ShowConfigArgs),
    /// Write a deterministic synthetic scene as a PNG.
    Synth(SynthArgs),
}

/// Config keys settable from the command line; each flag maps to one key.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigOverrides {
    #[arg(long, value_name = "N")]
    pub image_size: Option<String>,
    #[arg(long, value_name = "T")]
    pub iterations: Option<String>,
    #[arg(long, value_name = "M")]
    pub stages: Option<String>,
    /// TOML array, e.g. "[16, 32, 64]".
    #[arg(long, value_name = "LIST")]
    pub resolutions: Option<String>,
    /// Number or fraction such as 16/255.
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub eta: Option<String>,
    /// TOML array, e.g. "[1, 3, 5]".
    #[arg(long, value_name = "LIST")]
    pub ranks: Option<String>,
    #[arg(long)]
    pub gamma: Option<String>,
    #[arg(long)]
    pub lambda_cls: Option<String>,
    #[arg(long)]
    pub lambda_patch: Option<String>,
    #[arg(long, value_name = "BOOL")]
    pub crop_enabled: Option<String>,
    #[arg(long)]
    pub crop_scale_min: Option<String>,
    #[arg(long)]
    pub crop_scale_max: Option<String>,
    /// descent | literal_ascent
    #[arg(long)]
    pub update: Option<String>,
    /// top_k | bottom_k
    #[arg(long)]
    pub patch_selection: Option<String>,
    #[arg(long, value_name = "BOOL")]
    pub layer_selection: Option<String>,
    /// nearest | bilinear | bicubic
    #[arg(long)]
    pub downsample: Option<String>,
    #[arg(long)]
    pub upsample: Option<String>,
    /// Any other key, as section.key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigOverrides {
    pub fn to_pairs(&self) -> anyhow::Result<Vec<(String, String)>> {
        let fields = [
            ("ensemble.image_size", &self.image_size),
            ("schedule.iterations", &self.iterations),
            ("schedule.stages", &self.stages),
            ("schedule.resolutions", &self.resolutions),
            ("attack.epsilon", &self.epsilon),
            ("attack.eta", &self.eta),
            ("attack.ranks", &self.ranks),
            ("attack.gamma", &self.gamma),
            ("attack.lambda_cls", &self.lambda_cls),
            ("attack.lambda_patch", &self.lambda_patch),
            ("attack.crop_enabled", &self.crop_enabled),
            ("attack.crop_scale_min", &self.crop_scale_min),
            ("attack.crop_scale_max", &self.crop_scale_max),
            ("attack.update", &self.update),
            ("attack.patch_selection", &self.patch_selection),
            ("attack.layer_selection", &self.layer_selection),
            ("attack.downsample", &self.downsample),
            ("attack.upsample", &self.upsample),
        ];
        let mut out: Vec<(String, String)> = fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Args)]
struct ShowConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// A failure classified by exit status.
pub enum Failure {
    Usage(anyhow::Error),
    Failed(anyhow::Error),
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Failure::Usage(e.into())
    }
}

/// Reads the config file (or defaults) and applies overrides.
pub fn load_config(path: Option<&PathBuf>, overrides: &[(String, String)]) -> anyhow::Result<(String, PathBuf, praf_core::RunConfig)> {
    let (text, path) = match path {
        Some(p) => (
            std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?,
            p.clone(),
        ),
        None => (String::new(), PathBuf::from("<defaults>")),
    };
    let cfg = praf_core::RunConfig::parse_with_overrides(&text, &path, overrides)?;
    Ok((text, path, cfg))
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    if args.size == 0 {
        return Err(Failure::usage(anyhow::anyhow!("--size must be positive")));
    }
    let img = praf_core::image::synthetic_scene(args.size, args.seed);
    praf_core::save_image(&img, &args.output).map_err(|e| Failure::Failed(e.into()))
}

fn show_config(args: ShowConfigArgs) -> Result<(), Failure> {
    let overrides = args.overrides.to_pairs().map_err(Failure::usage)?;
    let (_, _, cfg) = load_config(args.config.as_ref(), &overrides).map_err(Failure::usage)?;
    print!("{}", cfg.to_toml());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Attack(a) => attack::run(a),
        Command::Metrics(a) => metrics::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::ShowConfig(a) => show_config(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}
