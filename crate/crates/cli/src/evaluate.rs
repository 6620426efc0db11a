use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use praf_core::judge::{load_caption_pairs, JudgeClient, JudgeSettings};

use crate::{load_config, Failure};

#[derive(Args)]
pub struct EvaluateArgs {
    /// JSON lines with target_text and adversarial_text.
    #[arg(long)]
    captions: PathBuf,
    /// TOML run configuration providing the [judge] section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Comma-separated, e.g. 0.5,0.6,0.7.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// Count score >= threshold as success.
    #[arg(long)]
    inclusive: bool,
    #[arg(long)]
    max_concurrency: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    backoff_ms: Option<u64>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn settings(args: &EvaluateArgs) -> anyhow::Result<JudgeSettings> {
    let (_, _, cfg) = load_config(args.config.as_ref(), &[])?;
    let mut s = match (cfg.judge, &args.model) {
        (Some(s), _) => s,
        (None, Some(m)) => JudgeSettings::new(m.clone(), praf_core::judge::DEFAULT_ENDPOINT),
        (None, None) => return Err(anyhow!("the judge model must be given with --model or judge.model")),
    };
    if let Some(m) = &args.model {
        s.model = m.clone();
    }
    if let Some(e) = &args.endpoint {
        s.endpoint = e.clone();
    }
    if let Some(t) = &args.thresholds {
        s.thresholds = t.clone();
    }
    if args.inclusive {
        s.inclusive = true;
    }
    if let Some(v) = args.max_concurrency {
        s.max_concurrency = v;
    }
    if let Some(v) = args.timeout_secs {
        s.timeout_secs = v;
    }
    if let Some(v) = args.max_retries {
        s.max_retries = v;
    }
    if let Some(v) = args.backoff_ms {
        s.backoff_ms = v;
    }
    s.validate()?;
    Ok(s)
}

pub fn run(args: EvaluateArgs) -> Result<(), Failure> {
    let settings = settings(&args).map_err(Failure::Usage)?;
    let pairs = load_caption_pairs(&args.captions).map_err(Failure::usage)?;
    let client = JudgeClient::new(settings).map_err(Failure::usage)?;
    let report = client.evaluate(&pairs).map_err(|e| Failure::Failed(e.into()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.output {
        Some(p) => std::fs::write(p, json + "\n")
            .with_context(|| p.display().to_string())
            .map_err(Failure::Failed)?,
        None => println!("{json}"),
    }
    if report.unscored > 0 {
        eprintln!("{} of {} sample(s) unscored", report.unscored, report.total);
    }
    Ok(())
}
