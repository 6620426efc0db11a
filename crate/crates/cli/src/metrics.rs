use std::path::PathBuf;

use anyhow::Context;
use clap::{ArgGroup, Args};
use praf_core::{load_image, PairManifest, QualityReport};

use crate::Failure;

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["manifest", "pair"])))]
pub struct MetricsArgs {
    /// Compare each record's clean image with its output.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Compare two images directly.
    #[arg(long, num_args = 2, value_names = ["REFERENCE", "CANDIDATE"])]
    pair: Option<Vec<PathBuf>>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

pub fn run(args: MetricsArgs) -> Result<(), Failure> {
    let pairs: Vec<(PathBuf, PathBuf)> = match (&args.manifest, &args.pair) {
        (Some(m), _) => PairManifest::load(m)
            .map_err(Failure::usage)?
            .records
            .into_iter()
            .map(|r| (r.clean, r.output))
            .collect(),
        (None, Some(p)) => vec![(p[0].clone(), p[1].clone())],
        (None, None) => unreachable!("clap enforces one input"),
    };
    let mut report = QualityReport::default();
    for (a, b) in &pairs {
        let ia = load_image(a).map_err(Failure::usage)?;
        let ib = load_image(b).map_err(Failure::usage)?;
        report
            .push(a.display().to_string(), b.display().to_string(), &ia, &ib)
            .with_context(|| format!("{} vs {}", a.display(), b.display()))
            .map_err(Failure::Failed)?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.output {
        Some(p) => std::fs::write(p, json + "\n")
            .with_context(|| p.display().to_string())
            .map_err(Failure::Failed)?,
        None => println!("{json}"),
    }
    Ok(())
}
