use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use clap::Args;
use praf_core::{load_image, run_attack, save_image, AttackConfig, Ensemble, PairManifest, PairRecord, RunConfig};

use crate::{load_config, ConfigOverrides, Failure};

#[derive(Args)]
pub struct AttackArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pair manifest: clean,target,output[,key=value...] per line.
    #[arg(long)]
    manifest: PathBuf,
    /// Attack seed (sets attack.seed).
    #[arg(long)]
    seed: u64,
    /// Pairs processed concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

struct Job<'a> {
    record: &'a PairRecord,
    config: AttackConfig,
}

pub fn trace_path(output: &Path) -> PathBuf {
    suffixed(output, ".trace.jsonl")
}

pub fn stages_path(output: &Path) -> PathBuf {
    suffixed(output, ".stages.jsonl")
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn prepare<'a>(args: &AttackArgs, manifest: &'a PairManifest) -> anyhow::Result<(Ensemble, Vec<Job<'a>>)> {
    if args.workers == 0 {
        bail!("--workers must be at least 1");
    }
    let mut overrides = args.overrides.to_pairs()?;
    overrides.push(("attack.seed".into(), args.seed.to_string()));
    let (text, path, base) = load_config(args.config.as_ref(), &overrides)?;
    if manifest.is_empty() {
        bail!("{}: manifest has no pairs", args.manifest.display());
    }
    let mut jobs = Vec::with_capacity(manifest.len());
    for record in &manifest.records {
        let cfg = if record.overrides.is_empty() {
            base.clone()
        } else {
            let mut all = overrides.clone();
            all.extend(record.overrides.iter().cloned());
            RunConfig::parse_with_overrides(&text, &path, &all)
                .with_context(|| format!("{}:{}: per-pair overrides", args.manifest.display(), record.line))?
        };
        for input in [&record.clean, &record.target] {
            if !input.is_file() {
                bail!("{}:{}: input {} does not exist", args.manifest.display(), record.line, input.display());
            }
        }
        jobs.push(Job { record, config: cfg.attack_config() });
    }
    let ensemble = base.build_ensemble()?;
    Ok((ensemble, jobs))
}

fn write_jsonl(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| path.display().to_string())?);
    f(&mut w).and_then(|_| w.flush()).with_context(|| path.display().to_string())
}

fn run_pair(job: &Job, ensemble: &Ensemble) -> anyhow::Result<f64> {
    let r = job.record;
    let clean = load_image(&r.clean)?;
    let target = load_image(&r.target)?;
    if !clean.same_shape(&target) {
        bail!("clean and target sizes differ");
    }
    if clean.height() != ensemble.image_size() || clean.width() != ensemble.image_size() {
        bail!(
            "image is {}x{} but the ensemble expects {}x{}",
            clean.height(),
            clean.width(),
            ensemble.image_size(),
            ensemble.image_size()
        );
    }
    let outcome = run_attack(&clean, &target, ensemble, &job.config)?;
    if let Some(dir) = r.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    save_image(&outcome.adversarial, &r.output)?;
    write_jsonl(&trace_path(&r.output), |w| outcome.trace.write_iterations(w))?;
    write_jsonl(&stages_path(&r.output), |w| outcome.trace.write_stages(w))?;
    let reloaded = load_image(&r.output)?;
    Ok(praf_core::psnr(&reloaded, &clean)?)
}

pub fn run(args: AttackArgs) -> Result<(), Failure> {
    let manifest = PairManifest::load(&args.manifest).map_err(Failure::usage)?;
    let (ensemble, jobs) = prepare(&args, &manifest).map_err(Failure::Usage)?;

    let results: Vec<Mutex<Option<anyhow::Result<f64>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..args.workers.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                log::info!("pair {} -> {}", job.record.line, job.record.output.display());
                let r = run_pair(job, &ensemble);
                *results[i].lock().expect("result lock") = Some(r);
            });
        }
    });

    let mut failures = Vec::new();
    for (job, slot) in jobs.iter().zip(results) {
        let out = job.record.output.display();
        match slot.into_inner().expect("result lock").expect("every job ran") {
            Ok(db) => println!("ok {out} psnr_db={db:.4}"),
            Err(e) => {
                println!("FAILED {out}");
                failures.push(format!("line {}: {out}: {e:#}", job.record.line));
            }
        }
    }
    if failures.is_empty() {
        return Ok(());
    }
    eprintln!("{} of {} pair(s) failed:", failures.len(), jobs.len());
    for f in &failures {
        eprintln!("  {f}");
    }
    Err(Failure::Failed(anyhow!("{} pair(s) failed", failures.len())))
}
