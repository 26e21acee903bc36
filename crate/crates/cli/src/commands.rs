use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use makeup_core::data::{load_dataset, make_sample, SampleLoader, Split};
use makeup_core::evaluation::{evaluate_run, format_table, list_pngs, EvalReport, GRID_SUFFIX};
use makeup_core::image::{load_rgb8, Image};
use makeup_core::inference::{preview_grid, stylize};
use makeup_core::training::{load_checkpoint, resume, train, TrainState};
use rayon::prelude::*;

use crate::config::{EmbedderKind, ParserKind, RemoverKind, RunConfig};

/// A request that cannot be acted on as given; maps to the usage exit code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// How a batch command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    Partial { failed: usize, total: usize },
}

impl Outcome {
    fn from_counts(failed: usize, total: usize) -> Result<Self> {
        match failed {
            0 => Ok(Outcome::Complete),
            f if f == total => bail!("all {total} items failed"),
            f => Ok(Outcome::Partial { failed: f, total }),
        }
    }
}

fn dataset_root(cfg: &RunConfig, root: Option<PathBuf>) -> Result<PathBuf> {
    root.or_else(|| cfg.data.root.clone())
        .ok_or_else(|| UsageError("no dataset root: pass --root or set data.root".into()).into())
}

pub fn prepare(cfg: &RunConfig, root: Option<PathBuf>) -> Result<Outcome> {
    let root = dataset_root(cfg, root)?;
    let manifest = load_dataset(&root, &cfg.data)?;
    let services = cfg.adapters.services()?;
    let res = cfg.data.resolution;
    let derive = |e: &makeup_core::data::ManifestEntry| (e.id.clone(), make_sample(e, &manifest.cache_dir, &services, res));
    let results: Vec<_> = if services.is_serial() {
        manifest.entries.iter().map(derive).collect()
    } else {
        manifest.entries.par_iter().map(derive).collect()
    };

    let mut rejected = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(_) => {}
            Err(makeup_core::Error::SampleRejected { reason, .. }) => rejected.push(format!("{id}: {reason}")),
            Err(e) => failed.push(format!("{id}: {e}")),
        }
    }

    println!("dataset {}", manifest.root.display());
    println!("  manifest hash {}", manifest.hash());
    println!("  train {}  test {}", manifest.count(Split::Train), manifest.count(Split::Test));
    println!("  cache {}", manifest.cache_dir.display());
    println!("  unreadable files {}", manifest.errors.len());
    for issue in &manifest.errors {
        println!("    {}: {}", issue.path.display(), issue.reason);
    }
    println!("  rejected {}", rejected.len());
    for r in &rejected {
        println!("    {r}");
    }
    for f in &failed {
        log::error!("{f}");
    }
    Outcome::from_counts(failed.len(), manifest.entries.len().max(1))
}

pub struct TrainArgs {
    pub root: Option<PathBuf>,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub force: bool,
}

pub fn train_cmd(cfg: &RunConfig, args: TrainArgs) -> Result<Outcome> {
    let root = dataset_root(cfg, args.root)?;
    let manifest = Arc::new(load_dataset(&root, &cfg.data)?);
    let hash = manifest.hash();
    let loader = SampleLoader::new(
        manifest,
        cfg.adapters.services()?,
        cfg.data.resolution,
        cfg.data.seed,
        cfg.data.augment_flip,
    );
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml())?;

    let device = Device::Cpu;
    let mut state = match &args.resume {
        Some(ckpt) => resume(ckpt, &cfg.generator, &cfg.train, &hash, args.force, &device)?,
        None => TrainState::new(&cfg.generator, &cfg.train, &hash, DType::F32, &device)?,
    };
    log::info!(
        "training from step {} to {} on {} samples",
        state.step(),
        cfg.train.total_steps,
        loader.manifest().count(Split::Train)
    );
    let last = train(&mut state, &loader, &args.out, |_| {})?;
    println!("{}", last.display());
    Ok(Outcome::Complete)
}

pub struct InferArgs {
    pub input: PathBuf,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub num_styles: usize,
    pub out: PathBuf,
    pub parser: Option<ParserKind>,
    pub remover: Option<RemoverKind>,
}

pub fn output_name(id: &str, seed: u64, k: usize) -> String {
    format!("{id}__s{seed}__k{k}.png")
}

pub fn infer(cfg: &RunConfig, args: InferArgs) -> Result<Outcome> {
    if args.num_styles == 0 {
        return Err(UsageError("--num-styles must be at least 1".into()).into());
    }
    let mut adapters = cfg.adapters.clone();
    adapters.parser = args.parser.unwrap_or(adapters.parser);
    adapters.remover = args.remover.unwrap_or(adapters.remover);
    let mut errors = Vec::new();
    let check = RunConfig { adapters: adapters.clone(), ..cfg.clone() };
    check.validate(&mut errors);
    if !errors.is_empty() {
        return Err(crate::config::ConfigErrors(errors).into());
    }
    let services = adapters.services()?;

    let inputs = if args.input.is_dir() {
        list_pngs(&args.input)?
    } else if args.input.is_file() {
        vec![args.input.clone()]
    } else {
        return Err(UsageError(format!("input {} does not exist", args.input.display())).into());
    };
    if inputs.is_empty() {
        return Err(UsageError(format!("no PNG images in {}", args.input.display())).into());
    }

    let state = load_checkpoint(&args.checkpoint, &Device::Cpu)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let generator = &state.generator;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let mut failed = 0;
    for path in &inputs {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let run = || -> Result<()> {
            let source = Image::from_rgb8(&load_rgb8(path)?);
            let result = stylize(generator, &source, &id, &services, args.seed, args.num_styles)?;
            if result.mask.is_empty() {
                log::warn!("{id}: no face region found; outputs equal the input");
            }
            for (k, img) in result.outputs.iter().enumerate() {
                img.save(&args.out.join(output_name(&id, args.seed, k)))?;
            }
            preview_grid(&source, &result)?.save(&args.out.join(format!("{id}{GRID_SUFFIX}.png")))?;
            Ok(())
        };
        match run() {
            Ok(()) => log::info!("{id}: wrote {} styles", args.num_styles),
            Err(e) => {
                failed += 1;
                log::error!("{id}: {e:#}");
            }
        }
    }
    Outcome::from_counts(failed, inputs.len())
}

pub struct EvaluateArgs {
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub bare: PathBuf,
    pub baselines: Vec<(String, PathBuf)>,
    pub embedder: Option<EmbedderKind>,
    pub label: String,
    pub out: Option<PathBuf>,
}

pub fn parse_baseline(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, dir)) if !name.is_empty() && !dir.is_empty() => Ok((name.into(), dir.into())),
        _ => Err(format!("expected name=dir, got `{s}`")),
    }
}

pub fn evaluate(cfg: &RunConfig, args: EvaluateArgs) -> Result<Outcome> {
    let mut eval = cfg.eval.clone();
    if let Some(kind) = args.embedder {
        eval.feature_embedder = kind;
        eval.identity_embedder = kind;
    }
    let check = RunConfig { eval: eval.clone(), ..cfg.clone() };
    let mut errors = Vec::new();
    check.validate(&mut errors);
    if !errors.is_empty() {
        return Err(crate::config::ConfigErrors(errors).into());
    }
    for dir in [&args.generated, &args.reference, &args.bare].into_iter().chain(args.baselines.iter().map(|(_, d)| d)) {
        if !dir.is_dir() {
            return Err(UsageError(format!("{} is not a directory", dir.display())).into());
        }
    }
    let (feature, identity) = (eval.feature(), eval.identity());

    let runs = std::iter::once((args.label.clone(), args.generated.clone())).chain(args.baselines.iter().cloned());
    let mut reports: Vec<EvalReport> = Vec::new();
    for (label, dir) in runs {
        let report = evaluate_run(&label, &dir, &args.reference, &args.bare, feature.as_ref(), identity.as_ref())
            .with_context(|| format!("evaluating {label} ({})", dir.display()))?;
        if !report.excluded.is_empty() {
            log::warn!("{label}: excluded {:?}", report.excluded);
        }
        reports.push(report);
    }
    let table = format_table(&reports);
    print!("{table}");
    if let Some(out) = &args.out {
        write_reports(out, &reports, &table)?;
    }
    Ok(Outcome::Complete)
}

fn write_reports(out: &Path, reports: &[EvalReport], table: &str) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("eval_report.json"), serde_json::to_string_pretty(reports)?)?;
    std::fs::write(out.join("eval_report.txt"), table)?;
    Ok(())
}
