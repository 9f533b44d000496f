//! `stagegen` — command-line driver for the staged edge/grayscale synthesis
//! toolkit: data synthesis and preprocessing, two-stage adversarial
//! training, sample generation, Fréchet-distance evaluation, the
//! contraction probe, and loss plotting.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.
//! Reports go to stdout; progress and errors go to stderr.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stagegen::dataset::{self, BuildOptions, DatasetManifest, Split};
use stagegen::imageops::{load_image, to_model_range, ImageBuffer};
use stagegen::metrics::{
    contraction_probe_stage2, fid_score, fit_embedder, Embedder, EmbedderOptions, ImageKind,
};
use stagegen::training::{self, EdgeSource, Stage1Session, Stage2Session};

use config::{write_echo, ModelOverrides, ResolvedRunConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "stagegen",
    version,
    about = "Staged edge/grayscale image synthesis toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic face corpus with derived
    /// grayscale/edge pairs and a manifest.
    SynthData(SynthDataArgs),
    /// Convert a directory of RGB images into paired grayscale/edge
    /// training sets plus a manifest.
    Preprocess(PreprocessArgs),
    /// Train stage 1 (noise → edges) or stage 2 (edges → grayscale).
    Train(TrainArgs),
    /// Sample the full stack: latent → edges → grayscale, with a contact
    /// sheet.
    Generate(GenerateArgs),
    /// Fréchet-distance evaluation of a generated set against a real
    /// manifest.
    Evaluate(EvaluateArgs),
    /// Contraction probe of a stage-2 checkpoint.
    Probe(ProbeArgs),
    /// Render a loss CSV as an SVG line chart.
    PlotLosses(PlotLossesArgs),
}

#[derive(Args, Serialize)]
struct SynthDataArgs {
    /// Number of images to synthesize.
    #[arg(long)]
    n: usize,
    /// Output image side length in pixels.
    #[arg(long, default_value_t = 64)]
    side: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (receives rgb/, gray/, edge/, manifest.jsonl).
    #[arg(long)]
    out: PathBuf,
    /// Train-split fraction.
    #[arg(long, default_value_t = 0.95)]
    split: f64,
}

#[derive(Args, Serialize)]
struct PreprocessArgs {
    /// Directory of source RGB images (PNG or JPEG).
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    side: u32,
    /// Seeded random fraction of the corpus to ingest, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    subset: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    split: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EdgeSourceKind {
    Real,
    Ckpt,
}

#[derive(Args)]
struct TrainArgs {
    /// Which stage to train.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: Option<u8>,
    /// JSON run configuration; flags below override file values.
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Stage-2 conditional input source.
    #[arg(long, value_enum, requires_if("ckpt", "edge_ckpt"))]
    edge_source: Option<EdgeSourceKind>,
    /// Stage-1 checkpoint supplying edges when --edge-source ckpt.
    #[arg(long)]
    edge_ckpt: Option<PathBuf>,
    /// Resume a checkpointed run; the embedded config drives the run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    /// Stage-1 checkpoint (noise → edges).
    #[arg(long)]
    stage1: PathBuf,
    /// Stage-2 checkpoint (edges → grayscale).
    #[arg(long)]
    stage2: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Gray,
    Edge,
}

impl From<KindArg> for ImageKind {
    fn from(k: KindArg) -> ImageKind {
        match k {
            KindArg::Gray => ImageKind::Gray,
            KindArg::Edge => ImageKind::Edge,
        }
    }
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    /// Manifest of the real dataset.
    #[arg(long)]
    real: PathBuf,
    /// Directory of generated PNGs to score.
    #[arg(long)]
    fake: PathBuf,
    /// Embedder checkpoint path (read, or written with --fit-embedder).
    #[arg(long)]
    embedder: PathBuf,
    /// Fit the embedder on the real manifest first and save it to
    /// --embedder.
    #[arg(long, default_value_t = false)]
    fit_embedder: bool,
    /// Which derived image kind to evaluate (and fit the embedder on).
    #[arg(long, value_enum, default_value_t = KindArg::Gray)]
    kind: KindArg,
    /// Only score fake files whose name starts with this prefix.
    #[arg(long)]
    fake_prefix: Option<String>,
    /// Embedding dimensionality when fitting.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Autoencoder training steps when fitting.
    #[arg(long, default_value_t = 300)]
    embed_steps: u64,
    #[arg(long, default_value_t = 0)]
    embed_seed: u64,
    /// Covariance regularizer added to both diagonals.
    #[arg(long, default_value_t = 1e-6)]
    eps_reg: f64,
    /// Report file path.
    #[arg(long, default_value = "fid_report.json")]
    report: PathBuf,
}

#[derive(Args, Serialize)]
struct ProbeArgs {
    /// Stage-2 checkpoint to probe.
    #[arg(long)]
    stage2: PathBuf,
    /// Manifest supplying real edge inputs.
    #[arg(long)]
    manifest: PathBuf,
    /// Perturbation scale.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 64)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "contraction_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct PlotLossesArgs {
    /// Loss CSV produced by a training run.
    #[arg(long)]
    csv: PathBuf,
    /// SVG output path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(args) => synth_data(args),
        Command::Preprocess(args) => preprocess(args),
        Command::Train(args) => train(args),
        Command::Generate(args) => generate(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Probe(args) => probe(args),
        Command::PlotLosses(args) => plot::plot_losses(&args.csv, &args.out),
    }
}

fn synth_data(args: SynthDataArgs) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    let manifest = dataset::synth_faces_with(args.n, args.side, args.seed, &args.out, args.split)?;
    write_echo(&args.out, &args)?;
    eprintln!(
        "wrote {} records ({} train / {} eval) under {:?}",
        manifest.records.len(),
        manifest.records_for(Split::Train).len(),
        manifest.records_for(Split::Eval).len(),
        args.out
    );
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    let manifest = dataset::build_dataset(
        &args.src,
        &args.out,
        &BuildOptions {
            image_side: args.side,
            split_ratio: args.split,
            subset_fraction: args.subset,
            seed: args.seed,
        },
    )?;
    write_echo(&args.out, &args)?;
    eprintln!(
        "wrote {} records ({} skipped) under {:?}",
        manifest.records.len(),
        manifest.skipped,
        args.out
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    if let Some(resume_path) = &args.resume {
        return resume_training(resume_path);
    }
    let config_path = args.config.as_ref().expect("clap enforces --config without --resume");
    let mut rc = RunConfig::load(config_path)?;
    if let Some(stage) = args.stage {
        rc.stage = stage;
    }
    if let Some(m) = args.manifest {
        rc.manifest = m;
    }
    if let Some(o) = args.out {
        rc.out_dir = o;
    }
    if let Some(s) = args.seed {
        rc.train.seed = s;
    }
    if let Some(e) = args.epochs {
        rc.train.epochs = e;
    }
    match args.edge_source {
        Some(EdgeSourceKind::Real) => rc.train.edge_source = EdgeSource::Real,
        Some(EdgeSourceKind::Ckpt) => {
            let path = args.edge_ckpt.expect("clap enforces --edge-ckpt with ckpt");
            rc.train.edge_source = EdgeSource::Checkpoint(path);
        }
        None => {}
    }
    if rc.stage != 1 && rc.stage != 2 {
        bail!("stage must be 1 or 2, got {}", rc.stage);
    }

    let manifest = DatasetManifest::load(&rc.manifest)
        .with_context(|| format!("loading manifest {:?}", rc.manifest))?;
    let spec = rc.model.resolve(manifest.image_side);
    spec.validate()?;
    rc.train.validate()?;
    write_echo(
        &rc.out_dir,
        &ResolvedRunConfig {
            stage: rc.stage,
            manifest: &rc.manifest,
            out_dir: &rc.out_dir,
            model: &spec,
            train: &rc.train,
        },
    )?;

    match rc.stage {
        1 => {
            let (session, log) =
                training::train_stage1(spec, rc.train.clone(), &manifest, Some(&rc.out_dir))?;
            eprintln!(
                "stage 1 done: {} steps, final checkpoint {:?}",
                session.step,
                rc.out_dir.join("checkpoints/final.sgck")
            );
            drop(log);
        }
        2 => {
            let (session, log) =
                training::train_stage2(spec, rc.train.clone(), &manifest, Some(&rc.out_dir))?;
            eprintln!(
                "stage 2 done: {} steps, final checkpoint {:?}",
                session.step,
                rc.out_dir.join("checkpoints/final.sgck")
            );
            drop(log);
        }
        _ => unreachable!(),
    }
    Ok(())
}

/// Resumes from a checkpoint using its embedded config; outputs land next
/// to the checkpoint's run directory.
fn resume_training(resume_path: &Path) -> Result<()> {
    // Run dir = parent of the checkpoints/ directory holding the file.
    let run_dir = resume_path
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .ok_or_else(|| anyhow!("cannot infer the run directory from {resume_path:?}"))?;

    // Role is encoded in the checkpoint; probe stage 1 first.
    match Stage1Session::load(resume_path) {
        Ok(mut session) => {
            let manifest = manifest_near(&run_dir)?;
            session.train(&manifest, Some(&run_dir))?;
            eprintln!("resumed stage 1 to step {}", session.step);
            Ok(())
        }
        Err(_) => {
            let mut session = Stage2Session::load(resume_path)
                .context("checkpoint is neither a stage-1 nor a stage-2 session")?;
            let manifest = manifest_near(&run_dir)?;
            session.train(&manifest, Some(&run_dir))?;
            eprintln!("resumed stage 2 to step {}", session.step);
            Ok(())
        }
    }
}

/// Locates the manifest a resumed run should use, via its config echo.
fn manifest_near(run_dir: &Path) -> Result<DatasetManifest> {
    let echo = run_dir.join("resolved-config.json");
    let body = std::fs::read_to_string(&echo)
        .with_context(|| format!("reading {echo:?} to locate the manifest"))?;
    let value: serde_json::Value = serde_json::from_str(&body)?;
    let manifest_path = value
        .get("manifest")
        .and_then(|v| v.as_str())
        .ok_or_else(|| anyhow!("{echo:?} lacks a manifest field"))?;
    Ok(DatasetManifest::load(Path::new(manifest_path))?)
}

fn generate(args: GenerateArgs) -> Result<()> {
    let set = training::generate(&args.stage1, &args.stage2, args.n, args.seed, &args.out)?;
    write_echo(&args.out, &args)?;
    eprintln!("wrote {} pairs and {:?}", set.pairs.len(), set.sheet);
    Ok(())
}

fn kind_images(manifest: &DatasetManifest, kind: ImageKind) -> Result<Vec<ImageBuffer>> {
    manifest
        .records
        .iter()
        .map(|rec| {
            let rel = match kind {
                ImageKind::Gray => &rec.gray_path,
                ImageKind::Edge => &rec.edge_path,
            };
            Ok(load_image(&manifest.resolve(rel))?)
        })
        .collect()
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.real)?;
    let kind: ImageKind = args.kind.into();

    let embedder = if args.fit_embedder {
        let opts = EmbedderOptions {
            dim: args.dim,
            kind,
            steps: args.embed_steps,
            seed: args.embed_seed,
            ..EmbedderOptions::default()
        };
        let (embedder, fit) = fit_embedder(&manifest, &opts)?;
        embedder.save(&args.embedder)?;
        eprintln!(
            "fitted embedder: eval reconstruction L1 {:.4} -> {:.4}, saved to {:?}",
            fit.start_eval_l1, fit.final_eval_l1, args.embedder
        );
        embedder
    } else {
        Embedder::load(&args.embedder)?
    };

    let real_images = kind_images(&manifest, kind)?;
    let fake_images = read_png_dir(&args.fake, args.fake_prefix.as_deref())?;
    let report = fid_score(&embedder, &real_images, &fake_images, args.eps_reg)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(parent) = args.report.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&args.report, &json).with_context(|| format!("writing {:?}", args.report))?;
    Ok(())
}

fn read_png_dir(dir: &Path, prefix: Option<&str>) -> Result<Vec<ImageBuffer>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {dir:?}"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .filter(|p| match prefix {
            Some(pre) => p
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(pre)),
            None => true,
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG files found in {dir:?}");
    }
    paths.iter().map(|p| Ok(load_image(p)?)).collect()
}

fn probe(args: ProbeArgs) -> Result<()> {
    let (gen, spec) = Stage2Session::load_generator(&args.stage2)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    // Prefer held-out edges; fall back to the train split for tiny corpora.
    let records = {
        let eval = manifest.records_for(Split::Eval);
        if eval.is_empty() {
            manifest.records_for(Split::Train)
        } else {
            eval
        }
    };
    let edges: Vec<_> = records
        .iter()
        .take(args.pairs.max(1))
        .map(|rec| {
            let img = load_image(&manifest.resolve(&rec.edge_path))?;
            Ok(to_model_range(&img))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = contraction_probe_stage2(&gen, &spec, &edges, args.sigma, args.pairs, args.seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    std::fs::write(&args.report, &json).with_context(|| format!("writing {:?}", args.report))?;
    Ok(())
}
