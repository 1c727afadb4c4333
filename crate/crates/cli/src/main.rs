//! `ovseg`: synthesize data, validate manifests, train, evaluate, diagnose,
//! analyze category overlap and plot training curves.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ovseg::checkpoint::Checkpoint;
use ovseg::config::RunConfig;
use ovseg::data::{self, DatasetManifest, MaskScan, SyntheticSpec};
use ovseg::diagnostics;
use ovseg::eval;
use ovseg::model::Model;
use ovseg::plot;
use ovseg::rng;
use ovseg::spm::{NoiseFamily, SpmMode};
use ovseg::train;

#[derive(Parser)]
#[command(name = "ovseg", version, about = "Open-vocabulary segmentation over pixel-text cost volumes")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset with a manifest.
    Synth(SynthArgs),
    /// Check manifests, images and masks; exits nonzero on any issue.
    Validate(ValidateArgs),
    /// Train a model and write checkpoints plus a JSON-lines metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or more datasets.
    Eval(EvalArgs),
    /// Perturbation statistics of a checkpoint on a dataset.
    Diagnose(DiagnoseArgs),
    /// Remap a dataset's masks onto a unified vocabulary.
    Taxonomy(TaxonomyArgs),
    /// Category overlap between a training vocabulary and test datasets.
    Overlap(OverlapArgs),
    /// Plot the perturbation statistics recorded in a training log.
    Plots(PlotsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (the training split; a test split goes to `<out>/test`).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    images: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    shapes: usize,
    /// Highest-indexed classes kept out of the training split.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, default_value_t = 0)]
    test_images: usize,
    /// Shape grid cell in pixels; match the encoder patch stride.
    #[arg(long, default_value_t = 8)]
    cell: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-scale defaults.
    Default,
    /// Small configuration for a single CPU.
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; starts from `--preset` when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Training manifest (overrides `data.train_manifest`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (overrides `output.run_dir`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.base_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Init std of the Text-SPM parameters.
    #[arg(long)]
    sigma_t: Option<f64>,
    /// Start the Image-SPM as an exact identity (zero output projection).
    #[arg(long)]
    zero_image_spm: bool,
    #[arg(long)]
    noise_family: Option<NoiseFamily>,
    /// Student-t degrees of freedom; requires `--noise-family student_t`.
    #[arg(long)]
    df: Option<f64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    /// Seen/unseen classes, `seen=a,b;unseen=c`. Defaults to the manifest's split.
    #[arg(long)]
    split: Option<String>,
    /// Add low/high native-resolution sub-means to the cross-dataset report.
    #[arg(long)]
    resolution_groups: bool,
    /// Config the checkpoint must be compatible with.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Noise draws averaged per image.
    #[arg(long, default_value_t = 4)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TaxonomyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Tab-separated `raw<TAB>unified` lines; `<DROP>` maps to ignore.
    #[arg(long)]
    mapping: PathBuf,
    /// Unified vocabulary, one name per line.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlapArgs {
    /// Training vocabulary, one name per line.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotsArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Validate(a) => validate(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Taxonomy(a) => taxonomy(a),
        Command::Overlap(a) => overlap(a),
        Command::Plots(a) => plots(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_images: a.images,
        size: a.size,
        num_classes: a.classes,
        shapes_per_image: a.shapes,
        holdout_classes: a.holdout,
        test_images: a.test_images,
        cell: a.cell,
        seed: a.seed,
    };
    let ds = data::generate_synthetic_dataset(&spec, &a.out)?;
    println!("wrote {} training pairs to {}", ds.train.pairs.len(), a.out.display());
    if let Some(test) = &ds.test {
        println!("wrote {} test pairs to {}", test.pairs.len(), a.out.join("test").display());
    }
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    let mut failed = 0;
    for path in &a.manifests {
        let report = data::conformance_report(path);
        println!("{}", serde_json::to_string_pretty(&report)?);
        if !report.ok() {
            failed += 1;
        }
    }
    ensure!(failed == 0, "{failed} of {} manifests failed validation", a.manifests.len());
    Ok(())
}

/// File (or preset, or the resumed checkpoint's config) < environment <
/// `--set` < dedicated flags.
fn effective_config(a: &TrainArgs, resumed: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (resumed, &a.config) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => match a.preset {
            Preset::Default => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    cfg.apply_env(std::env::vars()).context("environment override")?;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(p) = &a.data {
        cfg.data.train_manifest = Some(p.clone());
    }
    if let Some(p) = &a.run_dir {
        cfg.output.run_dir = p.clone();
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = a.sigma_t {
        cfg.model.sigma_t = s;
    }
    if a.zero_image_spm {
        cfg.model.image_spm_out_init_std = 0.0;
    }
    if let Some(f) = a.noise_family {
        cfg.noise.family = f;
        if f != NoiseFamily::StudentT {
            cfg.noise.df = None;
        } else if cfg.noise.df.is_none() && a.df.is_none() {
            bail!("--noise-family student_t needs --df");
        }
    }
    if let Some(df) = a.df {
        if cfg.noise.family != NoiseFamily::StudentT {
            bail!("--df only applies to --noise-family student_t");
        }
        cfg.noise.df = Some(df);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    if a.resume.is_some() && a.config.is_some() {
        bail!("--resume takes its config from the checkpoint; drop --config");
    }
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let cfg = effective_config(&a, resume.as_ref().map(|c| &c.config))?;
    if let Some(ckpt) = &resume {
        // only the schedule length and the file locations may change on resume
        let mut expected = cfg.clone();
        expected.train.total_steps = ckpt.config.train.total_steps;
        expected.output = ckpt.config.output.clone();
        expected.data.train_manifest = ckpt.config.data.train_manifest.clone();
        ensure!(
            expected == ckpt.config,
            "resume may only change train.total_steps, output.run_dir and data.train_manifest"
        );
        log::info!("resuming at step {}", ckpt.step);
    }
    let manifest_path = cfg
        .data
        .train_manifest
        .clone()
        .context("no training data: pass --data or set data.train_manifest")?;
    let run_dir = cfg.output.run_dir.clone();
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml_string())?;

    let manifest = data::load_manifest(&manifest_path, MaskScan::Eager)?;
    let set = data::encode_dataset(&manifest, &cfg.encoder(), &cfg.data.prompt_template)?;
    log::info!(
        "{} training images, {} classes, {} steps",
        set.samples.len(),
        set.text.num_classes(),
        cfg.train.total_steps
    );

    if resume.is_none() && cfg.model.sigma_t == 0.0 && cfg.model.image_spm_out_init_std == 0.0 {
        let max_diff = parity_check(&cfg, &set)?;
        let ok = max_diff == 0.0;
        println!(
            "train/eval forward parity at init: {} (max |diff| {max_diff:e})",
            if ok { "exact" } else { "MISMATCH" }
        );
        write_json(&run_dir.join("parity.json"), &json!({ "exact": ok, "max_abs_diff": max_diff }))?;
        ensure!(ok, "identity SPM configuration is not an identity");
    }

    let outcome = train::run_training(&cfg, &set, Some(&run_dir), resume)?;
    let final_loss = outcome.metrics.last().map(|m| m.loss);
    match final_loss {
        Some(l) => println!("finished at step {}, final loss {l:.6}", outcome.checkpoint.step),
        None => println!("nothing to do: already at step {}", outcome.checkpoint.step),
    }
    println!("checkpoint: {}", run_dir.join("final.safetensors").display());
    Ok(())
}

/// Largest difference between a training-mode and an eval-mode forward of
/// the freshly initialised model on the first training image.
fn parity_check(cfg: &RunConfig, set: &train::TrainingSet) -> Result<f64> {
    let model = Model::init_seeded(cfg.model, cfg.train.seed)?;
    let sample = &set.samples[0];
    let mut r = rng::stream(cfg.train.seed, &["parity".into()]);
    let noise = model.draw_noise(&cfg.noise, &sample.features, &mut r)?;
    let train_logits = model.logits(&sample.features, &set.text, SpmMode::Train, Some(&noise))?;
    let eval_logits = model.logits(&sample.features, &set.text, SpmMode::Eval, None)?;
    Ok(train_logits
        .tensor
        .iter()
        .zip(eval_logits.tensor.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ckpt.config;
    if let Some(p) = &a.config {
        let other = RunConfig::load(p)?;
        ensure!(
            other.model == cfg.model,
            "checkpoint model config does not match {}:\n checkpoint: {:?}\n config: {:?}",
            p.display(),
            cfg.model,
            other.model
        );
        ensure!(
            other.data.encoder == cfg.data.encoder,
            "checkpoint encoder config does not match {}",
            p.display()
        );
    }
    let split = a.split.as_deref().map(eval::parse_split).transpose()?;
    fs::create_dir_all(&a.out)?;
    let encoder = cfg.encoder();
    let mut reports = Vec::new();
    let mut resolutions = Vec::new();
    let mut ids = BTreeSet::new();
    for path in &a.manifests {
        let manifest = data::load_manifest(path, MaskScan::Lazy)?;
        ensure!(ids.insert(manifest.id.clone()), "dataset id {:?} appears twice", manifest.id);
        if let Some((seen, unseen)) = &split {
            let known: BTreeSet<&String> = manifest.categories.iter().collect();
            if let Some(c) = seen.iter().chain(unseen).find(|c| !known.contains(c)) {
                bail!(
                    "--split names class {c:?}, but {} has {} classes: {}",
                    manifest.id,
                    manifest.categories.len(),
                    manifest.categories.join(", ")
                );
            }
        }
        let set = data::encode_dataset(&manifest, &encoder, &cfg.data.prompt_template)
            .with_context(|| format!("encoding {}", path.display()))?;
        ensure!(
            set.text.embed_dim() == ckpt.model.config.embed_dim,
            "encoder width {} does not match the checkpoint's {}",
            set.text.embed_dim(),
            ckpt.model.config.embed_dim
        );
        let cm = eval::evaluate_model(&ckpt.model, &set.text, &set.samples, manifest.ignore_index)?;
        let mut report = eval::dataset_report(&manifest.id, &cm, &manifest.categories)?;
        let chosen = split
            .clone()
            .or_else(|| manifest.split.as_ref().map(|s| (s.seen.clone(), s.unseen.clone())));
        if let Some((seen, unseen)) = chosen {
            report.split = Some(eval::split_report(&report, &seen, &unseen)?);
        }
        write_json(&a.out.join(format!("{}.json", manifest.id)), &report)?;
        let table = eval::render_report(&report);
        fs::write(a.out.join(format!("{}.txt", manifest.id)), &table)?;
        print!("{table}");
        resolutions.push((manifest.native_resolution[0], manifest.native_resolution[1]));
        reports.push(report);
    }
    if reports.len() > 1 || a.resolution_groups {
        let groups = a.resolution_groups.then_some(resolutions.as_slice());
        let cross = eval::cross_dataset_report(reports, groups)?;
        write_json(&a.out.join("cross.json"), &cross)?;
        let table = eval::render_cross_report(&cross);
        fs::write(a.out.join("cross.txt"), &table)?;
        print!("{table}");
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    ensure!(a.draws >= 1, "--draws must be >= 1");
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ckpt.config;
    let manifest = data::load_manifest(&a.manifest, MaskScan::Lazy)?;
    let set = data::encode_dataset(&manifest, &cfg.encoder(), &cfg.data.prompt_template)?;
    let mut per_image = Vec::with_capacity(set.samples.len());
    for (i, s) in set.samples.iter().enumerate() {
        let mut r = rng::stream(a.seed, &["diagnose".into(), i.into()]);
        let delta = diagnostics::delta_cost(&ckpt.model, &s.features, &set.text, &cfg.noise, a.draws, &mut r)?;
        let (gh, gw) = s.features.grid();
        let gt = diagnostics::downsample_majority(&s.mask, gh, gw)?;
        per_image.push(diagnostics::delta_stats(&delta, &gt, diagnostics::ALIGN_EPS)?);
    }
    let mean = diagnostics::mean_stats(&per_image, ckpt.step);
    fs::create_dir_all(&a.out)?;
    write_json(
        &a.out.join("diagnostics.json"),
        &json!({ "dataset": manifest.id, "step": ckpt.step, "draws": a.draws, "mean": mean, "per_image": per_image }),
    )?;
    match mean {
        Some(m) => println!(
            "gt_in_mean {:.6e}  non_gt_mean {:.6e}  gap {:.6e}  align_ratio {:.6}",
            m.gt_in_mean, m.non_gt_mean, m.gap, m.align_ratio
        ),
        None => println!("no labelled cells; statistics undefined"),
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn taxonomy(a: TaxonomyArgs) -> Result<()> {
    let manifest = data::load_manifest(&a.manifest, MaskScan::Lazy)?;
    let mapping = data::parse_taxonomy(&read_text(&a.mapping)?)?;
    let vocab = data::parse_vocab(&read_text(&a.vocab)?)?;
    let mapped = data::map_taxonomy(&manifest, &mapping, &vocab, &a.out)?;
    println!(
        "{}: {} raw categories -> {} unified, written to {}",
        mapped.id,
        manifest.categories.len(),
        mapped.categories.len(),
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn overlap(a: OverlapArgs) -> Result<()> {
    let vocab = data::parse_vocab(&read_text(&a.vocab)?)?;
    let manifests = a
        .manifests
        .iter()
        .map(|p| data::load_manifest(p, MaskScan::Lazy).map_err(anyhow::Error::from))
        .collect::<Result<Vec<DatasetManifest>>>()?;
    let entries = data::overlap_report(&vocab, &manifests)?;
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("overlap.json"), &entries)?;
    let labels: Vec<String> = entries.iter().map(|e| e.dataset.clone()).collect();
    let svg = plot::bar_chart(
        "category overlap",
        &labels,
        &[
            ("covered", entries.iter().map(|e| e.covered as f64).collect()),
            ("test only", entries.iter().map(|e| e.test_only as f64).collect()),
        ],
    );
    fs::write(a.out.join("overlap.svg"), svg)?;
    for e in &entries {
        println!(
            "{}: {} unique, {} covered, {} test-only, coverage {:.4}",
            e.dataset, e.raw_unique, e.covered, e.test_only, e.coverage_ratio
        );
    }
    Ok(())
}

fn plots(a: PlotsArgs) -> Result<()> {
    let written = diagnostics::emit_plots(&a.log, &a.out)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}
