//! Command implementations behind the `mvstyle` binary.
//!
//! Every command writes a [`RunManifest`] into its output root. Errors map to
//! exit code 2 when they stem from configuration or arguments and 1
//! otherwise.

use std::path::{Path, PathBuf};

use clap::Args;
use mvstyle::backbone::stylize_image;
use mvstyle::imaging::{load_image, resize, HistogramParams};
use mvstyle::metrics::{evaluate_scene, list_images, BlockMatching, MetricsReport};
use mvstyle::synthetic::write_toy_scene;
use mvstyle::training::{
    build_dataset, resume, train, write_loss_log, Checkpoint, TrainConfig, ToyModels,
};
use mvstyle::{Error, Result};
use serde::{Deserialize, Serialize};

pub mod ablation;
pub mod manifest;

pub use ablation::{cmd_ablate, AblateArgs, AblationReport, Study};
pub use manifest::RunManifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.mvst";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

/// 0 success, 1 runtime failure, 2 configuration error.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_configuration() => 2,
        Err(_) => 1,
    }
}

/// A parsed command line, stored in manifests so a run can be repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Train(TrainArgs),
    Stylize(StylizeArgs),
    Evaluate(EvaluateArgs),
    Ablate(AblateArgs),
    Synth(SynthArgs),
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Train(_) => "train",
            Invocation::Stylize(_) => "stylize",
            Invocation::Evaluate(_) => "evaluate",
            Invocation::Ablate(_) => "ablate",
            Invocation::Synth(_) => "synth",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Invocation::Train(a) => &a.out,
            Invocation::Stylize(a) => &a.out,
            Invocation::Evaluate(a) => &a.out,
            Invocation::Ablate(a) => &a.out,
            Invocation::Synth(a) => &a.out,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Invocation::Train(a) => a.out = out,
            Invocation::Stylize(a) => a.out = out,
            Invocation::Evaluate(a) => a.out = out,
            Invocation::Ablate(a) => a.out = out,
            Invocation::Synth(a) => a.out = out,
        }
    }

    pub fn run(&self) -> Result<RunManifest> {
        match self {
            Invocation::Train(a) => cmd_train(a),
            Invocation::Stylize(a) => cmd_stylize(a),
            Invocation::Evaluate(a) => cmd_evaluate(a).map(|(m, _)| m),
            Invocation::Ablate(a) => cmd_ablate(a).map(|(m, _)| m),
            Invocation::Synth(a) => cmd_synth(a),
        }
    }
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Config {
        field: "out".into(),
        message: format!("{}: {e}", out.display()),
    })
}

fn config_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// TOML training config; absent keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of content views.
    #[arg(long)]
    pub scene: PathBuf,
    /// Reference style image.
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured step count (total steps when resuming).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub resume: Option<PathBuf>,
}

/// Writes `checkpoint.mvst`, `loss_log.jsonl`, `config.toml`, cadence
/// snapshots under `snapshots/`, and the manifest.
pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    let previous = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut cfg = match (&previous, &a.config) {
        (Some(ck), _) => ck.meta.config.clone(),
        (None, Some(path)) => TrainConfig::load(path)?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (rank, alpha) = cfg.lora.resolve(&cfg.profile()?);
    (cfg.lora.rank, cfg.lora.alpha) = (Some(rank), Some(alpha));
    let mut models = ToyModels::for_profile(&cfg.backbone)?;
    let ds = build_dataset(&a.scene, &a.style, cfg.resolution)?;
    create_out(&a.out)?;

    let outcome = match &previous {
        Some(ck) => resume(ck, &ds, &mut models.backbone, &models.encoder, &models.extractor, Some(cfg.steps))?,
        None => train(&ds, &cfg, &mut models.backbone, &models.encoder, &models.extractor)?,
    };
    if let Some(last) = outcome.log.last() {
        log::info!("step {} total {:.6e}", last.step, last.total);
    }

    let mut manifest = RunManifest::new(Invocation::Train(a.clone()), config_json(&cfg), Some(cfg.seed));
    for input in [Some(a.scene.as_path()), Some(a.style.as_path()), a.config.as_deref(), a.resume.as_deref()]
        .into_iter()
        .flatten()
    {
        manifest.add_input(input)?;
    }
    manifest.versions.insert("backbone".into(), cfg.backbone.clone());

    let ck_path = a.out.join(CHECKPOINT_FILE);
    outcome.checkpoint.save(&ck_path)?;
    manifest.add_artifact(&a.out, &ck_path);
    let log_path = a.out.join(LOSS_LOG_FILE);
    write_loss_log(&log_path, &outcome.log)?;
    manifest.add_artifact(&a.out, &log_path);
    let cfg_path = a.out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml())?;
    manifest.add_artifact(&a.out, &cfg_path);
    if !outcome.snapshots.is_empty() {
        let dir = a.out.join("snapshots");
        std::fs::create_dir_all(&dir)?;
        for snap in &outcome.snapshots {
            let p = dir.join(format!("step_{:06}.mvst", snap.meta.step));
            snap.save(&p)?;
            manifest.add_artifact(&a.out, &p);
        }
    }
    manifest.write(&a.out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct StylizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of content images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Style image; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub style: Option<PathBuf>,
    /// Square output size; defaults to the training resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StylizeConfig {
    style: PathBuf,
    resolution: usize,
    condition_resolution: usize,
    profile: String,
}

/// Writes one `<stem>.png` per input image.
pub fn cmd_stylize(a: &StylizeArgs) -> Result<RunManifest> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut models = ToyModels::for_profile(&ck.meta.profile_id)?;
    let style_path = match (&a.style, &ck.meta.style_path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => {
            return Err(Error::Config {
                field: "style".into(),
                message: "checkpoint records no style image; pass --style".into(),
            })
        }
    };
    let train_res = ck.meta.config.resolution;
    let resolution = a.resolution.unwrap_or(train_res);
    let style = load_image(&style_path)
        .map_err(|e| Error::Config { field: "style".into(), message: e.to_string() })?;
    let condition = ck.restore(&mut models.backbone, &models.encoder)?;
    let embedding = condition.embedding(&models.encoder, &resize(&style, train_res, train_res)?)?;

    let inputs = list_images(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::Config {
            field: "input".into(),
            message: format!("no images in {}", a.input.display()),
        });
    }
    let mut stems: Vec<String> = inputs
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut sorted = stems.clone();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config {
            field: "input".into(),
            message: format!("two inputs share the stem `{}`", w[0]),
        });
    }

    create_out(&a.out)?;
    let cfg = StylizeConfig {
        style: style_path.clone(),
        resolution,
        condition_resolution: train_res,
        profile: ck.meta.profile_id.clone(),
    };
    let mut manifest = RunManifest::new(Invocation::Stylize(a.clone()), config_json(&cfg), Some(ck.meta.seed));
    manifest.add_input(&a.checkpoint)?;
    manifest.add_input(&a.input)?;
    manifest.add_input(&style_path)?;
    for (path, stem) in inputs.iter().zip(stems.drain(..)) {
        let content = resize(&load_image(path)?, resolution, resolution)?;
        let out = stylize_image(&models.backbone, &content, &embedding)?;
        let dest = a.out.join(format!("{stem}.png"));
        out.save_png(&dest)?;
        manifest.add_artifact(&a.out, &dest);
    }
    manifest.write(&a.out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub stylized: PathBuf,
    #[arg(long)]
    pub content: PathBuf,
    #[arg(long)]
    pub style: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EvaluateConfig {
    histogram: HistogramParams,
    flow_patch: usize,
    flow_radius: usize,
    encoder_seed: u64,
}

/// Writes `metrics.json` and `metrics.csv`.
pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(RunManifest, MetricsReport)> {
    let style = load_image(&a.style)?;
    let models = ToyModels::new();
    let estimator = BlockMatching::default();
    let cfg = EvaluateConfig {
        histogram: HistogramParams::default(),
        flow_patch: estimator.patch,
        flow_radius: estimator.radius,
        encoder_seed: ToyModels::BASE_SEED,
    };
    let style_name = a.style.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let report = evaluate_scene(
        &a.stylized,
        &a.content,
        &style,
        &style_name,
        &models.encoder,
        &estimator,
        &cfg.histogram,
    )?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new(Invocation::Evaluate(a.clone()), config_json(&cfg), None);
    manifest.add_input(&a.stylized)?;
    manifest.add_input(&a.content)?;
    manifest.add_input(&a.style)?;
    for p in report.write(&a.out)? {
        manifest.add_artifact(&a.out, &p);
    }
    manifest.write(&a.out)?;
    Ok((manifest, report))
}

/// Plain-text table of a report: one row per image, one per pair, then the
/// means.
pub fn format_report(r: &MetricsReport) -> String {
    let mut s = format!("{:<28} {:>10} {:>10} {:>10}\n", "image", "CHD", "DSD", "flow-L1");
    for i in &r.images {
        s += &format!("{:<28} {:>10.4} {:>10.4} {:>10}\n", i.name, i.chd, i.dsd, "");
    }
    for p in &r.pairs {
        let name = format!("{} -> {}", p.first, p.second);
        s += &format!("{:<28} {:>10} {:>10} {:>10.4}\n", name, "", "", p.flow_l1);
    }
    let flow = r.aggregate.flow_l1.map_or("n/a".to_string(), |f| format!("{f:.4}"));
    s += &format!("{:<28} {:>10.4} {:>10.4} {:>10}\n", "mean", r.aggregate.chd, r.aggregate.dsd, flow);
    s
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub views: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Writes a synthetic scene under `out/scene` and a style image at
/// `out/style.png`.
pub fn cmd_synth(a: &SynthArgs) -> Result<RunManifest> {
    if a.views == 0 || a.size < 8 {
        return Err(Error::Config {
            field: "views/size".into(),
            message: "need at least one view of at least 8 px".into(),
        });
    }
    create_out(&a.out)?;
    let (scene, style) = write_toy_scene(&a.out, a.views, a.size, a.seed)?;
    let mut manifest = RunManifest::new(Invocation::Synth(a.clone()), config_json(a), Some(a.seed));
    for p in list_images(&scene)? {
        manifest.add_artifact(&a.out, &p);
    }
    manifest.add_artifact(&a.out, &style);
    manifest.write(&a.out)?;
    Ok(manifest)
}

/// Repeats the run recorded in `manifest` with its outputs under `out`.
/// Fails with a configuration error if any recorded input changed.
pub fn cmd_rerun(manifest: &Path, out: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(manifest)?;
    m.verify_inputs()?;
    let mut inv = m.invocation.clone();
    inv.set_out(out.to_path_buf());
    inv.run()
}
