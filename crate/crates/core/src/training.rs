//! Single-scene training: dataset ingestion, Adam on the adapters and the
//! condition module, per-step loss records, checkpoints and exact resume.
//!
//! Trainable values and optimizer moments are kept on the `f32` grid after
//! every update so the `f32` checkpoint archive restores them exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{stylize, BackboneProfile, GenerativeBackbone, LayerFilter, ToyBackbone};
use crate::condition::{ConditionEmbedding, LearnedEmbedding, VisionLanguageProjector};
use crate::error::{Error, Result};
use crate::imaging::{load_image, resize, Image};
use crate::losses::{ContentTargets, LossBreakdown, LossSettings, LossWeights, Objective, StyleTargets};
use crate::metrics::list_images;
use crate::params::{digest_tensors, BoundParams, Parameterized};
use crate::perceptual::{PerceptualExtractor, ToyExtractor, ToyTokenEncoder, TokenEncoder};
use crate::tensor::Tensor;

/// Content views of one scene plus its style image.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    paths: Vec<PathBuf>,
    originals: Vec<Image>,
    style_path: PathBuf,
    style: Image,
    resolution: usize,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn names(&self) -> Vec<String> {
        self.paths
            .iter()
            .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
            .collect()
    }

    pub fn style_path(&self) -> &Path {
        &self.style_path
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// View `i` at the working resolution.
    pub fn image(&self, i: usize) -> Result<Image> {
        resize(&self.originals[i], self.resolution, self.resolution)
    }

    pub fn style(&self) -> Result<Image> {
        resize(&self.style, self.resolution, self.resolution)
    }
}

/// Loads every image of `scene_dir` (sorted by name) and the style image.
/// Any unreadable input is reported as a configuration error naming it.
pub fn build_dataset(scene_dir: &Path, style_path: &Path, resolution: usize) -> Result<SceneDataset> {
    if resolution == 0 {
        return Err(Error::config("resolution", "must be > 0"));
    }
    let paths = list_images(scene_dir)
        .map_err(|_| Error::config("scene", format!("{} is not a readable directory", scene_dir.display())))?;
    if paths.is_empty() {
        return Err(Error::config("scene", format!("no images in {}", scene_dir.display())));
    }
    let originals = paths
        .iter()
        .map(|p| load_image(p).map_err(|e| Error::config("scene", format!("{}: {e}", p.display()))))
        .collect::<Result<Vec<_>>>()?;
    let style = load_image(style_path)
        .map_err(|e| Error::config("style", format!("{}: {e}", style_path.display())))?;
    Ok(SceneDataset {
        paths,
        originals,
        style_path: style_path.to_path_buf(),
        style,
        resolution,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// Image encoder tokens through the trainable projector.
    #[default]
    Vision,
    /// A free trainable token array; the style image only enters the losses.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSettings {
    /// `None` selects the backbone profile's default.
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    /// Layer-name prefixes that receive adapters.
    pub targets: Vec<String>,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: None,
            alpha: None,
            targets: LayerFilter::default().prefixes,
        }
    }
}

impl LoraSettings {
    pub fn resolve(&self, profile: &BackboneProfile) -> (usize, f64) {
        let (r, a) = profile.default_lora();
        (self.rank.unwrap_or(r), self.alpha.unwrap_or(a))
    }

    pub fn filter(&self) -> LayerFilter {
        LayerFilter::prefixes(self.targets.iter().cloned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub resolution: usize,
    pub backbone: String,
    /// Snapshot every this many steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub max_grad_norm: Option<f64>,
    pub condition: ConditionKind,
    pub projector_hidden: usize,
    pub weights: LossWeights,
    pub lora: LoraSettings,
    pub loss: LossSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 3,
            steps: 200,
            seed: 0,
            resolution: 256,
            backbone: BackboneProfile::TOY_ID.into(),
            checkpoint_every: 0,
            max_grad_norm: None,
            condition: ConditionKind::Vision,
            projector_hidden: 32,
            weights: LossWeights::default(),
            lora: LoraSettings::default(),
            loss: LossSettings::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults at the toy scale: 32 px views.
    pub fn toy() -> Self {
        Self {
            resolution: 32,
            ..Self::default()
        }
    }

    pub fn profile(&self) -> Result<BackboneProfile> {
        BackboneProfile::by_id(&self.backbone)
            .ok_or_else(|| Error::config("backbone", format!("unknown profile `{}`", self.backbone)))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.projector_hidden == 0 {
            return Err(Error::config("projector_hidden", "must be >= 1"));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return Err(Error::config("max_grad_norm", "must be > 0 when set"));
            }
        }
        let profile = self.profile()?;
        if self.resolution == 0 || self.resolution % profile.reduction != 0 {
            return Err(Error::config(
                "resolution",
                format!("{} is not a positive multiple of {}", self.resolution, profile.reduction),
            ));
        }
        let (rank, alpha) = self.lora.resolve(&profile);
        if rank == 0 {
            return Err(Error::config("lora.rank", "must be >= 1"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config("lora.alpha", "must be > 0"));
        }
        self.weights.validate()?;
        self.loss
            .canny
            .validate()
            .map_err(|e| Error::config("loss.canny", e.to_string()))?;
        self.loss
            .histogram
            .validate()
            .map_err(|e| Error::config("loss.histogram", e.to_string()))
    }

    /// Parses and validates a TOML document; errors name the offending key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| {
            let field = e.path().to_string();
            Error::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Adam with bias correction; parameters and moments are rounded to `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

fn to_f32_grid(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor, Tensor)> {
        self.moments.get(name)
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..param.numel() {
            let g = grad.data()[i];
            let mi = (self.beta1 * m.data()[i] + (1.0 - self.beta1) * g) as f32 as f64;
            let vi = (self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g) as f32 as f64;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let step = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            param.data_mut()[i] = (param.data()[i] - step) as f32 as f64;
        }
    }
}

/// Seeded per-epoch permutations with wrap-around batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub epoch: u64,
    pub pos: usize,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    seed: u64,
    len: usize,
    state: SamplerState,
    order: Vec<usize>,
}

impl Sampler {
    pub fn new(len: usize, seed: u64) -> Self {
        Self::restore(len, seed, SamplerState { epoch: 0, pos: 0 })
    }

    pub fn restore(len: usize, seed: u64, state: SamplerState) -> Self {
        let mut s = Self {
            seed,
            len,
            state,
            order: Vec::new(),
        };
        s.order = s.permutation(state.epoch);
        s
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.len).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn state(&self) -> SamplerState {
        self.state
    }

    pub fn next_index(&mut self) -> usize {
        if self.state.pos == self.len {
            self.state.epoch += 1;
            self.state.pos = 0;
            self.order = self.permutation(self.state.epoch);
        }
        self.state.pos += 1;
        self.order[self.state.pos - 1]
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next_index()).collect()
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub content: f64,
    pub style: f64,
    pub structure: f64,
    pub color_alignment: f64,
    pub total: f64,
}

impl StepRecord {
    fn new(step: usize, b: &LossBreakdown) -> Self {
        Self {
            step,
            content: b.content,
            style: b.style,
            structure: b.structure,
            color_alignment: b.color_alignment,
            total: b.total,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn write_loss_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<StepRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// The trainable condition module.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionSource {
    Vision(VisionLanguageProjector),
    Learned(LearnedEmbedding),
}

impl ConditionSource {
    pub fn kind(&self) -> ConditionKind {
        match self {
            ConditionSource::Vision(_) => ConditionKind::Vision,
            ConditionSource::Learned(_) => ConditionKind::Learned,
        }
    }

    fn var<'t>(&self, params: &BoundParams<'t>, tape: &'t Tape, style_tokens: &Tensor) -> Result<Var<'t>> {
        match self {
            ConditionSource::Vision(p) => p.apply(params, tape.constant(style_tokens.clone())),
            ConditionSource::Learned(e) => Ok(e.var(params, tape)),
        }
    }

    /// The context handed to the generator for `style`.
    pub fn embedding(&self, encoder: &dyn TokenEncoder, style: &Image) -> Result<ConditionEmbedding> {
        match self {
            ConditionSource::Vision(p) => p.project(&encoder.encode(style)?),
            ConditionSource::Learned(e) => Ok(e.embedding()),
        }
    }
}

impl Parameterized for ConditionSource {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        match self {
            ConditionSource::Vision(p) => p.named_parameters(),
            ConditionSource::Learned(e) => e.named_parameters(),
        }
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self {
            ConditionSource::Vision(p) => p.parameter_mut(name),
            ConditionSource::Learned(e) => e.parameter_mut(name),
        }
    }
}

/// Names and sizes of everything the optimizer touches, and their total.
pub fn trainable_parameters(
    backbone: &dyn GenerativeBackbone,
    condition: &dyn Parameterized,
) -> (Vec<(String, usize)>, usize) {
    let list: Vec<(String, usize)> = backbone
        .named_parameters()
        .into_iter()
        .chain(condition.named_parameters())
        .map(|(n, t)| (n, t.numel()))
        .collect();
    let total = list.iter().map(|(_, n)| n).sum();
    (list, total)
}

const SEED_LORA: u64 = 0x4c4f_5241;
const SEED_CONDITION: u64 = 0x434f_4e44;

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream
}

fn init_condition(
    cfg: &TrainConfig,
    encoder: &dyn TokenEncoder,
    profile: &BackboneProfile,
) -> Result<ConditionSource> {
    let seed = derive_seed(cfg.seed, SEED_CONDITION);
    Ok(match cfg.condition {
        ConditionKind::Vision => ConditionSource::Vision(VisionLanguageProjector::init(
            encoder.width(),
            cfg.projector_hidden,
            profile.context_width,
            seed,
        )?),
        ConditionKind::Learned => ConditionSource::Learned(LearnedEmbedding::init(
            encoder.token_count(),
            profile.context_width,
            seed,
        )?),
    })
}

/// Metadata record of a checkpoint archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub profile_id: String,
    pub step: usize,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
    pub seed: u64,
    pub weights: LossWeights,
    pub loss: LossSettings,
    pub condition: ConditionKind,
    pub sampler: SamplerState,
    pub adam_steps: u64,
    pub style_path: Option<String>,
    pub style_digest: String,
    pub base_digest: String,
    pub config: TrainConfig,
}

/// Adapter and condition parameters, optimizer moments and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

const MAGIC: &[u8; 8] = b"MVSTCKPT";
const FORMAT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// `MAGIC | u32 version | u64 meta length | meta JSON | u32 entry count |`
    /// then per entry `u32 name length | name | u32 ndim | u64 dims… | f32 LE data`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(corrupt("archive is truncated"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint archive"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported archive version {version}")));
        }
        let meta_len = u64_at(take(8)?) as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(take(meta_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let count = u32_at(take(4)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32_at(take(4)?) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| corrupt("entry name is not UTF-8"))?;
            let ndim = u32_at(take(4)?) as usize;
            let shape = (0..ndim)
                .map(|_| Ok(u64_at(take(8)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = take(numel.checked_mul(4).ok_or_else(|| corrupt("entry too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if !r.is_empty() {
            return Err(corrupt("trailing bytes after the last entry"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|_| Error::NotFound(path.to_path_buf()))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| corrupt(format!("missing entry `{name}`")))
    }

    /// Attaches the stored adapters to a fresh `backbone` and returns the
    /// stored condition module.
    pub fn restore(
        &self,
        backbone: &mut dyn GenerativeBackbone,
        encoder: &dyn TokenEncoder,
    ) -> Result<ConditionSource> {
        if backbone.profile().id != self.meta.profile_id {
            return Err(Error::config(
                "backbone",
                format!(
                    "checkpoint was trained on `{}`, backbone is `{}`",
                    self.meta.profile_id,
                    backbone.profile().id
                ),
            ));
        }
        let filter = LayerFilter::prefixes(self.meta.targets.iter().cloned());
        backbone.inject_lora(
            self.meta.rank,
            self.meta.alpha,
            &|n| filter.matches(n),
            derive_seed(self.meta.seed, SEED_LORA),
        )?;
        let mut condition = init_condition(&self.meta.config, encoder, backbone.profile())?;
        let names: Vec<String> = backbone.named_parameters().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let stored = self.tensor(&name)?.clone();
            let slot = backbone.parameter_mut(&name).expect("listed parameter exists");
            if slot.shape() != stored.shape() {
                return Err(corrupt(format!("`{name}` has shape {:?}, expected {:?}", stored.shape(), slot.shape())));
            }
            *slot = stored;
        }
        let names: Vec<String> = condition.named_parameters().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let stored = self.tensor(&name)?.clone();
            let slot = condition.parameter_mut(&name).expect("listed parameter exists");
            if slot.shape() != stored.shape() {
                return Err(corrupt(format!("`{name}` has shape {:?}, expected {:?}", stored.shape(), slot.shape())));
            }
            *slot = stored;
        }
        Ok(condition)
    }
}

/// A training run in progress. Owns the condition module and optimizer and
/// borrows the backbone exclusively.
pub struct TrainSession<'m> {
    cfg: TrainConfig,
    backbone: &'m mut dyn GenerativeBackbone,
    encoder: &'m dyn TokenEncoder,
    extractor: &'m dyn PerceptualExtractor,
    condition: ConditionSource,
    adam: Adam,
    sampler: Sampler,
    step: usize,
    images: Vec<Image>,
    content: Vec<ContentTargets>,
    style: StyleTargets,
    style_tokens: Tensor,
    style_path: String,
    style_digest: String,
    base_digest: String,
}

impl<'m> TrainSession<'m> {
    /// Injects adapters into `backbone` (which must have none yet) and
    /// initializes the condition module from `cfg.seed`.
    pub fn start(
        dataset: &SceneDataset,
        cfg: &TrainConfig,
        backbone: &'m mut dyn GenerativeBackbone,
        encoder: &'m dyn TokenEncoder,
        extractor: &'m dyn PerceptualExtractor,
    ) -> Result<Self> {
        cfg.validate()?;
        let profile = cfg.profile()?;
        if backbone.profile().id != profile.id {
            return Err(Error::config(
                "backbone",
                format!("config names `{}`, backbone is `{}`", profile.id, backbone.profile().id),
            ));
        }
        if !backbone.adapters().is_empty() {
            return Err(Error::State("backbone already carries adapters".into()));
        }
        if dataset.resolution() != cfg.resolution {
            return Err(Error::config(
                "resolution",
                format!("dataset is at {}, config at {}", dataset.resolution(), cfg.resolution),
            ));
        }
        let (rank, alpha) = cfg.lora.resolve(&profile);
        let filter = cfg.lora.filter();
        backbone.inject_lora(rank, alpha, &|n| filter.matches(n), derive_seed(cfg.seed, SEED_LORA))?;
        let condition = init_condition(cfg, encoder, &profile)?;
        let mut session = Self::assemble(dataset, cfg, backbone, encoder, extractor, condition)?;
        session.snap_to_f32();
        Ok(session)
    }

    /// Rebuilds the run state saved in `ck` on a fresh `backbone`.
    pub fn resume(
        ck: &Checkpoint,
        dataset: &SceneDataset,
        backbone: &'m mut dyn GenerativeBackbone,
        encoder: &'m dyn TokenEncoder,
        extractor: &'m dyn PerceptualExtractor,
    ) -> Result<Self> {
        let condition = ck.restore(backbone, encoder)?;
        let mut session = Self::assemble(dataset, &ck.meta.config, backbone, encoder, extractor, condition)?;
        if session.style_digest != ck.meta.style_digest {
            return Err(Error::config("style", "style image differs from the one the checkpoint was trained with"));
        }
        session.step = ck.meta.step;
        session.sampler = Sampler::restore(dataset.len(), ck.meta.config.seed, ck.meta.sampler);
        session.adam.t = ck.meta.adam_steps;
        for (name, _) in session.trainable_list() {
            if let (Some(m), Some(v)) = (ck.tensors.get(&format!("adam.m.{name}")), ck.tensors.get(&format!("adam.v.{name}"))) {
                session.adam.moments.insert(name, (m.clone(), v.clone()));
            }
        }
        Ok(session)
    }

    fn assemble(
        dataset: &SceneDataset,
        cfg: &TrainConfig,
        backbone: &'m mut dyn GenerativeBackbone,
        encoder: &'m dyn TokenEncoder,
        extractor: &'m dyn PerceptualExtractor,
        condition: ConditionSource,
    ) -> Result<Self> {
        let objective = Objective::new(extractor, cfg.loss);
        let images = (0..dataset.len()).map(|i| dataset.image(i)).collect::<Result<Vec<_>>>()?;
        let content = images
            .iter()
            .map(|img| objective.content_targets(img))
            .collect::<Result<Vec<_>>>()?;
        let style_img = dataset.style()?;
        let style = objective.style_targets(&style_img)?;
        let style_tokens = encoder.encode(&style_img)?.tokens;
        let style_digest = digest_tensors([("style", &style_img.to_tensor())]);
        let base_digest = backbone.base_digest();
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            encoder,
            extractor,
            condition,
            adam: Adam::new(cfg.lr),
            sampler: Sampler::new(dataset.len(), cfg.seed),
            step: 0,
            images,
            content,
            style,
            style_tokens,
            style_path: dataset.style_path().display().to_string(),
            style_digest,
            base_digest,
        })
    }

    fn snap_to_f32(&mut self) {
        for (name, _) in self.trainable_list() {
            if let Some(t) = self.parameter_mut(&name) {
                to_f32_grid(t);
            }
        }
    }

    fn trainable_list(&self) -> Vec<(String, usize)> {
        trainable_parameters(&*self.backbone, &self.condition).0
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name.starts_with("lora.") {
            self.backbone.parameter_mut(name)
        } else {
            self.condition.parameter_mut(name)
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn condition(&self) -> &ConditionSource {
        &self.condition
    }

    pub fn backbone(&self) -> &dyn GenerativeBackbone {
        &*self.backbone
    }

    /// One optimizer step; returns the loss record measured before the update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.sampler.next_batch(self.cfg.batch_size);
        let objective = Objective::new(self.extractor, self.cfg.loss);
        let w = self.cfg.weights;
        let tape = Tape::new();
        let mut params = BoundParams::new();
        params.bind(&tape, &*self.backbone as &dyn Parameterized);
        params.bind(&tape, &self.condition);
        let cond = self.condition.var(&params, &tape, &self.style_tokens)?;

        let mut items = Vec::with_capacity(batch.len());
        let mut acc: Option<Var<'_>> = None;
        for &i in &batch {
            let out = stylize(&*self.backbone, &params, self.images[i].to_var(&tape), cond)?;
            let terms = objective.terms(out, &self.content[i], &self.style)?;
            items.push(terms.breakdown(&w));
            let total = terms.weighted_total(&w)?;
            acc = Some(match acc {
                Some(a) => a.add(total)?,
                None => total,
            });
        }
        let breakdown = LossBreakdown::mean(&items, &w);
        if !breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                breakdown: serde_json::to_string(&breakdown).expect("breakdown serializes"),
            });
        }
        let loss = acc.expect("batch is non-empty").scale(1.0 / batch.len() as f64);
        let grads = tape.backward(loss);
        let mut named: Vec<(String, Tensor)> = params
            .iter()
            .map(|(n, v)| (n.to_string(), grads.get_or_zero(v)))
            .collect();
        if let Some(max) = self.cfg.max_grad_norm {
            let norm = named
                .iter()
                .flat_map(|(_, g)| g.data().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                for (_, g) in &mut named {
                    *g = g.map(|v| v * max / norm);
                }
            }
        }
        drop(params);

        self.adam.begin_step();
        for (name, g) in &named {
            let mut p = self.parameter_mut(name).expect("bound parameter exists").clone();
            self.adam.update(name, &mut p, g);
            *self.parameter_mut(name).expect("bound parameter exists") = p;
        }
        if let ConditionSource::Vision(p) = &mut self.condition {
            p.bump_version();
        }
        self.verify_frozen_base()?;
        let record = StepRecord::new(self.step, &breakdown);
        debug!("step {} total {:.6}", record.step, record.total);
        self.step += 1;
        Ok(record)
    }

    pub fn verify_frozen_base(&self) -> Result<()> {
        let now = self.backbone.base_digest();
        if now != self.base_digest {
            return Err(Error::Invariant(format!(
                "frozen backbone weights changed: {} -> {now}",
                self.base_digest
            )));
        }
        Ok(())
    }

    /// Runs until `total_steps` updates have been applied, calling `on_step`
    /// after each. Snapshots are taken at the configured cadence.
    pub fn run_until(
        &mut self,
        total_steps: usize,
        mut on_step: impl FnMut(&StepRecord, Option<&Checkpoint>) -> Result<()>,
    ) -> Result<()> {
        while self.step < total_steps {
            let record = self.step()?;
            let every = self.cfg.checkpoint_every;
            let snapshot = (every > 0 && self.step % every == 0 && self.step < total_steps).then(|| self.checkpoint());
            on_step(&record, snapshot.as_ref())?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let profile = self.backbone.profile();
        let (rank, alpha) = self.cfg.lora.resolve(profile);
        let mut tensors = BTreeMap::new();
        for (name, t) in self.backbone.named_parameters().into_iter().chain(self.condition.named_parameters()) {
            if let Some((m, v)) = self.adam.moments(&name) {
                tensors.insert(format!("adam.m.{name}"), m.clone());
                tensors.insert(format!("adam.v.{name}"), v.clone());
            }
            tensors.insert(name, t.clone());
        }
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                profile_id: profile.id.clone(),
                step: self.step,
                rank,
                alpha,
                targets: self.cfg.lora.targets.clone(),
                seed: self.cfg.seed,
                weights: self.cfg.weights,
                loss: self.cfg.loss,
                condition: self.condition.kind(),
                sampler: self.sampler.state(),
                adam_steps: self.adam.steps_taken(),
                style_path: Some(self.style_path.clone()),
                style_digest: self.style_digest.clone(),
                base_digest: self.base_digest.clone(),
                config: self.cfg.clone(),
            },
            tensors,
        }
    }

    pub fn condition_embedding(&self, style: &Image) -> Result<ConditionEmbedding> {
        self.condition.embedding(self.encoder, style)
    }
}

/// Final checkpoint, per-step records and cadence snapshots of a run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub snapshots: Vec<Checkpoint>,
}

fn drive(mut session: TrainSession<'_>, total_steps: usize) -> Result<TrainOutcome> {
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    session.run_until(total_steps, |r, snap| {
        log.push(*r);
        if let Some(s) = snap {
            snapshots.push(s.clone());
        }
        Ok(())
    })?;
    session.verify_frozen_base()?;
    Ok(TrainOutcome {
        checkpoint: session.checkpoint(),
        log,
        snapshots,
    })
}

/// Runs `cfg.steps` updates from a fresh initialization.
pub fn train(
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    backbone: &mut dyn GenerativeBackbone,
    encoder: &dyn TokenEncoder,
    extractor: &dyn PerceptualExtractor,
) -> Result<TrainOutcome> {
    drive(TrainSession::start(dataset, cfg, backbone, encoder, extractor)?, cfg.steps)
}

/// Continues a saved run up to `total_steps` (default: the saved config's).
pub fn resume(
    ck: &Checkpoint,
    dataset: &SceneDataset,
    backbone: &mut dyn GenerativeBackbone,
    encoder: &dyn TokenEncoder,
    extractor: &dyn PerceptualExtractor,
    total_steps: Option<usize>,
) -> Result<TrainOutcome> {
    let total = total_steps.unwrap_or(ck.meta.config.steps);
    let mut session = TrainSession::resume(ck, dataset, backbone, encoder, extractor)?;
    // the continued run records the length it was extended to
    session.cfg.steps = total;
    drive(session, total)
}

/// Fixed "pretrained" toy networks; their weights depend only on the
/// profile, never on a run's seed.
pub struct ToyModels {
    pub backbone: ToyBackbone,
    pub encoder: ToyTokenEncoder,
    pub extractor: ToyExtractor,
}

impl ToyModels {
    pub const BASE_SEED: u64 = 7;

    pub fn new() -> Self {
        Self {
            backbone: ToyBackbone::new(Self::BASE_SEED),
            encoder: ToyTokenEncoder::new(Self::BASE_SEED),
            extractor: ToyExtractor::new(Self::BASE_SEED),
        }
    }

    /// Only the toy profile has a bundled backend.
    pub fn for_profile(id: &str) -> Result<Self> {
        match id {
            BackboneProfile::TOY_ID => Ok(Self::new()),
            other if BackboneProfile::by_id(other).is_some() => Err(Error::config(
                "backbone",
                format!("profile `{other}` has no bundled backend; only `{}` runs locally", BackboneProfile::TOY_ID),
            )),
            other => Err(Error::config("backbone", format!("unknown profile `{other}`"))),
        }
    }
}

impl Default for ToyModels {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::stylize_image;
    use crate::synthetic::write_toy_scene;

    fn toy_dataset(dir: &Path) -> SceneDataset {
        let (scene, style) = write_toy_scene(dir, 4, 32, 11).unwrap();
        build_dataset(&scene, &style, 32).unwrap()
    }

    fn quick_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            ..TrainConfig::toy()
        }
    }

    #[test]
    fn dataset_is_sorted_and_validated() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = toy_dataset(tmp.path());
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.names(), ["view_00.png", "view_01.png", "view_02.png", "view_03.png"]);
        let again = build_dataset(&tmp.path().join("scene"), ds.style_path(), 32).unwrap();
        assert_eq!(again.paths(), ds.paths());
        assert_eq!(ds.image(0).unwrap().height(), 32);

        std::fs::write(tmp.path().join("scene/view_zz.png"), b"not a png").unwrap();
        let err = build_dataset(&tmp.path().join("scene"), ds.style_path(), 32).unwrap_err();
        assert!(matches!(&err, Error::Config { field, message } if field == "scene" && message.contains("view_zz.png")), "{err}");

        std::fs::remove_file(tmp.path().join("scene/view_zz.png")).unwrap();
        let empty = tmp.path().join("empty");
        std::fs::create_dir_all(&empty).unwrap();
        assert!(matches!(build_dataset(&empty, ds.style_path(), 32), Err(Error::Config { .. })));
        let err = build_dataset(&tmp.path().join("scene"), &tmp.path().join("missing.png"), 32).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "style"));
    }

    #[test]
    fn config_round_trips_and_names_bad_fields() {
        let cfg = TrainConfig::toy();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        let parsed = TrainConfig::from_toml_str("steps = 5\n[weights]\nstyle = 2.0\n").unwrap();
        assert_eq!((parsed.steps, parsed.weights.style, parsed.weights.content), (5, 2.0, 1e3));
        let field = |text: &str| match TrainConfig::from_toml_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("lr = \"fast\""), "lr");
        assert_eq!(field("lr = -1.0"), "lr");
        assert_eq!(field("[weights]\nstyle = -3.0"), "weights.style");
        assert_eq!(field("resolution = 30"), "resolution");
        assert_eq!(field("backbone = \"nope\""), "backbone");
        assert_eq!(field("bogus = 1"), "bogus");
        assert_eq!(field("[lora]\nrank = \"x\""), "lora.rank");
    }

    #[test]
    fn sampler_visits_each_index_once_per_epoch() {
        let mut s = Sampler::new(5, 3);
        for _ in 0..4 {
            let mut epoch: Vec<usize> = (0..5).map(|_| s.next_index()).collect();
            epoch.sort();
            assert_eq!(epoch, [0, 1, 2, 3, 4]);
        }
        let mut a = Sampler::new(4, 9);
        a.next_batch(3);
        let mut b = Sampler::restore(4, 9, a.state());
        assert_eq!(a.next_batch(7), b.next_batch(7));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(0.5);
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
        adam.begin_step();
        adam.update("p", &mut p, &Tensor::new(&[2], vec![3.0, -0.25]).unwrap());
        assert!((p.data()[0] - 0.5).abs() < 1e-6 && (p.data()[1] + 0.5).abs() < 1e-6);
        assert_eq!(p.data()[0], p.data()[0] as f32 as f64);
    }

    #[test]
    fn checkpoint_archive_round_trips() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = toy_dataset(tmp.path());
        let mut m = ToyModels::new();
        let out = train(&ds, &quick_config(2), &mut m.backbone, &m.encoder, &m.extractor).unwrap();
        let path = tmp.path().join("ck.bin");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.checkpoint);
        assert!(back.tensors.keys().all(|k| k.starts_with("lora.") || k.starts_with("projector.") || k.starts_with("adam.")));
        let mut bytes = out.checkpoint.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn zero_steps_is_the_base_backbone() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = toy_dataset(tmp.path());
        let mut m = ToyModels::new();
        let out = train(&ds, &quick_config(0), &mut m.backbone, &m.encoder, &m.extractor).unwrap();
        assert!(out.log.is_empty());
        let mut fresh = ToyModels::new();
        let cond = out.checkpoint.restore(&mut fresh.backbone, &fresh.encoder).unwrap();
        let emb = cond.embedding(&fresh.encoder, &ds.style().unwrap()).unwrap();
        let base = ToyModels::new();
        let img = ds.image(1).unwrap();
        assert_eq!(
            stylize_image(&fresh.backbone, &img, &emb).unwrap(),
            stylize_image(&base.backbone, &img, &emb).unwrap()
        );
    }

    #[test]
    fn trainable_enumeration() {
        let m = ToyModels::new();
        let proj = VisionLanguageProjector::init(32, 32, 16, 1).unwrap();
        let (list, total) = trainable_parameters(&m.backbone, &proj);
        assert_eq!(total, proj.parameter_count());
        assert!(list.iter().all(|(n, _)| n.starts_with("projector.")));
    }

    #[test]
    fn adapters_receive_gradient_and_base_stays_frozen() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = toy_dataset(tmp.path());
        let mut m = ToyModels::new();
        let base = m.backbone.base_digest();
        let mut s = TrainSession::start(&ds, &quick_config(3), &mut m.backbone, &m.encoder, &m.extractor).unwrap();
        let before: Vec<Tensor> = s.backbone().adapters().iter().map(|a| a.b().clone()).collect();
        s.step().unwrap();
        for (a, b0) in s.backbone().adapters().iter().zip(&before) {
            assert!(a.b().max_abs_diff(b0) > 0.0, "{} did not move", a.host);
        }
        s.verify_frozen_base().unwrap();
        assert_eq!(s.backbone().base_digest(), base);
    }

    #[test]
    fn resume_restores_moments() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = toy_dataset(tmp.path());
        let mut m = ToyModels::new();
        let mut cfg = quick_config(4);
        cfg.checkpoint_every = 2;
        let full = train(&ds, &cfg, &mut m.backbone, &m.encoder, &m.extractor).unwrap();
        assert_eq!(full.snapshots.len(), 1);
        let snap = &full.snapshots[0];

        let mut r = ToyModels::new();
        let resumed = resume(snap, &ds, &mut r.backbone, &r.encoder, &r.extractor, None).unwrap();
        assert_eq!(resumed.log, full.log[2..]);
        assert_eq!(resumed.checkpoint.tensors, full.checkpoint.tensors);

        let mut stripped = snap.clone();
        stripped.tensors.retain(|k, _| !k.starts_with("adam."));
        stripped.meta.adam_steps = 0;
        let mut f = ToyModels::new();
        let fresh = resume(&stripped, &ds, &mut f.backbone, &f.encoder, &f.extractor, Some(3)).unwrap();
        assert_eq!(fresh.log[0], full.log[2]);
        assert_ne!(fresh.checkpoint.tensors.get("lora.decoder.conv.b"), full.snapshots[0].tensors.get("lora.decoder.conv.b"));
        let mut s = ToyModels::new();
        let with = resume(snap, &ds, &mut s.backbone, &s.encoder, &s.extractor, Some(3)).unwrap();
        assert_ne!(
            with.checkpoint.tensors.get("lora.decoder.conv.b"),
            fresh.checkpoint.tensors.get("lora.decoder.conv.b")
        );

        let mut wrong = snap.clone();
        wrong.meta.profile_id = BackboneProfile::REFERENCE_ID.into();
        let mut w = ToyModels::new();
        assert!(matches!(
            resume(&wrong, &ds, &mut w.backbone, &w.encoder, &w.extractor, None),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_breakdown() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = toy_dataset(tmp.path());
        let mut m = ToyModels::new();
        let mut cfg = quick_config(1);
        cfg.weights.style = f64::MAX;
        cfg.weights.content = f64::MAX;
        cfg.weights.color_alignment = f64::MAX;
        cfg.weights.structure = f64::MAX;
        match train(&ds, &cfg, &mut m.backbone, &m.encoder, &m.extractor) {
            Err(Error::NonFiniteLoss { step: 0, breakdown }) => assert!(breakdown.contains("total")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn only_the_toy_profile_runs_locally() {
        assert!(ToyModels::for_profile(BackboneProfile::TOY_ID).is_ok());
        assert!(matches!(ToyModels::for_profile(BackboneProfile::REFERENCE_ID), Err(Error::Config { .. })));
    }
}
