//! The generator: latent encoder, one-step conditional denoiser, latent
//! decoder, with low-rank adapters on frozen layers.

use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PadMode, Tape, Var};
use crate::condition::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::params::{digest_tensors, BoundParams, Parameterized};
use crate::tensor::Tensor;

/// Static description of a generator family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneProfile {
    pub id: String,
    /// Spatial downsampling factor of the latent encoder.
    pub reduction: usize,
    pub latent_channels: usize,
    /// Width of each condition token.
    pub context_width: usize,
    /// Timestep index used for the single denoising step.
    pub timestep: usize,
}

impl BackboneProfile {
    pub const TOY_ID: &'static str = "toy-v1";
    pub const REFERENCE_ID: &'static str = "sd-turbo-2.1";

    /// The distilled latent-diffusion generator the method targets.
    pub fn reference() -> Self {
        Self {
            id: Self::REFERENCE_ID.into(),
            reduction: 8,
            latent_channels: 4,
            context_width: 1024,
            timestep: 999,
        }
    }

    pub fn toy() -> Self {
        Self {
            id: Self::TOY_ID.into(),
            reduction: 4,
            latent_channels: 4,
            context_width: 16,
            timestep: 999,
        }
    }

    /// Default `(rank, α)`: α = 8 throughout; rank 8 for the reference
    /// profile, rank 2 for the toy profile whose narrowest layer has three
    /// outputs.
    pub fn default_lora(&self) -> (usize, f64) {
        if self.id == Self::TOY_ID {
            (2, 8.0)
        } else {
            (8, 8.0)
        }
    }

    pub fn by_id(id: &str) -> Option<Self> {
        [Self::toy(), Self::reference()].into_iter().find(|p| p.id == id)
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        if height == 0
            || width == 0
            || height % self.reduction != 0
            || width % self.reduction != 0
        {
            return Err(Error::arg(format!(
                "{height}x{width} image is not divisible by the latent reduction {}",
                self.reduction
            )));
        }
        Ok([
            self.latent_channels,
            height / self.reduction,
            width / self.reduction,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
}

impl LayerKind {
    /// `(d, k)`: output width and flattened input width of the weight matrix.
    pub fn fan(&self) -> (usize, usize) {
        match *self {
            LayerKind::Linear {
                in_features,
                out_features,
            } => (out_features, in_features),
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels, in_channels * kernel * kernel),
        }
    }
}

/// A frozen linear or convolutional layer.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    weight: Rc<Tensor>,
    bias: Option<Rc<Tensor>>,
}

impl Layer {
    pub fn linear(name: &str, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let &[out_features, in_features] = weight.shape() else {
            return Err(Error::shape("linear weight must be [out, in]"));
        };
        Self::checked(
            name,
            LayerKind::Linear {
                in_features,
                out_features,
            },
            weight,
            bias,
        )
    }

    pub fn conv(name: &str, weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Result<Self> {
        let &[out_channels, in_channels, kh, kw] = weight.shape() else {
            return Err(Error::shape("conv weight must be [out, in, k, k]"));
        };
        if kh != kw || stride == 0 {
            return Err(Error::shape("conv kernels must be square with stride >= 1"));
        }
        Self::checked(
            name,
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel: kh,
                stride,
                pad,
            },
            weight,
            bias,
        )
    }

    fn checked(name: &str, kind: LayerKind, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (d, _) = kind.fan();
        if bias.as_ref().is_some_and(|b| b.numel() != d) {
            return Err(Error::shape(format!("{name}: bias length must be {d}")));
        }
        Ok(Self {
            name: name.into(),
            kind,
            weight: Rc::new(weight),
            bias: bias.map(Rc::new),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_deref()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }

    /// Frozen path plus the adapter delta, if any. Linear layers take
    /// `[N, in]`; convolutions take `[C, H, W]` with replicate padding.
    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        adapter: Option<&LoraAdapter>,
        params: &BoundParams<'t>,
    ) -> Result<Var<'t>> {
        let tape = x.tape();
        let weight = tape.constant_rc(self.weight.clone());
        let lora = adapter.map(|a| a.vars(params, tape));
        match self.kind {
            LayerKind::Linear { in_features, .. } => {
                let shape = x.shape();
                if shape.len() != 2 || shape[1] != in_features {
                    return Err(Error::shape(format!(
                        "{}: expected [N, {in_features}] input, got {shape:?}",
                        self.name
                    )));
                }
                let mut y = x.matmul(weight.transpose()?)?;
                if let Some(b) = &self.bias {
                    y = y.add_row_bias(tape.constant_rc(b.clone()))?;
                }
                if let Some((a, b, scale)) = lora {
                    let delta = x.matmul(a.transpose()?)?.matmul(b.transpose()?)?;
                    y = y.add(delta.scale(scale))?;
                }
                Ok(y)
            }
            LayerKind::Conv {
                in_channels,
                out_channels,
                stride,
                pad,
                ..
            } => {
                let shape = x.shape();
                if shape.len() != 3 || shape[0] != in_channels {
                    return Err(Error::shape(format!(
                        "{}: expected [{in_channels}, H, W] input, got {shape:?}",
                        self.name
                    )));
                }
                let xp = x.pad(pad, PadMode::Replicate)?;
                let mut y = xp.conv2d(weight, stride)?;
                if let Some(b) = &self.bias {
                    y = y.add_channel_bias(tape.constant_rc(b.clone()))?;
                }
                if let Some((a, b, scale)) = lora {
                    let rank = a.shape()[0];
                    let b_kernel = b.reshape(&[out_channels, rank, 1, 1])?;
                    let delta = xp.conv2d(a, stride)?.conv2d(b_kernel, 1)?;
                    y = y.add(delta.scale(scale))?;
                }
                Ok(y)
            }
        }
    }
}

/// Low-rank delta `(α/r)·B·A` attached to one frozen layer.
///
/// `A` is `[r, k]` (stored `[r, in, kh, kw]` for convolutions) and `B` is
/// `[d, r]`; `B` starts at zero so the adapted layer equals the frozen one.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub host: String,
    pub rank: usize,
    pub alpha: f64,
    a: Tensor,
    b: Tensor,
}

impl LoraAdapter {
    pub fn new(host: &str, kind: LayerKind, rank: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, k) = kind.fan();
        if rank == 0 || rank > d.min(k) {
            return Err(Error::arg(format!(
                "{host}: LoRA rank {rank} must be in 1..={}",
                d.min(k)
            )));
        }
        let a_shape: Vec<usize> = match kind {
            LayerKind::Linear { .. } => vec![rank, k],
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => vec![rank, in_channels, kernel, kernel],
        };
        Ok(Self {
            host: host.into(),
            rank,
            alpha,
            a: Tensor::randn(&a_shape, (1.0 / rank as f64).sqrt(), rng),
            b: Tensor::zeros(&[d, rank]),
        })
    }

    pub fn from_factors(host: &str, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let rank = a.shape()[0];
        if b.shape().len() != 2 || b.shape()[1] != rank || rank == 0 {
            return Err(Error::shape(format!(
                "{host}: LoRA factors {:?} and {:?} disagree on rank",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            host: host.into(),
            rank,
            alpha,
            a,
            b,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_name(&self) -> String {
        format!("lora.{}.a", self.host)
    }

    pub fn b_name(&self) -> String {
        format!("lora.{}.b", self.host)
    }

    pub fn parameter_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    fn vars<'t>(&self, params: &BoundParams<'t>, tape: &'t Tape) -> (Var<'t>, Var<'t>, f64) {
        let a = params
            .get(&self.a_name())
            .unwrap_or_else(|| tape.constant(self.a.clone()));
        let b = params
            .get(&self.b_name())
            .unwrap_or_else(|| tape.constant(self.b.clone()));
        (a, b, self.scale())
    }
}

/// `(W + (α/r)·B·A)·x + bias` for a linear host; `x` is `[k]` or `[N, k]`.
pub fn lora_forward(
    weight: &Tensor,
    bias: Option<&Tensor>,
    adapter: &LoraAdapter,
    x: &Tensor,
) -> Result<Tensor> {
    let layer = Layer::linear(&adapter.host, weight.clone(), bias.cloned())?;
    let (d, k) = layer.kind.fan();
    if adapter.a.shape() != [adapter.rank, k] || adapter.b.shape() != [d, adapter.rank] {
        return Err(Error::shape(format!(
            "adapter factors {:?} / {:?} do not fit a {d}x{k} weight",
            adapter.a.shape(),
            adapter.b.shape()
        )));
    }
    let rows = if x.shape().len() == 1 { 1 } else { x.shape()[0] };
    let x2 = x.clone().reshape(&[rows, x.numel() / rows.max(1)])?;
    let tape = Tape::new();
    let y = layer.forward(tape.constant(x2), Some(adapter), &BoundParams::new())?;
    let out = (*y.value()).clone();
    if x.shape().len() == 1 {
        out.reshape(&[d])
    } else {
        Ok(out)
    }
}

/// Which layers receive adapters: those whose name starts with any prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFilter {
    pub prefixes: Vec<String>,
}

impl LayerFilter {
    pub fn all() -> Self {
        Self {
            prefixes: vec![String::new()],
        }
    }

    pub fn none() -> Self {
        Self { prefixes: vec![] }
    }

    pub fn prefixes<S: Into<String>>(prefixes: impl IntoIterator<Item = S>) -> Self {
        Self {
            prefixes: prefixes.into_iter().map(Into::into).collect(),
        }
    }

    pub fn matches(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }
}

impl Default for LayerFilter {
    fn default() -> Self {
        Self::prefixes(["encoder.", "denoiser.", "decoder."])
    }
}

/// A latent generator with frozen base layers and optional LoRA adapters.
///
/// Forward methods read adapter factors from `params` when they are bound
/// there (training) and fall back to the stored values otherwise.
pub trait GenerativeBackbone: Parameterized {
    fn profile(&self) -> &BackboneProfile;

    fn layers(&self) -> &[Layer];

    fn adapters(&self) -> &[LoraAdapter];

    /// Attaches a zero-initialized adapter to every layer accepted by
    /// `filter`; returns how many were attached.
    fn inject_lora(&mut self, rank: usize, alpha: f64, filter: &dyn Fn(&str) -> bool, seed: u64) -> Result<usize>;

    fn encode_latent<'t>(&self, params: &BoundParams<'t>, image: Var<'t>) -> Result<Var<'t>>;

    fn denoise_once<'t>(&self, params: &BoundParams<'t>, latent: Var<'t>, condition: Var<'t>) -> Result<Var<'t>>;

    fn decode_latent<'t>(&self, params: &BoundParams<'t>, latent: Var<'t>) -> Result<Var<'t>>;

    /// Total denoiser invocations so far.
    fn denoise_calls(&self) -> usize;

    fn base_parameter_count(&self) -> usize {
        self.layers().iter().map(Layer::parameter_count).sum()
    }

    /// Hash of every frozen weight and bias.
    fn base_digest(&self) -> String {
        let mut items: Vec<(String, &Tensor)> = Vec::new();
        for l in self.layers() {
            items.push((format!("{}.weight", l.name), l.weight()));
            if let Some(b) = l.bias() {
                items.push((format!("{}.bias", l.name), b));
            }
        }
        digest_tensors(items.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// `Σ r·(d + k)` over attached adapters.
    fn analytic_adapter_count(&self) -> usize {
        self.adapters()
            .iter()
            .map(|a| {
                let layer = self
                    .layers()
                    .iter()
                    .find(|l| l.name == a.host)
                    .expect("adapter host exists");
                let (d, k) = layer.kind.fan();
                a.rank * (d + k)
            })
            .sum()
    }
}

/// `decode(denoise_once(encode(content), condition))`.
pub fn stylize<'t>(
    backbone: &dyn GenerativeBackbone,
    params: &BoundParams<'t>,
    content: Var<'t>,
    condition: Var<'t>,
) -> Result<Var<'t>> {
    let latent = backbone.encode_latent(params, content)?;
    let denoised = backbone.denoise_once(params, latent, condition)?;
    backbone.decode_latent(params, denoised)
}

pub fn stylize_image(
    backbone: &dyn GenerativeBackbone,
    content: &Image,
    condition: &ConditionEmbedding,
) -> Result<Image> {
    let tape = Tape::new();
    let out = stylize(
        backbone,
        &BoundParams::new(),
        content.to_var(&tape),
        tape.constant(condition.tokens.clone()),
    )?;
    Image::from_tensor(&out.value())
}

/// Seeded desk-scale generator.
///
/// Encoder: two 2×2 stride-2 convolutions whose first three channels are
/// exact block means of the RGB input. Denoiser: `z + conv_out(gelu(conv_in(z))
/// ⊙ γ + β)` with `(γ, β)` a linear map of the mean condition token, so a
/// zero condition leaves the latent untouched. Decoder: bilinear upsampling
/// followed by a 3×3 convolution passing the mean channels through.
pub struct ToyBackbone {
    profile: BackboneProfile,
    layers: Vec<Layer>,
    adapters: Vec<LoraAdapter>,
    hidden: usize,
    calls: AtomicUsize,
}

impl ToyBackbone {
    pub const HIDDEN: usize = 8;

    pub fn new(seed: u64) -> Self {
        Self::with_profile(BackboneProfile::toy(), seed)
    }

    pub fn with_profile(profile: BackboneProfile, seed: u64) -> Self {
        assert_eq!(profile.reduction, 4, "toy backbone reduces by 4");
        assert!(profile.latent_channels >= 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cz = profile.latent_channels;
        let hidden = Self::HIDDEN;
        let e1 = 8;

        let mut w = Tensor::randn(&[e1, 3, 2, 2], 0.5, &mut rng);
        for o in 0..3 {
            for c in 0..3 {
                for k in 0..4 {
                    w.data_mut()[(o * 3 + c) * 4 + k] = if o == c { 0.25 } else { 0.0 };
                }
            }
        }
        let enc1 = Layer::conv("encoder.conv1", w, Some(Tensor::zeros(&[e1])), 2, 0);

        let mut w = Tensor::randn(&[cz, e1, 2, 2], 0.3, &mut rng);
        for o in 0..3 {
            for c in 0..e1 {
                for k in 0..4 {
                    w.data_mut()[(o * e1 + c) * 4 + k] = if o == c { 0.25 } else { 0.0 };
                }
            }
        }
        let enc2 = Layer::conv("encoder.conv2", w, Some(Tensor::zeros(&[cz])), 2, 0);

        let conv_in = Layer::conv(
            "denoiser.conv_in",
            Tensor::randn(&[hidden, cz, 3, 3], (2.0 / (9 * cz) as f64).sqrt(), &mut rng),
            Some(Tensor::zeros(&[hidden])),
            1,
            1,
        );
        let cond = Layer::linear(
            "denoiser.cond",
            Tensor::randn(
                &[2 * hidden, profile.context_width],
                1.0 / (profile.context_width as f64).sqrt(),
                &mut rng,
            ),
            None,
        );
        let conv_out = Layer::conv(
            "denoiser.conv_out",
            Tensor::randn(&[cz, hidden, 3, 3], 0.1, &mut rng),
            Some(Tensor::zeros(&[cz])),
            1,
            1,
        );

        let mut w = Tensor::zeros(&[3, cz, 3, 3]);
        for o in 0..3 {
            w.data_mut()[(o * cz + o) * 9 + 4] = 1.0;
            for c in 3..cz {
                for k in 0..9 {
                    w.data_mut()[(o * cz + c) * 9 + k] = 0.002 * Tensor::randn(&[1], 1.0, &mut rng).item();
                }
            }
        }
        let dec = Layer::conv("decoder.conv", w, Some(Tensor::zeros(&[3])), 1, 1);

        let layers = [enc1, enc2, conv_in, cond, conv_out, dec]
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .expect("toy layer shapes are consistent");
        Self {
            profile,
            layers,
            adapters: Vec::new(),
            hidden,
            calls: AtomicUsize::new(0),
        }
    }

    fn layer(&self, name: &str) -> &Layer {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .expect("toy layer exists")
    }

    fn adapter(&self, name: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.host == name)
    }

    fn run<'t>(&self, name: &str, x: Var<'t>, params: &BoundParams<'t>) -> Result<Var<'t>> {
        self.layer(name).forward(x, self.adapter(name), params)
    }
}

impl Parameterized for ToyBackbone {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .adapters
            .iter()
            .flat_map(|a| [(a.a_name(), &a.a), (a.b_name(), &a.b)])
            .collect();
        out.sort_by(|x, y| x.0.cmp(&y.0));
        out
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.adapters.iter_mut().find_map(|a| {
            if name == a.a_name() {
                Some(&mut a.a)
            } else if name == a.b_name() {
                Some(&mut a.b)
            } else {
                None
            }
        })
    }
}

impl GenerativeBackbone for ToyBackbone {
    fn profile(&self) -> &BackboneProfile {
        &self.profile
    }

    fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    fn inject_lora(&mut self, rank: usize, alpha: f64, filter: &dyn Fn(&str) -> bool, seed: u64) -> Result<usize> {
        let targets: Vec<&Layer> = self.layers.iter().filter(|l| filter(&l.name)).collect();
        if let Some(l) = targets.iter().find(|l| self.adapter(&l.name).is_some()) {
            return Err(Error::State(format!("layer {} already has an adapter", l.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let new = targets
            .iter()
            .map(|l| LoraAdapter::new(&l.name, l.kind, rank, alpha, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let n = new.len();
        self.adapters.extend(new);
        Ok(n)
    }

    fn encode_latent<'t>(&self, params: &BoundParams<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        let [3, h, w] = shape[..] else {
            return Err(Error::shape(format!("expected a [3, H, W] image, got {shape:?}")));
        };
        self.profile.latent_shape(h, w)?;
        let x = self.run("encoder.conv1", image, params)?;
        self.run("encoder.conv2", x, params)
    }

    fn denoise_once<'t>(&self, params: &BoundParams<'t>, latent: Var<'t>, condition: Var<'t>) -> Result<Var<'t>> {
        let cshape = condition.shape();
        if cshape.len() != 2 || cshape[1] != self.profile.context_width {
            return Err(Error::arg(format!(
                "condition must be [T, {}], got {cshape:?}",
                self.profile.context_width
            )));
        }
        let zshape = latent.shape();
        if zshape.len() != 3 || zshape[0] != self.profile.latent_channels {
            return Err(Error::shape(format!("unexpected latent shape {zshape:?}")));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let h = self.run("denoiser.conv_in", latent, params)?.gelu();
        let pooled = condition.mean_rows()?;
        let modulation = self.run("denoiser.cond", pooled, params)?.reshape(&[2 * self.hidden])?;
        let gamma = modulation.narrow(0, self.hidden)?;
        let beta = modulation.narrow(self.hidden, self.hidden)?;
        let update = self.run("denoiser.conv_out", h.channel_affine(gamma, beta)?, params)?;
        latent.add(update)
    }

    fn decode_latent<'t>(&self, params: &BoundParams<'t>, latent: Var<'t>) -> Result<Var<'t>> {
        let shape = latent.shape();
        let [c, h, w] = shape[..] else {
            return Err(Error::shape(format!("expected a [C, H, W] latent, got {shape:?}")));
        };
        if c != self.profile.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, profile expects {}",
                self.profile.latent_channels
            )));
        }
        let r = self.profile.reduction;
        let up = latent.resize_bilinear(h * r, w * r)?;
        Ok(self.run("decoder.conv", up, params)?.clamp(0.0, 1.0))
    }

    fn denoise_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};

    fn smooth_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| {
            let (fy, fx) = (y as f64 / (h - 1) as f64, x as f64 / (w - 1) as f64);
            match c {
                0 => 0.1 + 0.8 * fx,
                1 => 0.2 + 0.6 * fy,
                _ => 0.5 + 0.3 * (fx - fy),
            }
        })
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.25..0.75)).collect()).unwrap()
    }

    fn cond_var<'t>(tape: &'t Tape, c: &ConditionEmbedding) -> Var<'t> {
        tape.constant(c.tokens.clone())
    }

    #[test]
    fn lora_zero_b_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3], 1.0, &mut rng);
        let kind = LayerKind::Linear { in_features: 4, out_features: 3 };
        let adapter = LoraAdapter::new("l", kind, 2, 2.0, &mut rng).unwrap();
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let out = lora_forward(&w, Some(&b), &adapter, &x).unwrap();
        let frozen: Vec<f64> = (0..3)
            .map(|i| (0..4).map(|j| w.data()[i * 4 + j] * x.data()[j]).sum::<f64>() + b.data()[i])
            .collect();
        assert_eq!(out.data(), &frozen[..]);
    }

    #[test]
    fn lora_hand_example() {
        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        let adapter = LoraAdapter::from_factors("l", a, b, 1.0).unwrap();
        let out = lora_forward(
            &Tensor::zeros(&[2, 2]),
            Some(&Tensor::zeros(&[2])),
            &adapter,
            &Tensor::new(&[2], vec![3.0, 5.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(out.data(), &[0.0, 3.0]);
    }

    #[test]
    fn lora_delta_is_linear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let a = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let frozen = lora_forward(&w, None, &LoraAdapter::from_factors("l", a.clone(), Tensor::zeros(&[3, 2]), 1.0).unwrap(), &x).unwrap();
        let one = lora_forward(&w, None, &LoraAdapter::from_factors("l", a.clone(), b.clone(), 1.5).unwrap(), &x).unwrap();
        let two = lora_forward(&w, None, &LoraAdapter::from_factors("l", a, b, 3.0).unwrap(), &x).unwrap();
        for ((f, o), t) in frozen.data().iter().zip(one.data()).zip(two.data()) {
            assert!(((t - f) - 2.0 * (o - f)).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_rejects_bad_shapes_and_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kind = LayerKind::Linear { in_features: 4, out_features: 3 };
        assert!(LoraAdapter::new("l", kind, 4, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::new("l", kind, 0, 1.0, &mut rng).is_err());
        let adapter = LoraAdapter::new("l", kind, 2, 1.0, &mut rng).unwrap();
        assert!(lora_forward(&Tensor::zeros(&[3, 5]), None, &adapter, &Tensor::zeros(&[5])).is_err());
        assert!(lora_forward(&Tensor::zeros(&[3, 4]), None, &adapter, &Tensor::zeros(&[5])).is_err());
    }

    #[test]
    fn conv_adapter_matches_merged_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let layer = Layer::conv("c", w.clone(), None, 2, 1).unwrap();
        let a = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let adapter = LoraAdapter::from_factors("c", a.clone(), b.clone(), 3.0).unwrap();
        let x = Tensor::randn(&[2, 7, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let stacked = layer.forward(tape.constant(x.clone()), Some(&adapter), &BoundParams::new()).unwrap();
        // W + (α/r)·B·A with A flattened to [r, in·k·k].
        let mut merged = w.clone();
        for o in 0..3 {
            for j in 0..18 {
                let delta: f64 = (0..2).map(|r| b.data()[o * 2 + r] * a.data()[r * 18 + j]).sum();
                merged.data_mut()[o * 18 + j] += 1.5 * delta;
            }
        }
        let plain = Layer::conv("c", merged, None, 2, 1).unwrap();
        let expected = plain.forward(tape.constant(x), None, &BoundParams::new()).unwrap();
        assert!(stacked.value().max_abs_diff(&expected.value()) < 1e-12);
    }

    #[test]
    fn toy_has_six_eligible_layers() {
        let mut bb = ToyBackbone::new(1);
        assert_eq!(bb.layers().len(), 6);
        let n = bb.inject_lora(2, 2.0, &|n| LayerFilter::all().matches(n), 5).unwrap();
        assert_eq!(n, 6);
        let enumerated: usize = bb.named_parameters().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(enumerated, bb.analytic_adapter_count());
        // Hand count: conv1 8x12, conv2 4x32, conv_in 8x36, cond 16x16, conv_out 4x72, decoder 3x36.
        let expected = 2 * ((8 + 12) + (4 + 32) + (8 + 36) + (16 + 16) + (4 + 72) + (3 + 36));
        assert_eq!(enumerated, expected);
        let err = bb.inject_lora(2, 2.0, &|n| n.starts_with("decoder."), 6).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn empty_filter_changes_nothing() {
        let mut bb = ToyBackbone::new(1);
        let img = smooth_image(16, 16);
        let cond = ConditionEmbedding::zeros(3, 16);
        let before = stylize_image(&bb, &img, &cond).unwrap();
        assert_eq!(bb.inject_lora(2, 2.0, &|n| LayerFilter::none().matches(n), 5).unwrap(), 0);
        assert_eq!(before, stylize_image(&bb, &img, &cond).unwrap());
        assert_eq!(bb.parameter_count(), 0);
    }

    #[test]
    fn default_filter_covers_all_three_parts() {
        let f = LayerFilter::default();
        for name in ["encoder.conv1", "denoiser.cond", "decoder.conv"] {
            assert!(f.matches(name));
        }
        assert!(!f.matches("projector.w1"));
    }

    #[test]
    fn latent_shapes() {
        assert_eq!(BackboneProfile::reference().latent_shape(256, 256).unwrap(), [4, 32, 32]);
        let bb = ToyBackbone::new(2);
        let tape = Tape::new();
        let img = smooth_image(32, 32);
        let z = bb.encode_latent(&BoundParams::new(), img.to_var(&tape)).unwrap();
        assert_eq!(z.shape(), vec![4, 8, 8]);
        let z2 = bb.encode_latent(&BoundParams::new(), img.to_var(&tape)).unwrap();
        assert_eq!(*z.value(), *z2.value());
        let odd = Image::constant(33, 33, [0.5; 3]);
        assert!(matches!(
            bb.encode_latent(&BoundParams::new(), odd.to_var(&tape)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_condition_denoise_is_identity() {
        let bb = ToyBackbone::new(3);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = tape.constant(Tensor::randn(&[4, 5, 6], 1.0, &mut rng));
        let c = tape.constant(Tensor::zeros(&[7, 16]));
        let out = bb.denoise_once(&BoundParams::new(), z, c).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert_eq!(*out.value(), *z.value());
        let wide = tape.constant(Tensor::zeros(&[7, 17]));
        assert!(matches!(bb.denoise_once(&BoundParams::new(), z, wide), Err(Error::Argument(_))));
    }

    #[test]
    fn distinct_conditions_give_distinct_outputs() {
        let bb = ToyBackbone::new(3);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = tape.constant(Tensor::randn(&[4, 4, 4], 1.0, &mut rng));
        let one_hot = |k: usize| tape.constant(Tensor::from_fn(&[1, 16], |i| if i == k { 1.0 } else { 0.0 }));
        let a = bb.denoise_once(&BoundParams::new(), z, one_hot(0)).unwrap();
        let b = bb.denoise_once(&BoundParams::new(), z, one_hot(1)).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) > 1e-3);
    }

    #[test]
    fn decoder_clamps_and_upsamples() {
        let bb = ToyBackbone::new(4);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = tape.constant(Tensor::randn(&[4, 3, 5], 2.0, &mut rng));
        let img = bb.decode_latent(&BoundParams::new(), z).unwrap();
        assert_eq!(img.shape(), vec![3, 12, 20]);
        assert!(img.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = tape.constant(Tensor::zeros(&[3, 3, 5]));
        assert!(bb.decode_latent(&BoundParams::new(), bad).is_err());
    }

    #[test]
    fn toy_round_trip_is_accurate_on_smooth_images() {
        let bb = ToyBackbone::new(5);
        let img = smooth_image(32, 32);
        let tape = Tape::new();
        let p = BoundParams::new();
        let z = bb.encode_latent(&p, img.to_var(&tape)).unwrap();
        let rec = bb.decode_latent(&p, z).unwrap();
        let mse = rec
            .value()
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / img.data().len() as f64;
        let psnr = -10.0 * mse.log10();
        assert!(psnr > 25.0, "psnr {psnr}");
    }

    #[test]
    fn stylize_is_the_three_step_composition_with_one_denoise() {
        let mut bb = ToyBackbone::new(6);
        bb.inject_lora(2, 2.0, &|_| true, 1).unwrap();
        let img = smooth_image(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cond = ConditionEmbedding { tokens: Tensor::randn(&[5, 16], 1.0, &mut rng) };
        let tape = Tape::new();
        let p = BoundParams::new();
        let calls = bb.denoise_calls();
        let out = stylize(&bb, &p, img.to_var(&tape), cond_var(&tape, &cond)).unwrap();
        assert_eq!(bb.denoise_calls(), calls + 1);
        let z = bb.encode_latent(&p, img.to_var(&tape)).unwrap();
        let z = bb.denoise_once(&p, z, cond_var(&tape, &cond)).unwrap();
        let manual = bb.decode_latent(&p, z).unwrap();
        assert_eq!(*out.value(), *manual.value());
    }

    #[test]
    fn fresh_adapters_do_not_change_stylize() {
        let plain = ToyBackbone::new(7);
        let mut adapted = ToyBackbone::new(7);
        adapted.inject_lora(2, 2.0, &|n| LayerFilter::default().matches(n), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cond = ConditionEmbedding { tokens: Tensor::randn(&[4, 16], 1.0, &mut rng) };
        for seed in 0..3 {
            let img = random_image(16, 16, seed);
            assert_eq!(
                stylize_image(&plain, &img, &cond).unwrap(),
                stylize_image(&adapted, &img, &cond).unwrap()
            );
        }
    }

    #[test]
    fn stylize_gradients_match_finite_differences() {
        let mut bb = ToyBackbone::new(8);
        bb.inject_lora(2, 2.0, &|_| true, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let names: Vec<String> = bb.named_parameters().into_iter().map(|(n, _)| n).collect();
        for name in &names {
            let t = bb.parameter_mut(name).unwrap();
            *t = Tensor::randn(t.shape(), 0.1, &mut rng);
        }
        let img = random_image(16, 16, 11);
        let cond = Tensor::randn(&[3, 16], 0.5, &mut rng);
        let probe = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        fn objective<'t>(bb: &ToyBackbone, p: &BoundParams<'t>, img: &Image, cond: &Tensor, probe: &Tensor, tape: &'t Tape) -> Var<'t> {
            let out = stylize(bb, p, img.to_var(tape), tape.constant(cond.clone())).unwrap();
            out.mul(tape.constant(probe.clone())).unwrap().sum()
        }
        let tape = Tape::new();
        let mut bound = BoundParams::new();
        bound.bind(&tape, &bb);
        let grads = tape.backward(objective(&bb, &bound, &img, &cond, &probe, &tape));
        for name in &names {
            let value = bb.named_parameters().into_iter().find(|(n, _)| n == name).unwrap().1.clone();
            let numeric = numeric_gradient(
                |t| {
                    let mut probe_bb = ToyBackbone::new(8);
                    probe_bb.inject_lora(2, 2.0, &|_| true, 4).unwrap();
                    for (n, v) in bb.named_parameters() {
                        *probe_bb.parameter_mut(&n).unwrap() = if &n == name { t.clone() } else { v.clone() };
                    }
                    let tape = Tape::new();
                    objective(&probe_bb, &BoundParams::new(), &img, &cond, &probe, &tape).item()
                },
                &value,
                1e-4,
            );
            let analytic = grads.get_or_zero(bound.get(name).unwrap());
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}
