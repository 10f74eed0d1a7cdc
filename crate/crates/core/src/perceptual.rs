//! Feature extractors behind traits, Gram matrices, and seeded toy networks.
//!
//! Real backbones (a VGG-style perceptual hierarchy, CLIP/DINO-style token
//! encoders) plug in by implementing [`PerceptualExtractor`] and
//! [`TokenEncoder`]. The toy implementations here are small, seeded and
//! deterministic so the whole pipeline can be tested on a CPU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{resize, Image};
use crate::tensor::Tensor;

/// Post-ReLU activations of one tap: `[C, H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer: usize,
    pub data: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub layer: usize,
    /// `C·H'·W'` of the source feature map.
    pub normalizer: f64,
    /// `F·Fᵀ`, not yet divided by the normalizer.
    pub data: Tensor,
}

/// A token sequence `[T, D]`: global token first, then local tokens in
/// row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        match *tokens.shape() {
            [t, d] if t >= 1 && d >= 1 && tokens.is_finite() => Ok(Self { tokens }),
            _ => Err(Error::shape(format!(
                "token sequence must be a finite [T>=1, D>=1] matrix, got {:?}",
                tokens.shape()
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.width();
        &self.tokens.data()[i * d..(i + 1) * d]
    }

    /// All tokens after the global one.
    pub fn locals(&self) -> impl Iterator<Item = &[f64]> {
        (1..self.len()).map(|i| self.token(i))
    }
}

/// A fixed hierarchy of convolutional features with five ReLU taps.
pub trait PerceptualExtractor {
    /// Number of tap points; layers are numbered `1..=layer_count()`.
    fn layer_count(&self) -> usize {
        5
    }

    fn channels(&self, layer: usize) -> usize;

    /// Differentiable features for each requested layer, in request order.
    /// Inputs are `[3, H, W]` images in `[0, 1]`; any input normalization is
    /// applied internally.
    fn features<'t>(&self, image: Var<'t>, layers: &[usize]) -> Result<Vec<Var<'t>>>;

    fn extract_features(&self, image: &Image, layers: &[usize]) -> Result<Vec<FeatureMap>> {
        let tape = Tape::new();
        let vars = self.features(image.to_var(&tape), layers)?;
        Ok(layers
            .iter()
            .zip(vars)
            .map(|(&layer, v)| FeatureMap {
                layer,
                data: (*v.value()).clone(),
            })
            .collect())
    }
}

/// A fixed image encoder producing a global token and a grid of local tokens.
pub trait TokenEncoder {
    fn token_count(&self) -> usize;

    fn width(&self) -> usize;

    /// Input side length the encoder resizes to before encoding.
    fn native_resolution(&self) -> usize;

    fn encode(&self, image: &Image) -> Result<TokenSequence>;
}

/// Declared shape of the pretrained image encoder the method is built around:
/// a ViT-H/14 at 224 px yielding a 16×16 grid of local tokens plus a global
/// token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderProfile {
    pub resolution: usize,
    pub patch: usize,
    pub width: usize,
}

impl EncoderProfile {
    pub const REFERENCE: EncoderProfile = EncoderProfile {
        resolution: 224,
        patch: 14,
        width: 1280,
    };

    pub fn local_tokens(&self) -> usize {
        (self.resolution / self.patch).pow(2)
    }

    pub fn token_count(&self) -> usize {
        1 + self.local_tokens()
    }
}

/// Unnormalized Gram matrix `F·Fᵀ` of a `[C, H, W]` feature variable, plus
/// the `C·H·W` normalizer.
pub fn gram_var<'t>(features: Var<'t>) -> Result<(Var<'t>, f64)> {
    let shape = features.shape();
    let [c, h, w] = shape[..] else {
        return Err(Error::shape(format!(
            "gram expects [C, H, W] features, got {shape:?}"
        )));
    };
    if c * h * w == 0 {
        return Err(Error::arg("gram of an empty feature map"));
    }
    let flat = features.reshape(&[c, h * w])?;
    let g = flat.matmul(flat.transpose()?)?;
    Ok((g, (c * h * w) as f64))
}

pub fn gram(f: &FeatureMap) -> Result<GramMatrix> {
    let tape = Tape::new();
    let (g, normalizer) = gram_var(tape.constant(f.data.clone()))?;
    Ok(GramMatrix {
        layer: f.layer,
        normalizer,
        data: (*g.value()).clone(),
    })
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

struct ConvBlock {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
}

/// Seeded stand-in for a VGG-style hierarchy: five conv blocks, each tap
/// taken after its activation. The activation is a sharp softplus rather
/// than a ReLU: still non-negative, but with no kink, so finite-difference
/// checks of the losses built on it hold at any input.
pub struct ToyExtractor {
    blocks: Vec<ConvBlock>,
    gain: f64,
}

impl ToyExtractor {
    pub const CHANNELS: [usize; 5] = [8, 16, 16, 32, 32];
    /// Taps are scaled so that, under the default loss weights, the Gram
    /// term does not drown the colour term on toy-sized images.
    pub const TAP_GAIN: f64 = 0.08;
    /// Softplus sharpness of every block's activation.
    pub const SHARPNESS: f64 = 10.0;

    /// 3×3 stride-2 blocks: tap `ℓ` has spatial size `ceil(H / 2^ℓ)`.
    pub fn new(seed: u64) -> Self {
        Self::build(seed, 3, 2)
    }

    /// 1×1 stride-1 blocks: every feature depends on a single pixel, so
    /// features permute with the pixels.
    pub fn pointwise(seed: u64) -> Self {
        Self::build(seed, 1, 1)
    }

    fn build(seed: u64, kernel: usize, stride: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_ch = 3;
        let blocks = Self::CHANNELS
            .iter()
            .map(|&out_ch| {
                let fan_in = (in_ch * kernel * kernel) as f64;
                let weight =
                    Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), &mut rng);
                let bias = Tensor::randn(&[out_ch], 0.05, &mut rng);
                in_ch = out_ch;
                ConvBlock {
                    weight,
                    bias,
                    stride,
                    pad: kernel / 2,
                }
            })
            .collect();
        Self {
            blocks,
            gain: Self::TAP_GAIN,
        }
    }

    /// Replaces the tap scale.
    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }
}

impl PerceptualExtractor for ToyExtractor {
    fn channels(&self, layer: usize) -> usize {
        Self::CHANNELS[layer - 1]
    }

    fn features<'t>(&self, image: Var<'t>, layers: &[usize]) -> Result<Vec<Var<'t>>> {
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > self.blocks.len()) {
            return Err(Error::arg(format!(
                "unknown feature layer {bad}; valid layers are 1..={}",
                self.blocks.len()
            )));
        }
        let deepest = layers.iter().copied().max().unwrap_or(0);
        let tape = image.tape();
        let gamma = tape.constant(Tensor::new(&[3], IMAGENET_STD.map(|s| 1.0 / s).to_vec())?);
        let beta = tape.constant(Tensor::new(
            &[3],
            (0..3).map(|c| -IMAGENET_MEAN[c] / IMAGENET_STD[c]).collect(),
        )?);
        let mut x = image.channel_affine(gamma, beta)?;
        let mut taps = Vec::with_capacity(deepest);
        for block in &self.blocks[..deepest] {
            let w = tape.constant(block.weight.clone());
            let b = tape.constant(block.bias.clone());
            x = x
                .pad(block.pad, PadMode::Replicate)?
                .conv2d(w, block.stride)?
                .add_channel_bias(b)?
                .softplus(Self::SHARPNESS);
            taps.push(x.scale(self.gain));
        }
        Ok(layers.iter().map(|&l| taps[l - 1]).collect())
    }
}

/// Seeded patch-pooling encoder: each `patch × patch` cell is summarized by
/// its 2×2 sub-block mean colors and mapped through a fixed `tanh` layer; the
/// global token is the mean of the local tokens.
pub struct ToyTokenEncoder {
    resolution: usize,
    patch: usize,
    weight: Tensor,
    bias: Tensor,
}

const TOY_PATCH_FEATURES: usize = 12;

impl ToyTokenEncoder {
    pub fn new(seed: u64) -> Self {
        Self::with_shape(seed, 32, 4, 32)
    }

    pub fn with_shape(seed: u64, resolution: usize, patch: usize, width: usize) -> Self {
        assert!(patch >= 2 && patch % 2 == 0 && resolution % patch == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = Tensor::randn(&[width, TOY_PATCH_FEATURES], 1.5, &mut rng);
        let bias = Tensor::randn(&[width], 0.3, &mut rng);
        Self {
            resolution,
            patch,
            weight,
            bias,
        }
    }

    fn patch_features(&self, img: &Image, py: usize, px: usize) -> [f64; TOY_PATCH_FEATURES] {
        let half = self.patch / 2;
        let mut f = [0.0; TOY_PATCH_FEATURES];
        for c in 0..3 {
            for sy in 0..2 {
                for sx in 0..2 {
                    let mut acc = 0.0;
                    for y in 0..half {
                        for x in 0..half {
                            acc += img.get(py * self.patch + sy * half + y, px * self.patch + sx * half + x, c);
                        }
                    }
                    f[c * 4 + sy * 2 + sx] = acc / (half * half) as f64 - 0.5;
                }
            }
        }
        f
    }
}

impl TokenEncoder for ToyTokenEncoder {
    fn token_count(&self) -> usize {
        1 + (self.resolution / self.patch).pow(2)
    }

    fn width(&self) -> usize {
        self.bias.numel()
    }

    fn native_resolution(&self) -> usize {
        self.resolution
    }

    fn encode(&self, image: &Image) -> Result<TokenSequence> {
        let img = resize(image, self.resolution, self.resolution)?;
        let grid = self.resolution / self.patch;
        let d = self.width();
        let mut locals = Vec::with_capacity(grid * grid * d);
        for py in 0..grid {
            for px in 0..grid {
                let f = self.patch_features(&img, py, px);
                for k in 0..d {
                    let row = &self.weight.data()[k * TOY_PATCH_FEATURES..(k + 1) * TOY_PATCH_FEATURES];
                    let z: f64 = row.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>() + self.bias.data()[k];
                    locals.push(z.tanh());
                }
            }
        }
        let n = (grid * grid) as f64;
        let mut tokens: Vec<f64> = (0..d)
            .map(|k| locals.iter().skip(k).step_by(d).sum::<f64>() / n)
            .collect();
        tokens.extend(locals);
        TokenSequence::new(Tensor::new(&[grid * grid + 1, d], tokens)?)
    }
}
