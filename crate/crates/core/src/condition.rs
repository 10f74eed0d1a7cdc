//! Style condition: image tokens mapped into the generator's context space.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::params::{digest_tensors, BoundParams, Parameterized};
use crate::perceptual::{TokenEncoder, TokenSequence};
use crate::tensor::Tensor;

/// Cross-attention context `[T, D_ctx]` handed to the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Tensor,
}

impl ConditionEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn zeros(tokens: usize, width: usize) -> Self {
        Self {
            tokens: Tensor::zeros(&[tokens, width]),
        }
    }
}

/// Two-layer tokenwise MLP: `W₂·gelu(W₁·t + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionLanguageProjector {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    pub trainable: bool,
    version: u64,
}

impl VisionLanguageProjector {
    pub fn init(d_img: usize, d_hidden: usize, d_ctx: usize, seed: u64) -> Result<Self> {
        Self::check_widths(d_img, d_hidden, d_ctx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w1: Tensor::randn(&[d_hidden, d_img], 0.02, &mut rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::randn(&[d_ctx, d_hidden], 0.02, &mut rng),
            b2: Tensor::zeros(&[d_ctx]),
            trainable: true,
            version: 0,
        })
    }

    /// All-zero projector; maps every token to the zero vector.
    pub fn zeros(d_img: usize, d_hidden: usize, d_ctx: usize) -> Result<Self> {
        Self::check_widths(d_img, d_hidden, d_ctx)?;
        Ok(Self {
            w1: Tensor::zeros(&[d_hidden, d_img]),
            b1: Tensor::zeros(&[d_hidden]),
            w2: Tensor::zeros(&[d_ctx, d_hidden]),
            b2: Tensor::zeros(&[d_ctx]),
            trainable: true,
            version: 0,
        })
    }

    /// Builds a projector from explicit weights (`w1: [D_h, D_img]`,
    /// `w2: [D_ctx, D_h]`).
    pub fn from_weights(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (&[dh, di], &[dc, dh2]) = (w1.shape(), w2.shape()) else {
            return Err(Error::shape("projector weights must be matrices"));
        };
        if dh != dh2 || b1.numel() != dh || b2.numel() != dc || di == 0 {
            return Err(Error::shape("inconsistent projector weight shapes"));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            trainable: true,
            version: 0,
        })
    }

    fn check_widths(d_img: usize, d_hidden: usize, d_ctx: usize) -> Result<()> {
        if d_img == 0 || d_hidden == 0 || d_ctx == 0 {
            return Err(Error::arg(format!(
                "projector widths must be >= 1, got {d_img}/{d_hidden}/{d_ctx}"
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.w2.shape()[0]
    }

    /// Incremented whenever parameters change; part of the condition cache key.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Applies the projector tokenwise to a `[T, D_img]` variable, reading
    /// weights from `params` when bound there and as constants otherwise.
    pub fn apply<'t>(&self, params: &BoundParams<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.input_width() {
            return Err(Error::arg(format!(
                "projector expects [T, {}] tokens, got {shape:?}",
                self.input_width()
            )));
        }
        let tape = tokens.tape();
        let var = |name: &str, t: &Tensor| params.get(name).unwrap_or_else(|| tape.constant(t.clone()));
        let hidden = tokens
            .matmul(var("projector.w1", &self.w1).transpose()?)?
            .add_row_bias(var("projector.b1", &self.b1))?
            .gelu();
        hidden
            .matmul(var("projector.w2", &self.w2).transpose()?)?
            .add_row_bias(var("projector.b2", &self.b2))
    }

    pub fn project(&self, tokens: &TokenSequence) -> Result<ConditionEmbedding> {
        let tape = Tape::new();
        let out = self.apply(&BoundParams::new(), tape.constant(tokens.tokens.clone()))?;
        Ok(ConditionEmbedding {
            tokens: (*out.value()).clone(),
        })
    }

    pub fn digest(&self) -> String {
        digest_tensors(
            self.named_parameters()
                .iter()
                .map(|(n, t)| (n.as_str(), *t))
                .collect::<Vec<_>>(),
        )
    }
}

impl Parameterized for VisionLanguageProjector {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("projector.b1".into(), &self.b1),
            ("projector.b2".into(), &self.b2),
            ("projector.w1".into(), &self.w1),
            ("projector.w2".into(), &self.w2),
        ]
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match name {
            "projector.w1" => Some(&mut self.w1),
            "projector.b1" => Some(&mut self.b1),
            "projector.w2" => Some(&mut self.w2),
            "projector.b2" => Some(&mut self.b2),
            _ => None,
        }
    }
}

/// A free `[T, D_ctx]` embedding trained in place of the vision condition.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedEmbedding {
    tokens: Tensor,
}

impl LearnedEmbedding {
    pub const PARAM: &'static str = "embedding.tokens";

    pub fn init(tokens: usize, width: usize, seed: u64) -> Result<Self> {
        if tokens == 0 || width == 0 {
            return Err(Error::arg("learned embedding needs at least one token and width 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            tokens: Tensor::randn(&[tokens, width], 0.02, &mut rng),
        })
    }

    pub fn var<'t>(&self, params: &BoundParams<'t>, tape: &'t Tape) -> Var<'t> {
        params
            .get(Self::PARAM)
            .unwrap_or_else(|| tape.constant(self.tokens.clone()))
    }

    pub fn embedding(&self) -> ConditionEmbedding {
        ConditionEmbedding {
            tokens: self.tokens.clone(),
        }
    }
}

impl Parameterized for LearnedEmbedding {
    fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        vec![(Self::PARAM.into(), &self.tokens)]
    }

    fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        (name == Self::PARAM).then_some(&mut self.tokens)
    }
}

/// `P_VL(E_I(style))`.
pub fn encode_style(
    encoder: &dyn TokenEncoder,
    projector: &VisionLanguageProjector,
    style: &Image,
) -> Result<ConditionEmbedding> {
    projector.project(&encoder.encode(style)?)
}

/// Memoizes [`encode_style`] per (style image, projector parameters).
#[derive(Default)]
pub struct ConditionCache {
    entry: RefCell<Option<(String, u64, ConditionEmbedding)>>,
    misses: RefCell<usize>,
}

impl ConditionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &self,
        encoder: &dyn TokenEncoder,
        projector: &VisionLanguageProjector,
        style: &Image,
    ) -> Result<ConditionEmbedding> {
        let key = digest_tensors([("style", &style.to_tensor())]);
        if let Some((k, v, emb)) = self.entry.borrow().as_ref() {
            if *k == key && *v == projector.version() {
                return Ok(emb.clone());
            }
        }
        *self.misses.borrow_mut() += 1;
        let emb = encode_style(encoder, projector, style)?;
        *self.entry.borrow_mut() = Some((key, projector.version(), emb.clone()));
        Ok(emb)
    }

    pub fn misses(&self) -> usize {
        *self.misses.borrow()
    }
}
