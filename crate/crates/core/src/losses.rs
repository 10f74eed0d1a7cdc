//! Training objective: content, Gram style, edge structure and color
//! alignment terms and their weighted total.
//!
//! The style term compares against the style image, not the content image.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{
    color_histogram_var, hellinger_var, laplacian_var, sobel_var, soft_canny_var, CannyParams,
    HistogramParams, Image,
};
use crate::perceptual::{gram_var, PerceptualExtractor};
use crate::tensor::Tensor;

pub const CONTENT_LAYERS: [usize; 3] = [3, 4, 5];
pub const STYLE_LAYERS: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub structure: f64,
    pub color_alignment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            content: 1e3,
            style: 1e8,
            structure: 2e4,
            color_alignment: 1e4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            content: 0.0,
            style: 0.0,
            structure: 0.0,
            color_alignment: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("weights.content", self.content),
            ("weights.style", self.style),
            ("weights.structure", self.structure),
            ("weights.color_alignment", self.color_alignment),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// The weighted sum, always accumulated in this order.
    pub fn combine(&self, content: f64, style: f64, structure: f64, color_alignment: f64) -> f64 {
        self.content * content
            + self.style * style
            + self.structure * structure
            + self.color_alignment * color_alignment
    }
}

/// Operator settings fixed for a run and echoed into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LossSettings {
    pub canny: CannyParams,
    pub histogram: HistogramParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub structure: f64,
    pub color_alignment: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(
        content: f64,
        style: f64,
        structure: f64,
        color_alignment: f64,
        weights: &LossWeights,
    ) -> Self {
        Self {
            content,
            style,
            structure,
            color_alignment,
            total: weights.combine(content, style, structure, color_alignment),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.content, self.style, self.structure, self.color_alignment, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Componentwise mean, with the total recombined from the averaged terms.
    pub fn mean(items: &[LossBreakdown], weights: &LossWeights) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::from_components(
            avg(|b| b.content),
            avg(|b| b.style),
            avg(|b| b.structure),
            avg(|b| b.color_alignment),
            weights,
        )
    }
}

/// Mean elementwise smooth L1 of `a − b` (quadratic below 1, linear above).
pub fn smooth_l1_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!(
            "smooth_l1: shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.sub(b)?.smooth_l1().mean())
}

pub fn smooth_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(smooth_l1_var(tape.constant(a.clone()), tape.constant(b.clone()))?.item())
}

fn same_size(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::arg(format!("{what}: image sizes differ ({a:?} vs {b:?})")));
    }
    Ok(())
}

/// Frozen quantities of the content image.
#[derive(Debug, Clone)]
pub struct ContentTargets {
    shape: Vec<usize>,
    features: Vec<Rc<Tensor>>,
    sobel: Rc<Tensor>,
    laplacian: Rc<Tensor>,
    canny: Rc<Tensor>,
}

/// Frozen quantities of the style image.
#[derive(Debug, Clone)]
pub struct StyleTargets {
    grams: Vec<Rc<Tensor>>,
    histogram: Rc<Tensor>,
}

/// Per-term loss variables of one stylized image.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub content: Var<'t>,
    pub style: Var<'t>,
    pub structure: Var<'t>,
    pub color_alignment: Var<'t>,
}

impl<'t> LossTerms<'t> {
    pub fn weighted_total(&self, w: &LossWeights) -> Result<Var<'t>> {
        self.content
            .scale(w.content)
            .add(self.style.scale(w.style))?
            .add(self.structure.scale(w.structure))?
            .add(self.color_alignment.scale(w.color_alignment))
    }

    pub fn breakdown(&self, w: &LossWeights) -> LossBreakdown {
        LossBreakdown::from_components(
            self.content.item(),
            self.style.item(),
            self.structure.item(),
            self.color_alignment.item(),
            w,
        )
    }
}

/// The four loss terms bound to a perceptual extractor and operator settings.
pub struct Objective<'a> {
    pub extractor: &'a dyn PerceptualExtractor,
    pub settings: LossSettings,
}

impl<'a> Objective<'a> {
    pub fn new(extractor: &'a dyn PerceptualExtractor, settings: LossSettings) -> Self {
        Self {
            extractor,
            settings,
        }
    }

    pub fn content_targets(&self, content: &Image) -> Result<ContentTargets> {
        let tape = Tape::new();
        let x = content.to_var(&tape);
        let value = |v: Var<'_>| v.value();
        Ok(ContentTargets {
            shape: x.shape(),
            features: self
                .extractor
                .features(x, &CONTENT_LAYERS)?
                .into_iter()
                .map(value)
                .collect(),
            sobel: sobel_var(x)?.value(),
            laplacian: laplacian_var(x)?.value(),
            canny: soft_canny_var(x, &self.settings.canny)?.value(),
        })
    }

    pub fn style_targets(&self, style: &Image) -> Result<StyleTargets> {
        let tape = Tape::new();
        let x = style.to_var(&tape);
        let grams = self
            .extractor
            .features(x, &STYLE_LAYERS)?
            .into_iter()
            .map(|f| {
                let (g, n) = gram_var(f)?;
                Ok(g.scale(1.0 / n).value())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StyleTargets {
            grams,
            histogram: color_histogram_var(x, &self.settings.histogram)?.value(),
        })
    }

    pub fn content_term<'t>(&self, stylized: Var<'t>, t: &ContentTargets) -> Result<Var<'t>> {
        same_size(&stylized.shape(), &t.shape, "content loss")?;
        let tape = stylized.tape();
        let feats = self.extractor.features(stylized, &CONTENT_LAYERS)?;
        let mut acc = tape.constant(Tensor::scalar(0.0));
        for (f, target) in feats.into_iter().zip(&t.features) {
            acc = acc.add(smooth_l1_var(f, tape.constant_rc(target.clone()))?)?;
        }
        Ok(acc)
    }

    /// `Σ_ℓ ‖G_ℓ/N_ℓ − Gs_ℓ/Ns_ℓ‖²_F` over all five taps.
    pub fn style_term<'t>(&self, stylized: Var<'t>, t: &StyleTargets) -> Result<Var<'t>> {
        let tape = stylized.tape();
        let feats = self.extractor.features(stylized, &STYLE_LAYERS)?;
        let mut acc = tape.constant(Tensor::scalar(0.0));
        for (f, target) in feats.into_iter().zip(&t.grams) {
            let (g, n) = gram_var(f)?;
            let diff = g.scale(1.0 / n).sub(tape.constant_rc(target.clone()))?;
            acc = acc.add(diff.square().sum())?;
        }
        Ok(acc)
    }

    pub fn structure_term<'t>(&self, stylized: Var<'t>, t: &ContentTargets) -> Result<Var<'t>> {
        same_size(&stylized.shape(), &t.shape, "structure loss")?;
        let tape = stylized.tape();
        let s = smooth_l1_var(sobel_var(stylized)?, tape.constant_rc(t.sobel.clone()))?;
        let l = smooth_l1_var(laplacian_var(stylized)?, tape.constant_rc(t.laplacian.clone()))?;
        let c = smooth_l1_var(
            soft_canny_var(stylized, &self.settings.canny)?,
            tape.constant_rc(t.canny.clone()),
        )?;
        s.add(l)?.add(c)
    }

    pub fn color_alignment_term<'t>(&self, stylized: Var<'t>, t: &StyleTargets) -> Result<Var<'t>> {
        let h = color_histogram_var(stylized, &self.settings.histogram)?;
        hellinger_var(h, stylized.tape().constant_rc(t.histogram.clone()))
    }

    pub fn terms<'t>(
        &self,
        stylized: Var<'t>,
        content: &ContentTargets,
        style: &StyleTargets,
    ) -> Result<LossTerms<'t>> {
        Ok(LossTerms {
            content: self.content_term(stylized, content)?,
            style: self.style_term(stylized, style)?,
            structure: self.structure_term(stylized, content)?,
            color_alignment: self.color_alignment_term(stylized, style)?,
        })
    }
}

fn single_term(
    stylized: &Image,
    f: impl for<'t> FnOnce(Var<'t>) -> Result<Var<'t>>,
) -> Result<f64> {
    let tape = Tape::new();
    Ok(f(stylized.to_var(&tape))?.item())
}

pub fn content_loss(stylized: &Image, content: &Image, ex: &dyn PerceptualExtractor) -> Result<f64> {
    let obj = Objective::new(ex, LossSettings::default());
    let t = obj.content_targets(content)?;
    single_term(stylized, |x| obj.content_term(x, &t))
}

pub fn style_loss(stylized: &Image, style: &Image, ex: &dyn PerceptualExtractor) -> Result<f64> {
    let obj = Objective::new(ex, LossSettings::default());
    let t = obj.style_targets(style)?;
    single_term(stylized, |x| obj.style_term(x, &t))
}

pub fn structure_loss(stylized: &Image, content: &Image, canny: &CannyParams) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = (stylized.to_var(&tape), content.to_var(&tape));
    same_size(&a.shape(), &b.shape(), "structure loss")?;
    let s = smooth_l1_var(sobel_var(a)?, sobel_var(b)?)?;
    let l = smooth_l1_var(laplacian_var(a)?, laplacian_var(b)?)?;
    let c = smooth_l1_var(soft_canny_var(a, canny)?, soft_canny_var(b, canny)?)?;
    Ok(s.add(l)?.add(c)?.item())
}

/// Hellinger distance between the two color histograms. Shared with the
/// evaluation metric.
pub fn color_alignment_loss(stylized: &Image, style: &Image, params: &HistogramParams) -> Result<f64> {
    let tape = Tape::new();
    let a = color_histogram_var(stylized.to_var(&tape), params)?;
    let b = color_histogram_var(style.to_var(&tape), params)?;
    Ok(hellinger_var(a, b)?.item())
}

pub fn total_loss(
    stylized: &Image,
    content: &Image,
    style: &Image,
    weights: &LossWeights,
    ex: &dyn PerceptualExtractor,
    settings: &LossSettings,
) -> Result<LossBreakdown> {
    let obj = Objective::new(ex, *settings);
    let ct = obj.content_targets(content)?;
    let st = obj.style_targets(style)?;
    let tape = Tape::new();
    Ok(obj.terms(stylized.to_var(&tape), &ct, &st)?.breakdown(weights))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};
    use crate::perceptual::ToyExtractor;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random_range(0.25..0.75)).collect()).unwrap()
    }

    fn scene_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| {
            let edge = if x > w / 2 { 0.3 } else { 0.0 };
            0.1 + edge + 0.01 * y as f64 + 0.05 * c as f64
        })
    }

    #[test]
    fn smooth_l1_worked_values() {
        let z = Tensor::zeros(&[2, 3]);
        for (x, want) in [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-2.0, 1.5)] {
            let got = smooth_l1(&Tensor::full(&[2, 3], x), &z).unwrap();
            assert!((got - want).abs() < 1e-15, "x={x}: {got}");
        }
        assert!(matches!(
            smooth_l1(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn identity_cases_are_zero() {
        let ex = ToyExtractor::new(1);
        let img = random_image(16, 16, 2);
        assert_eq!(content_loss(&img, &img, &ex).unwrap(), 0.0);
        assert_eq!(style_loss(&img, &img, &ex).unwrap(), 0.0);
        assert_eq!(structure_loss(&img, &img, &CannyParams::default()).unwrap(), 0.0);
        assert_eq!(color_alignment_loss(&img, &img, &HistogramParams::default()).unwrap(), 0.0);
        let all = total_loss(&img, &img, &img, &LossWeights::default(), &ex, &LossSettings::default()).unwrap();
        assert_eq!(all.total, 0.0);
    }

    #[test]
    fn content_loss_is_symmetric() {
        let ex = ToyExtractor::new(3);
        let a = random_image(16, 16, 4);
        let b = random_image(16, 16, 5);
        let ab = content_loss(&a, &b, &ex).unwrap();
        assert!(ab > 0.0);
        assert!((ab - content_loss(&b, &a, &ex).unwrap()).abs() < 1e-12 * ab.max(1.0));
        assert!(content_loss(&a, &random_image(8, 16, 0), &ex).is_err());
    }

    #[test]
    fn style_loss_ignores_pixel_order_for_pointwise_features() {
        let ex = ToyExtractor::pointwise(6);
        let style = random_image(12, 12, 7);
        let mut perm: Vec<usize> = (0..144).collect();
        perm.reverse();
        perm.swap(3, 77);
        let shuffled = style.permute_pixels(&perm).unwrap();
        assert!(style_loss(&shuffled, &style, &ex).unwrap() < 1e-20);
        // Sizes may differ: the Gram is normalized.
        assert!(style_loss(&random_image(16, 16, 8), &style, &ex).unwrap() > 0.0);
    }

    #[test]
    fn constant_offset_only_moves_canny() {
        let c = scene_image(16, 16);
        let shifted = Image::from_fn(16, 16, |y, x, ch| c.get(y, x, ch) + 0.1);
        let p = CannyParams::default();
        let tape = Tape::new();
        let (a, b) = (shifted.to_var(&tape), c.to_var(&tape));
        let sob = smooth_l1_var(sobel_var(a).unwrap(), sobel_var(b).unwrap()).unwrap().item();
        let lap = smooth_l1_var(laplacian_var(a).unwrap(), laplacian_var(b).unwrap()).unwrap().item();
        assert!(sob < 1e-20 && lap < 1e-20, "{sob} {lap}");
        let can = smooth_l1_var(soft_canny_var(a, &p).unwrap(), soft_canny_var(b, &p).unwrap()).unwrap().item();
        let total = structure_loss(&shifted, &c, &p).unwrap();
        assert!((total - (sob + lap + can)).abs() < 1e-15);
    }

    #[test]
    fn red_versus_blue_is_near_one() {
        let red = Image::constant(8, 8, [1.0, 0.0, 0.0]);
        let blue = Image::constant(8, 8, [0.0, 0.0, 1.0]);
        let d = color_alignment_loss(&red, &blue, &HistogramParams::default()).unwrap();
        // Saturated chroma lands far outside the grid; only kernel tails overlap.
        assert!(d > 0.9, "{d}");
        let shuffled = red.permute_pixels(&(0..64).rev().collect::<Vec<_>>()).unwrap();
        assert_eq!(color_alignment_loss(&shuffled, &red, &HistogramParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn unit_components_with_default_weights() {
        let b = LossBreakdown::from_components(1.0, 1.0, 1.0, 1.0, &LossWeights::default());
        assert_eq!(b.total, 100_031_000.0);
        let z = LossBreakdown::from_components(3.0, 2.0, 5.0, 0.5, &LossWeights::zero());
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let ex = ToyExtractor::new(9);
        let b = total_loss(
            &random_image(16, 16, 1),
            &random_image(16, 16, 2),
            &random_image(16, 16, 3),
            &LossWeights::zero(),
            &ex,
            &LossSettings::default(),
        )
        .unwrap();
        assert_eq!(b.total, 0.0);
        assert!(b.content > 0.0 && b.style > 0.0 && b.structure > 0.0 && b.color_alignment > 0.0);
    }

    #[test]
    fn reported_total_matches_tape_total() {
        let ex = ToyExtractor::new(10);
        let obj = Objective::new(&ex, LossSettings::default());
        let ct = obj.content_targets(&random_image(16, 16, 11)).unwrap();
        let st = obj.style_targets(&random_image(16, 16, 12)).unwrap();
        let tape = Tape::new();
        let terms = obj.terms(random_image(16, 16, 13).to_var(&tape), &ct, &st).unwrap();
        let w = LossWeights::default();
        let b = terms.breakdown(&w);
        assert_eq!(terms.weighted_total(&w).unwrap().item(), b.total);
        assert_eq!(b.total, w.combine(b.content, b.style, b.structure, b.color_alignment));
    }

    #[test]
    fn weights_are_validated() {
        let mut w = LossWeights::default();
        assert!(w.validate().is_ok());
        w.style = -1.0;
        assert!(matches!(w.validate(), Err(Error::Config { .. })));
    }

    fn grad_check(term: &dyn for<'t> Fn(&Objective, Var<'t>) -> Var<'t>, obj: &Objective, seed: u64) -> f64 {
        let x = random_image(16, 16, seed).to_tensor();
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let grads = tape.backward(term(obj, v));
        let analytic = grads.get_or_zero(v);
        let numeric = numeric_gradient(
            |t| {
                let tape = Tape::new();
                term(obj, tape.constant(t.clone())).item()
            },
            &x,
            1e-4,
        );
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let ex = ToyExtractor::new(14);
        let obj = Objective::new(&ex, LossSettings::default());
        let ct = obj.content_targets(&random_image(16, 16, 15)).unwrap();
        let st = obj.style_targets(&random_image(16, 16, 16)).unwrap();
        let checks: [(&str, &dyn for<'t> Fn(&Objective, Var<'t>) -> Var<'t>); 4] = [
            ("content", &|o, x| o.content_term(x, &ct).unwrap()),
            ("style", &|o, x| o.style_term(x, &st).unwrap()),
            ("structure", &|o, x| o.structure_term(x, &ct).unwrap()),
            ("color", &|o, x| o.color_alignment_term(x, &st).unwrap()),
        ];
        for (name, f) in checks {
            let err = grad_check(f, &obj, 17);
            assert!(err < 1e-3, "{name}: {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn losses_are_nonnegative_and_linear_in_weights(seed in 0u64..1000, k in 0.1f64..10.0) {
            let ex = ToyExtractor::new(seed);
            let (a, b, c) = (random_image(8, 8, seed), random_image(8, 8, seed + 1), random_image(8, 8, seed + 2));
            let w = LossWeights::default();
            let s = LossSettings::default();
            let base = total_loss(&a, &b, &c, &w, &ex, &s).unwrap();
            prop_assert!(base.content >= 0.0 && base.style >= 0.0 && base.structure >= 0.0);
            prop_assert!((0.0..=1.0).contains(&base.color_alignment));
            let scaled = LossWeights { content: k * w.content, style: k * w.style, structure: k * w.structure, color_alignment: k * w.color_alignment };
            let more = total_loss(&a, &b, &c, &scaled, &ex, &s).unwrap();
            prop_assert!((more.total - k * base.total).abs() <= 1e-9 * more.total.abs());
        }
    }
}
