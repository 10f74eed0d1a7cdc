//! Evaluation metrics: color histogram distance, token self-similarity
//! structure distance and forward-flow agreement between neighbouring views.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_image, resize, HistogramParams, Image};
use crate::losses::color_alignment_loss;
use crate::perceptual::{TokenEncoder, TokenSequence};
use crate::tensor::Tensor;

/// Hellinger distance between color histograms; the same computation as the
/// color alignment loss.
pub fn chd(stylized: &Image, style: &Image, params: &HistogramParams) -> Result<f64> {
    color_alignment_loss(stylized, style, params)
}

/// Cosine similarity between every pair of local tokens (the global token is
/// skipped). Zero-norm tokens have similarity 0 to every other token.
pub fn self_similarity(tokens: &TokenSequence) -> Result<Tensor> {
    let locals: Vec<&[f64]> = tokens.locals().collect();
    let n = locals.len();
    if n == 0 {
        return Err(Error::arg("self-similarity needs at least one local token"));
    }
    let norms: Vec<f64> = locals
        .iter()
        .map(|t| t.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let s = if i == j {
                1.0
            } else if norms[i] < 1e-12 || norms[j] < 1e-12 {
                0.0
            } else {
                let dot: f64 = locals[i].iter().zip(locals[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            out.data_mut()[i * n + j] = s;
            out.data_mut()[j * n + i] = s;
        }
    }
    Ok(out)
}

/// `100 ×` mean squared difference of the two self-similarity matrices.
pub fn dsd(stylized: &Image, content: &Image, encoder: &dyn TokenEncoder) -> Result<f64> {
    let a = self_similarity(&encoder.encode(stylized)?)?;
    let b = self_similarity(&encoder.encode(content)?)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(100.0 * mse)
}

/// Dense forward displacement field, `(dx, dy)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::shape(format!(
                "flow field {height}x{width} needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("flow field contains non-finite values"));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub trait FlowEstimator {
    fn estimate(&self, first: &Image, second: &Image) -> Result<FlowField>;
}

/// Exhaustive integer block matching.
///
/// Each pixel's `patch × patch` window in the first image is compared with
/// every displacement within `radius` in the second by mean absolute
/// difference over the pixels valid in both. Displacements leaving fewer
/// than `patch` valid pixels are skipped, so border pixels whose match lies
/// partly outside the frame still see it. Ties go to the smaller displacement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMatching {
    pub patch: usize,
    pub radius: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self { patch: 8, radius: 8 }
    }
}

/// Summed-area table with a zero border row and column.
struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y, x);
                data[(y + 1) * (w + 1) + x + 1] = data[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, data }
    }

    /// Sum over rows `y0..y1`, columns `x0..x1`.
    fn rect(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        self.data[y1 * self.w + x1] - self.data[y0 * self.w + x1] - self.data[y1 * self.w + x0]
            + self.data[y0 * self.w + x0]
    }
}

impl FlowEstimator for BlockMatching {
    fn estimate(&self, first: &Image, second: &Image) -> Result<FlowField> {
        let (h, w) = (first.height(), first.width());
        if (second.height(), second.width()) != (h, w) {
            return Err(Error::arg(format!(
                "flow images differ in size: {h}x{w} vs {}x{}",
                second.height(),
                second.width()
            )));
        }
        if self.patch == 0 {
            return Err(Error::arg("block matching patch must be >= 1"));
        }
        let r = self.radius as isize;
        let before = (self.patch / 2) as isize;
        let after = self.patch as isize - before;
        let min_overlap = self.patch as f64;

        let mut best = vec![(f64::INFINITY, usize::MAX, 0isize, 0isize); h * w];
        let mut displacements: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
        displacements.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
        for (rank, &(dx, dy)) in displacements.iter().enumerate() {
            let valid = |y: usize, x: usize| {
                let (ty, tx) = (y as isize + dy, x as isize + dx);
                ty >= 0 && tx >= 0 && (ty as usize) < h && (tx as usize) < w
            };
            let cost = Integral::new(h, w, |y, x| {
                if !valid(y, x) {
                    return 0.0;
                }
                let (ty, tx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                (0..3).map(|c| (first.get(y, x, c) - second.get(ty, tx, c)).abs()).sum()
            });
            let count = Integral::new(h, w, |y, x| if valid(y, x) { 1.0 } else { 0.0 });
            for y in 0..h {
                let y0 = (y as isize - before).max(0) as usize;
                let y1 = ((y as isize + after) as usize).min(h);
                for x in 0..w {
                    let x0 = (x as isize - before).max(0) as usize;
                    let x1 = ((x as isize + after) as usize).min(w);
                    let n = count.rect(y0, x0, y1, x1);
                    if n < min_overlap {
                        continue;
                    }
                    let score = cost.rect(y0, x0, y1, x1) / n;
                    let slot = &mut best[y * w + x];
                    if score < slot.0 - 1e-12 || (score <= slot.0 + 1e-12 && rank < slot.1) {
                        *slot = (score, rank, dx, dy);
                    }
                }
            }
        }
        let data = best
            .iter()
            .flat_map(|&(_, _, dx, dy)| [dx as f64, dy as f64])
            .collect();
        FlowField::new(h, w, data)
    }
}

/// Mean absolute difference between the flows of the content pair and the
/// stylized pair, over every pixel and both components.
pub fn flow_consistency(
    estimator: &dyn FlowEstimator,
    content: (&Image, &Image),
    stylized: (&Image, &Image),
) -> Result<f64> {
    let size = |i: &Image| (i.height(), i.width());
    let s = size(content.0);
    if [content.1, stylized.0, stylized.1].iter().any(|i| size(i) != s) {
        return Err(Error::arg("flow consistency needs four images of one size"));
    }
    let a = estimator.estimate(content.0, content.1)?;
    let b = estimator.estimate(stylized.0, stylized.1)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub chd: f64,
    pub dsd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub first: String,
    pub second: String,
    pub flow_l1: f64,
}

/// Arithmetic means of the per-item lists; `None` for an empty list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub chd: f64,
    pub dsd: f64,
    pub flow_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scene: String,
    pub style: String,
    pub images: Vec<ImageMetrics>,
    pub pairs: Vec<PairMetrics>,
    pub aggregate: Aggregates,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> Option<f64> {
    let n = values.len();
    (n > 0).then(|| values.sum::<f64>() / n as f64)
}

impl MetricsReport {
    pub fn new(scene: &str, style: &str, images: Vec<ImageMetrics>, pairs: Vec<PairMetrics>) -> Self {
        let aggregate = Aggregates {
            chd: mean(images.iter().map(|i| i.chd)).unwrap_or(0.0),
            dsd: mean(images.iter().map(|i| i.dsd)).unwrap_or(0.0),
            flow_l1: mean(pairs.iter().map(|p| p.flow_l1)),
        };
        Self {
            scene: scene.into(),
            style: style.into(),
            images,
            pairs,
            aggregate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per image and per pair, then the aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,chd,dsd,flow_l1\n");
        for i in &self.images {
            let _ = writeln!(s, "image,{},{},{},", i.name, i.chd, i.dsd);
        }
        for p in &self.pairs {
            let _ = writeln!(s, "pair,{}|{},,,{}", p.first, p.second, p.flow_l1);
        }
        let flow = self.aggregate.flow_l1.map(|f| f.to_string()).unwrap_or_default();
        let _ = writeln!(s, "mean,,{},{},{}", self.aggregate.chd, self.aggregate.dsd, flow);
        s
    }

    /// Writes `metrics.json` and `metrics.csv`; returns their paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join("metrics.json");
        let csv = dir.join("metrics.csv");
        std::fs::write(&json, self.to_json())?;
        std::fs::write(&csv, self.to_csv())?;
        Ok(vec![json, csv])
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// One view of a scene: its stylized rendering and the content it came from.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub name: String,
    pub stylized: Image,
    pub content: Image,
}

/// Per-image CHD and DSD plus flow agreement over consecutive views in the
/// given order.
pub fn evaluate_images(
    scene: &str,
    style_name: &str,
    views: &[ViewPair],
    style: &Image,
    encoder: &dyn TokenEncoder,
    estimator: &dyn FlowEstimator,
    params: &HistogramParams,
) -> Result<MetricsReport> {
    if views.is_empty() {
        return Err(Error::arg("no views to evaluate"));
    }
    let mut images = Vec::with_capacity(views.len());
    for v in views {
        images.push(ImageMetrics {
            name: v.name.clone(),
            chd: chd(&v.stylized, style, params)?,
            dsd: dsd(&v.stylized, &v.content, encoder)?,
        });
    }
    let mut pairs = Vec::new();
    for w in views.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.stylized.height(), a.stylized.width()) != (b.stylized.height(), b.stylized.width()) {
            return Err(Error::arg(format!("{} and {} differ in size", a.name, b.name)));
        }
        pairs.push(PairMetrics {
            first: a.name.clone(),
            second: b.name.clone(),
            flow_l1: flow_consistency(estimator, (&a.content, &b.content), (&a.stylized, &b.stylized))?,
        });
    }
    Ok(MetricsReport::new(scene, style_name, images, pairs))
}

/// [`evaluate_images`] over two directories. Files pair up by stem, so
/// `a.png` matches `a.jpg`; order is the sorted stylized file names.
/// Content images are resized to the stylized size.
pub fn evaluate_scene(
    stylized_dir: &Path,
    content_dir: &Path,
    style: &Image,
    style_name: &str,
    encoder: &dyn TokenEncoder,
    estimator: &dyn FlowEstimator,
    params: &HistogramParams,
) -> Result<MetricsReport> {
    let stylized = list_images(stylized_dir)?;
    let content = list_images(content_dir)?;
    let s_stems: Vec<String> = stylized.iter().map(|p| file_stem(p)).collect();
    let c_stems: Vec<String> = content.iter().map(|p| file_stem(p)).collect();
    let mut unmatched: Vec<String> = stylized
        .iter()
        .zip(&s_stems)
        .filter(|(_, n)| !c_stems.contains(n))
        .map(|(p, _)| format!("{} (no content image)", file_name(p)))
        .collect();
    unmatched.extend(
        content
            .iter()
            .zip(&c_stems)
            .filter(|(_, n)| !s_stems.contains(n))
            .map(|(p, _)| format!("{} (no stylized image)", file_name(p))),
    );
    for (stems, files) in [(&s_stems, &stylized), (&c_stems, &content)] {
        for (i, n) in stems.iter().enumerate() {
            if stems[..i].contains(n) {
                unmatched.push(format!("{} (duplicate stem `{n}`)", file_name(&files[i])));
            }
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Unmatched(unmatched));
    }
    if stylized.is_empty() {
        return Err(Error::arg(format!("no images in {}", stylized_dir.display())));
    }

    let mut views = Vec::with_capacity(stylized.len());
    for (sp, stem) in stylized.iter().zip(&s_stems) {
        let cp = &content[c_stems.iter().position(|c| c == stem).expect("matched above")];
        let s = load_image(sp)?;
        let c = resize(&load_image(cp)?, s.height(), s.width())?;
        views.push(ViewPair {
            name: file_name(sp),
            stylized: s,
            content: c,
        });
    }
    let scene = content_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    evaluate_images(&scene, style_name, &views, style, encoder, estimator, params)
}
