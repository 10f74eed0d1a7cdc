//! Images, fixed-kernel edge operators and the differentiable color histogram.
//!
//! The `*_var` functions operate on tape variables holding `[3, H, W]`
//! images and are what the losses use; the plain functions wrap them for
//! one-off evaluation.

use std::path::Path;
use std::rc::Rc;

use image::{DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::autodiff::{bilinear_taps, PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An RGB raster with values in `[0, 1]`, stored channel-major (`[3, H, W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg("image dimensions must be positive"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from `f(y, x, channel)`, clamping into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    let v = f(y, x, c);
                    data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Channel-major pixel values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[3, self.height, self.width], self.data.clone()).expect("image shape")
    }

    /// Converts a `[3, H, W]` tensor, clamping values into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [3, h, w] = *t.shape() else {
            return Err(Error::shape(format!(
                "expected [3, H, W] tensor, got {:?}",
                t.shape()
            )));
        };
        if !t.is_finite() {
            return Err(Error::arg("image tensor has non-finite values"));
        }
        Self::new(h, w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn to_var<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(self.to_tensor())
    }

    /// Applies a pixel permutation: output pixel `i` takes input pixel `perm[i]`.
    pub fn permute_pixels(&self, perm: &[usize]) -> Result<Self> {
        let n = self.height * self.width;
        if perm.len() != n {
            return Err(Error::arg("permutation length must equal pixel count"));
        }
        let mut data = vec![0.0; 3 * n];
        for c in 0..3 {
            for (i, &p) in perm.iter().enumerate() {
                data[c * n + i] = self.data[c * n + p];
            }
        }
        Self::new(self.height, self.width, data)
    }

    /// Quantizes to 8 bits and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let px = |c| (self.get(y as usize, x as usize, c) * 255.0).round() as u8;
                Rgb([px(0), px(1), px(2)])
            });
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Decodes a PNG or JPEG raster, dropping any alpha channel.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let decoded = image::ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|e| format_err(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    let mut put = |x: usize, y: usize, rgb: [f64; 3]| {
        for (c, v) in rgb.into_iter().enumerate() {
            data[(c * h + y) * w + x] = v;
        }
    };
    match decoded {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            for (x, y, p) in decoded.to_rgb16().enumerate_pixels() {
                put(x as usize, y as usize, p.0.map(|v| f64::from(v) / 65535.0));
            }
        }
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            for (x, y, p) in decoded.to_rgb32f().enumerate_pixels() {
                put(x as usize, y as usize, p.0.map(|v| f64::from(v).clamp(0.0, 1.0)));
            }
        }
        _ => {
            for (x, y, p) in decoded.to_rgb8().enumerate_pixels() {
                put(x as usize, y as usize, p.0.map(|v| f64::from(v) / 255.0));
            }
        }
    }
    Image::new(h, w, data).map_err(|e| format_err(e.to_string()))
}

/// Bilinear resize with half-pixel centres and no antialiasing.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::arg(format!(
            "resize target {height}x{width} must be positive"
        )));
    }
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let taps = bilinear_taps(3, img.height, img.width, height, width);
    let data = taps
        .iter()
        .map(|t| {
            t.iter()
                .map(|&(j, w)| w * img.data[j])
                .sum::<f64>()
                .clamp(0.0, 1.0)
        })
        .collect();
    Image::new(height, width, data)
}

/// Output of an edge operator: `[C, H, W]`, same spatial size as its source.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl EdgeMap {
    fn from_var(v: Var<'_>) -> Self {
        let t = v.value();
        let [channels, height, width] = *t.shape() else {
            unreachable!("edge operators produce [C, H, W]")
        };
        Self {
            channels,
            height,
            width,
            data: t.data().to_vec(),
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

fn spatial_dims(x: &Var<'_>, op: &str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [c, h, w] if h >= 3 && w >= 3 => Ok((c, h, w)),
        [_, h, w] => Err(Error::arg(format!(
            "{op}: {h}x{w} input is smaller than the 3x3 kernel"
        ))),
        ref s => Err(Error::shape(format!("{op}: expected [C, H, W], got {s:?}"))),
    }
}

/// The nine unit shifts of a replicate-padded `[C, H, W]` input.
///
/// Kernels are evaluated as sums of neighbour differences so that constant
/// regions cancel exactly in floating point.
struct Neighbourhood<'t> {
    padded: Var<'t>,
    c: usize,
    h: usize,
    w: usize,
}

impl<'t> Neighbourhood<'t> {
    fn new(x: Var<'t>, op: &str) -> Result<Self> {
        let (c, h, w) = spatial_dims(&x, op)?;
        Ok(Self {
            padded: x.pad(1, PadMode::Replicate)?,
            c,
            h,
            w,
        })
    }

    /// Input shifted so output `(y, x)` reads source `(y + dy, x + dx)`.
    fn shifted(&self, dy: isize, dx: isize) -> Result<Var<'t>> {
        let (c, h, w) = (self.c, self.h, self.w);
        let pw = w + 2;
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let py = (y as isize + 1 + dy) as usize;
                    let px = (x as isize + 1 + dx) as usize;
                    index.push(Some((ch * (h + 2) + py) * pw + px));
                }
            }
        }
        self.padded.gather(&[c, h, w], index)
    }

    /// `[1, 2, 1]`-weighted sum of `shifted(a) − shifted(b)` along the
    /// perpendicular axis: the Sobel derivative.
    fn sobel_axis(&self, horizontal: bool) -> Result<Var<'t>> {
        let diff = |t: isize| -> Result<Var<'t>> {
            if horizontal {
                self.shifted(t, 1)?.sub(self.shifted(t, -1)?)
            } else {
                self.shifted(1, t)?.sub(self.shifted(-1, t)?)
            }
        };
        diff(-1)?.add(diff(0)?.scale(2.0))?.add(diff(1)?)
    }
}

/// Sobel responses per channel, correlation with `[[-1,0,1],[-2,0,2],[-1,0,1]]`
/// and its transpose: `[2C, H, W]` ordered `(gx, gy)` per channel.
pub fn sobel_var<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let hood = Neighbourhood::new(x, "sobel")?;
    let gx = hood.sobel_axis(true)?;
    let gy = hood.sobel_axis(false)?;
    let mut parts = Vec::with_capacity(2 * hood.c);
    for ch in 0..hood.c {
        parts.push(gx.narrow(ch, 1)?);
        parts.push(gy.narrow(ch, 1)?);
    }
    Var::concat(&parts)
}

/// 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` per channel: `[C, H, W]`.
pub fn laplacian_var<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let hood = Neighbourhood::new(x, "laplacian")?;
    let centre = hood.shifted(0, 0)?;
    let mut acc: Option<Var<'t>> = None;
    for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
        let d = hood.shifted(dy, dx)?.sub(centre)?;
        acc = Some(match acc {
            Some(a) => a.add(d)?,
            None => d,
        });
    }
    Ok(acc.expect("four neighbours"))
}

pub fn sobel(img: &Image) -> Result<EdgeMap> {
    let tape = Tape::new();
    Ok(EdgeMap::from_var(sobel_var(img.to_var(&tape))?))
}

pub fn laplacian(img: &Image) -> Result<EdgeMap> {
    let tape = Tape::new();
    Ok(EdgeMap::from_var(laplacian_var(img.to_var(&tape))?))
}

/// Parameters of the smooth Canny relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CannyParams {
    pub sigma: f64,
    pub low: f64,
    pub high: f64,
    pub sharpness: f64,
    pub eps: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            low: 0.1,
            high: 0.2,
            sharpness: 50.0,
            eps: 1e-6,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::arg(format!("canny sigma {} must be > 0", self.sigma)));
        }
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::arg(format!(
                "canny thresholds need 0 <= low < high <= 1, got low={} high={}",
                self.low, self.high
            )));
        }
        if !(self.sharpness > 0.0) {
            return Err(Error::arg("canny sharpness must be > 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg("canny eps must be > 0"));
        }
        Ok(())
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Smooth Canny: luma → Gaussian blur → Sobel magnitude → logistic double
/// threshold, the high gate seeing the 3×3 max-pooled magnitude. `[1, H, W]`.
pub fn soft_canny_var<'t>(x: Var<'t>, params: &CannyParams) -> Result<Var<'t>> {
    params.validate()?;
    let (c, _, _) = spatial_dims(&x, "soft_canny")?;
    if c != 3 {
        return Err(Error::shape("soft_canny expects an RGB input"));
    }
    let tape = x.tape();
    let luma = tape.constant(Tensor::new(&[1, 3, 1, 1], LUMA.to_vec())?);
    let gray = x.conv2d(luma, 1)?;

    let kernel = gaussian_kernel(params.sigma);
    let k = kernel.len();
    let radius = k / 2;
    let vertical = tape.constant(Tensor::new(&[1, 1, k, 1], kernel.clone())?);
    let horizontal = tape.constant(Tensor::new(&[1, 1, 1, k], kernel)?);
    let blurred = gray
        .pad(radius, PadMode::Replicate)?
        .conv2d(vertical, 1)?
        .conv2d(horizontal, 1)?;

    let grads = sobel_var(blurred)?;
    let gx = grads.narrow(0, 1)?;
    let gy = grads.narrow(1, 1)?;
    let magnitude = gx.square().add(gy.square())?.add_scalar(params.eps).sqrt();

    let s = params.sharpness;
    let low_gate = magnitude.add_scalar(-params.low).scale(s).sigmoid();
    let high_gate = magnitude
        .max_pool3_same()?
        .add_scalar(-params.high)
        .scale(s)
        .sigmoid();
    low_gate.mul(high_gate)
}

pub fn soft_canny(img: &Image, params: &CannyParams) -> Result<EdgeMap> {
    let tape = Tape::new();
    Ok(EdgeMap::from_var(soft_canny_var(img.to_var(&tape), params)?))
}

/// Parameters of the log-chroma histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramParams {
    /// Bins per log-chroma axis.
    pub bins: usize,
    /// Falloff of the inverse-quadratic kernel.
    pub tau: f64,
    /// Half-width of the `[-range, range]²` grid.
    pub range: f64,
    /// Added inside the logarithms and the intensity norm.
    pub eps: f64,
}

impl Default for HistogramParams {
    fn default() -> Self {
        Self {
            bins: 64,
            tau: 0.02,
            range: 3.0,
            eps: 1e-6,
        }
    }
}

impl HistogramParams {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::arg(format!("histogram needs >= 2 bins, got {}", self.bins)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::arg(format!("histogram tau {} must be > 0", self.tau)));
        }
        if !(self.range > 0.0 && self.eps > 0.0) {
            return Err(Error::arg("histogram range and eps must be > 0"));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<f64> {
        let step = 2.0 * self.range / (self.bins - 1) as f64;
        (0..self.bins).map(|i| -self.range + step * i as f64).collect()
    }
}

/// Normalized `h × h × 3` log-chroma histogram, plane-major (`[3, h, h]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram {
    bins: usize,
    data: Vec<f64>,
}

impl ColorHistogram {
    /// Normalizes arbitrary non-negative mass into a histogram.
    pub fn from_mass(bins: usize, mass: Vec<f64>) -> Result<Self> {
        if bins < 2 || mass.len() != 3 * bins * bins {
            return Err(Error::shape(format!(
                "histogram with {bins} bins needs {} entries",
                3 * bins * bins
            )));
        }
        if mass.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::arg("histogram mass must be finite and non-negative"));
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::arg("histogram has no mass"));
        }
        Ok(Self {
            bins,
            data: mass.into_iter().map(|m| m / total).collect(),
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, plane: usize, i: usize, j: usize) -> f64 {
        self.data[(plane * self.bins + i) * self.bins + j]
    }

    /// `(i, j)` of the largest bin within one plane.
    pub fn argmax(&self, plane: usize) -> (usize, usize) {
        let h = self.bins;
        let slice = &self.data[plane * h * h..(plane + 1) * h * h];
        let (k, _) = slice
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                if v > best.1 {
                    (k, v)
                } else {
                    best
                }
            });
        (k / h, k % h)
    }
}

/// Differentiable normalized histogram of a `[3, H, W]` image: `[3, h, h]`.
///
/// For each channel `c` with companions `(a, b)`, pixels vote at
/// `(log(I_c+ε) − log(I_a+ε), log(I_c+ε) − log(I_b+ε))` with weight
/// `√(R² + G² + B² + ε)`.
pub fn color_histogram_var<'t>(x: Var<'t>, params: &HistogramParams) -> Result<Var<'t>> {
    params.validate()?;
    let shape = x.shape();
    let [3, h, w] = shape[..] else {
        return Err(Error::shape(format!(
            "color histogram expects [3, H, W], got {shape:?}"
        )));
    };
    let n = h * w;
    if n == 0 {
        return Err(Error::arg("color histogram of an empty image"));
    }
    let channel = |c: usize| -> Result<Var<'t>> { x.narrow(c, 1)?.reshape(&[n]) };
    let rgb = [channel(0)?, channel(1)?, channel(2)?];
    let logs: Vec<Var<'t>> = rgb.iter().map(|c| c.add_scalar(params.eps).ln()).collect();
    let intensity = rgb[0]
        .square()
        .add(rgb[1].square())?
        .add(rgb[2].square())?
        .add_scalar(params.eps)
        .sqrt();
    let centers = Rc::new(params.centers());
    let companions = [(1, 2), (0, 2), (0, 1)];
    let mut planes = Vec::with_capacity(3);
    for (c, (a, b)) in companions.into_iter().enumerate() {
        let u = logs[c].sub(logs[a])?;
        let v = logs[c].sub(logs[b])?;
        let plane = Var::kernel_histogram2d(u, v, intensity, centers.clone(), params.tau)?;
        planes.push(plane.reshape(&[1, params.bins, params.bins])?);
    }
    let mass = Var::concat(&planes)?;
    let total = mass.sum();
    mass.mul_scalar(total.recip())
}

pub fn color_histogram(img: &Image, params: &HistogramParams) -> Result<ColorHistogram> {
    let tape = Tape::new();
    let hist = color_histogram_var(img.to_var(&tape), params)?;
    let data = hist.value().data().to_vec();
    Ok(ColorHistogram {
        bins: params.bins,
        data,
    })
}

/// Hellinger distance between two `[3, h, h]` histogram variables.
pub fn hellinger_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(Error::arg(format!(
            "hellinger: histogram shapes differ ({:?} vs {:?})",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.sqrt().sub(b.sqrt())?.square().sum().scale(0.5).sqrt())
}

/// `(1/√2)·‖√h1 − √h2‖₂`, in `[0, 1]` for normalized inputs.
pub fn hellinger(h1: &ColorHistogram, h2: &ColorHistogram) -> Result<f64> {
    if h1.bins != h2.bins {
        return Err(Error::arg(format!(
            "hellinger: bin counts differ ({} vs {})",
            h1.bins, h2.bins
        )));
    }
    let sq: f64 = h1
        .data
        .iter()
        .zip(&h2.data)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((0.5 * sq).sqrt().min(1.0))
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};

    /// Random pixels kept away from 0, where the log-chroma slope blows up.
    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random_range(0.25..0.75)).collect();
        Image::new(h, w, data).unwrap()
    }

    fn write_png(dir: &Path, name: &str, w: u32, h: u32, px: [u8; 3]) -> std::path::PathBuf {
        let path = dir.join(name);
        ImageBuffer::from_pixel(w, h, Rgb(px)).save(&path).unwrap();
        path
    }

    #[test]
    fn load_scales_eight_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let white = load_image(&write_png(dir.path(), "w.png", 2, 2, [255; 3])).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        let black = load_image(&write_png(dir.path(), "b.png", 2, 2, [0; 3])).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let mid = load_image(&write_png(dir.path(), "m.png", 2, 2, [128; 3])).unwrap();
        assert!((mid.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-12);
        assert!((mid.get(1, 1, 2) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_drops_alpha_and_reads_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        ImageBuffer::from_pixel(3, 2, image::Rgba([255u8, 0, 51, 7]))
            .save(&path)
            .unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.height(), img.width()), (2, 3));
        assert_eq!(img.get(1, 2, 0), 1.0);
        assert!((img.get(0, 0, 2) - 0.2).abs() < 1e-12);

        let path16 = dir.path().join("d.png");
        ImageBuffer::from_pixel(2, 2, Rgb([65535u16, 0, 32768]))
            .save(&path16)
            .unwrap();
        let img = load_image(&path16).unwrap();
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert!((img.get(0, 0, 2) - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_image(&dir.path().join("nope.png")).unwrap_err();
        assert!(matches!(missing, Error::NotFound(_)));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"definitely not a png").unwrap();
        assert!(matches!(load_image(&junk).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn save_then_load_round_trips_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 5, |y, x, c| (y * 5 + x + c) as f64 / 30.0);
        let path = dir.path().join("rt.png");
        img.save_png(&path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(img.to_tensor().max_abs_diff(&back.to_tensor()) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = random_image(5, 7, 1);
        assert_eq!(resize(&img, 5, 7).unwrap(), img);
        let flat = Image::constant(6, 6, [0.3, 0.6, 0.9]);
        let out = resize(&flat, 11, 4).unwrap();
        for c in 0..3 {
            for y in 0..11 {
                for x in 0..4 {
                    assert!((out.get(y, x, c) - flat.get(0, 0, c)).abs() < 1e-12);
                }
            }
        }
        assert!(resize(&img, 0, 3).is_err());
    }

    /// Independent bilinear evaluation at one output coordinate.
    fn bilinear_oracle(img: &Image, c: usize, oy: usize, ox: usize, oh: usize, ow: usize) -> f64 {
        let sample = |o: usize, out: usize, inp: usize| {
            let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(inp - 1);
            (lo, hi, s - lo as f64)
        };
        let (y0, y1, fy) = sample(oy, oh, img.height());
        let (x0, x1, fx) = sample(ox, ow, img.width());
        let top = img.get(y0, x0, c) * (1.0 - fx) + img.get(y0, x1, c) * fx;
        let bot = img.get(y1, x0, c) * (1.0 - fx) + img.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    #[test]
    fn resize_ramp_matches_bilinear_oracle() {
        let ramp = Image::from_fn(4, 4, |_, x, _| x as f64 / 3.0);
        let out = resize(&ramp, 2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let expected = bilinear_oracle(&ramp, 0, y, x, 2, 2);
                assert!((out.get(y, x, 0) - expected).abs() < 1e-12);
            }
        }
        // Half-pixel centres put the 2x2 samples at input x = 0.5 and 2.5.
        assert!((out.get(0, 0, 0) - 0.5 / 3.0).abs() < 1e-12);
        assert!((out.get(0, 1, 1) - 2.5 / 3.0).abs() < 1e-12);

        let img = random_image(7, 9, 3);
        let out = resize(&img, 4, 13).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..13 {
                    let expected = bilinear_oracle(&img, c, y, x, 4, 13);
                    assert!((out.get(y, x, c) - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn sobel_of_ramps() {
        let delta = 0.05;
        let horizontal = Image::from_fn(6, 8, |_, x, _| 0.1 + delta * x as f64);
        let e = sobel(&horizontal).unwrap();
        assert_eq!(e.channels, 6);
        for c in 0..3 {
            for y in 1..5 {
                for x in 1..7 {
                    assert!((e.get(2 * c, y, x) - 8.0 * delta).abs() < 1e-12);
                    assert!(e.get(2 * c + 1, y, x).abs() < 1e-12);
                }
            }
        }
        let vertical = Image::from_fn(8, 6, |y, _, _| 0.1 + delta * y as f64);
        let e = sobel(&vertical).unwrap();
        for y in 1..7 {
            for x in 1..5 {
                assert!((e.get(1, y, x) - 8.0 * delta).abs() < 1e-12);
                assert!(e.get(0, y, x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_operators_vanish_on_constants() {
        let flat = Image::constant(5, 4, [0.2, 0.7, 0.4]);
        assert!(sobel(&flat).unwrap().data.iter().all(|&v| v == 0.0));
        assert!(laplacian(&flat).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_of_ramp_and_impulse() {
        let ramp = Image::from_fn(6, 6, |y, x, _| 0.02 * x as f64 + 0.03 * y as f64);
        let e = laplacian(&ramp).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert!(e.get(0, y, x).abs() < 1e-12);
            }
        }
        let impulse = Image::from_fn(5, 5, |y, x, _| if (y, x) == (2, 2) { 1.0 } else { 0.0 });
        let e = laplacian(&impulse).unwrap();
        assert_eq!(e.get(1, 2, 2), -4.0);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(e.get(1, y, x), 1.0);
        }
        assert_eq!(e.get(1, 1, 1), 0.0);
    }

    #[test]
    fn operators_reject_small_images() {
        let tiny = Image::constant(2, 5, [0.5; 3]);
        assert!(matches!(sobel(&tiny), Err(Error::Argument(_))));
        assert!(matches!(laplacian(&tiny), Err(Error::Argument(_))));
        assert!(soft_canny(&tiny, &CannyParams::default()).is_err());
    }

    #[test]
    fn soft_canny_constant_image_closed_form() {
        let p = CannyParams::default();
        let out = soft_canny(&Image::constant(8, 8, [0.4; 3]), &p).unwrap();
        let m = p.eps.sqrt();
        let s = crate::autodiff::logistic;
        let expected = s(p.sharpness * (m - p.low)) * s(p.sharpness * (m - p.high));
        assert!(expected < 1e-6);
        for v in &out.data {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_canny_step_edge_response() {
        let step = Image::from_fn(16, 16, |_, x, _| if x < 8 { 0.0 } else { 1.0 });
        let out = soft_canny(&step, &CannyParams::default()).unwrap();
        let edge = out.get(0, 8, 7).max(out.get(0, 8, 8));
        let flat = out.get(0, 8, 1);
        assert!(edge > 10.0 * flat, "edge {edge} flat {flat}");
        assert!(out.data.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn soft_canny_rejects_bad_thresholds() {
        let img = Image::constant(8, 8, [0.5; 3]);
        let bad = CannyParams {
            low: 0.3,
            high: 0.2,
            ..CannyParams::default()
        };
        assert!(matches!(soft_canny(&img, &bad), Err(Error::Argument(_))));
    }

    fn gradient_check(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, seed: u64) -> f64 {
        gradient_check_with(f, seed, 1e-4)
    }

    fn gradient_check_with(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, seed: u64, step: f64) -> f64 {
        let img = random_image(8, 8, seed);
        let tape = Tape::new();
        let x = tape.param(img.to_tensor());
        let grads = tape.backward(f(x));
        let numeric = numeric_gradient(
            |t| {
                let tape = Tape::new();
                f(tape.constant(t.clone())).item()
            },
            &img.to_tensor(),
            step,
        );
        relative_error(&grads.get_or_zero(x), &numeric)
    }

    /// Random fixed linear functional of an operator's output.
    fn project<'t>(y: Var<'t>, seed: u64) -> Var<'t> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&y.shape(), 1.0, &mut rng);
        y.mul(y.tape().constant(w)).unwrap().sum()
    }

    #[test]
    fn operators_match_finite_differences() {
        assert!(gradient_check(|x| project(sobel_var(x).unwrap(), 1), 11) < 1e-3);
        assert!(gradient_check(|x| project(laplacian_var(x).unwrap(), 2), 12) < 1e-3);
        let p = CannyParams::default();
        let err = gradient_check(|x| project(soft_canny_var(x, &p).unwrap(), 3), 13);
        assert!(err < 1e-3, "soft canny {err}");
        let hp = HistogramParams::default();
        let err = gradient_check(
            |x| project(color_histogram_var(x, &hp).unwrap(), 4),
            14,
        );
        assert!(err < 1e-3, "histogram {err}");
    }

    #[test]
    fn histogram_gradient_error_shrinks_quadratically() {
        // Sharp kernels make the step-1e-4 difference quotient the dominant
        // error term; the analytic gradient must track the limit.
        let hp = HistogramParams::default();
        let coarse = gradient_check_with(|x| project(color_histogram_var(x, &hp).unwrap(), 4), 14, 1e-4);
        let fine = gradient_check_with(|x| project(color_histogram_var(x, &hp).unwrap(), 4), 14, 1e-5);
        assert!(fine < coarse / 50.0, "coarse {coarse} fine {fine}");
        assert!(fine < 1e-5);
    }

    #[test]
    fn histogram_is_normalized() {
        let hp = HistogramParams::default();
        for seed in 0..5 {
            let h = color_histogram(&random_image(6, 9, seed), &hp).unwrap();
            assert_eq!(h.data().len(), 3 * 64 * 64);
            assert!((h.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(h.data().iter().all(|&v| v >= 0.0));
        }
        let black = color_histogram(&Image::constant(4, 4, [0.0; 3]), &hp).unwrap();
        assert!((black.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gray_image_peaks_at_center() {
        let hp = HistogramParams::default();
        let h = color_histogram(&Image::constant(5, 5, [0.6; 3]), &hp).unwrap();
        for plane in 0..3 {
            let (i, j) = h.argmax(plane);
            // 64 centres straddle zero at indices 31 and 32.
            assert!([31, 32].contains(&i) && [31, 32].contains(&j), "{i},{j}");
        }
    }

    #[test]
    fn histogram_ignores_pixel_order() {
        let hp = HistogramParams::default();
        let img = random_image(6, 6, 21);
        let mut perm: Vec<usize> = (0..36).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
        let shuffled = img.permute_pixels(&perm).unwrap();
        let a = color_histogram(&img, &hp).unwrap();
        let b = color_histogram(&shuffled, &hp).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-15);
    }

    fn one_hot(bins: usize, k: usize) -> ColorHistogram {
        let mut m = vec![0.0; 3 * bins * bins];
        m[k] = 1.0;
        ColorHistogram::from_mass(bins, m).unwrap()
    }

    #[test]
    fn hellinger_worked_values() {
        let a = one_hot(2, 0);
        assert_eq!(hellinger(&a, &a).unwrap(), 0.0);
        assert!((hellinger(&a, &one_hot(2, 5)).unwrap() - 1.0).abs() < 1e-12);
        let mut split = vec![0.0; 12];
        split[0] = 0.5;
        split[3] = 0.5;
        let split = ColorHistogram::from_mass(2, split).unwrap();
        let expected = (((0.5f64).sqrt() - 1.0).powi(2) + 0.5).sqrt() / 2f64.sqrt();
        let got = hellinger(&a, &split).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.5412).abs() < 1e-3);
        assert!(hellinger(&a, &one_hot(3, 0)).is_err());
    }

    #[test]
    fn hellinger_var_matches_value_version() {
        let hp = HistogramParams {
            bins: 8,
            ..HistogramParams::default()
        };
        let (x, y) = (random_image(5, 5, 1), random_image(5, 5, 2));
        let (hx, hy) = (color_histogram(&x, &hp).unwrap(), color_histogram(&y, &hp).unwrap());
        let tape = Tape::new();
        let d = hellinger_var(
            color_histogram_var(x.to_var(&tape), &hp).unwrap(),
            color_histogram_var(y.to_var(&tape), &hp).unwrap(),
        )
        .unwrap();
        assert!((d.item() - hellinger(&hx, &hy).unwrap()).abs() < 1e-12);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn histogram(bins: usize) -> impl Strategy<Value = ColorHistogram> {
            proptest::collection::vec(0.0f64..1.0, 3 * bins * bins).prop_filter_map(
                "needs mass",
                move |m| ColorHistogram::from_mass(bins, m).ok(),
            )
        }

        proptest! {
            #[test]
            fn hellinger_is_a_bounded_metric(a in histogram(3), b in histogram(3), c in histogram(3)) {
                let ab = hellinger(&a, &b).unwrap();
                let ba = hellinger(&b, &a).unwrap();
                let ac = hellinger(&a, &c).unwrap();
                let cb = hellinger(&c, &b).unwrap();
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert_eq!(ab, ba);
                prop_assert!(ab <= ac + cb + 1e-12);
                prop_assert_eq!(hellinger(&a, &a).unwrap(), 0.0);
            }

            #[test]
            fn constant_images_have_no_edges(r in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0) {
                let img = Image::constant(4, 6, [r, g, b]);
                prop_assert!(sobel(&img).unwrap().data.iter().all(|&v| v == 0.0));
                prop_assert!(laplacian(&img).unwrap().data.iter().all(|&v| v == 0.0));
            }
        }
    }
}
