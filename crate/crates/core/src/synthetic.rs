//! Seeded synthetic scenes, style images and flow fixtures.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::Image;

const TEXTURE_AMPLITUDE: f64 = 0.08;

/// Bilinearly interpolated uniform noise on a grid of `cell`-pixel spacing,
/// in `[-1, 1]` per channel.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let grid: Vec<[f64; 3]> = (0..gh * gw)
        .map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            out.push([0, 1, 2].map(|c| {
                let top = g(y0, x0)[c] * (1.0 - tx) + g(y0, x0 + 1)[c] * tx;
                let bottom = g(y0 + 1, x0)[c] * (1.0 - tx) + g(y0 + 1, x0 + 1)[c] * tx;
                top * (1.0 - ty) + bottom * ty
            }));
        }
    }
    out
}

/// `views` crops of one wide canvas, each `shift` pixels right of the last.
///
/// The canvas holds a soft two-tone gradient, a few flat-coloured boxes and
/// discs, and low-amplitude value-noise texture, all inside `[0.15, 0.85]`.
pub fn scene_views(views: usize, size: usize, shift: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canvas_w = size + shift * views.saturating_sub(1);
    let base0: [f64; 3] = [rng.random_range(0.3..0.5), rng.random_range(0.35..0.55), rng.random_range(0.4..0.6)];
    let base1: [f64; 3] = [rng.random_range(0.45..0.65), rng.random_range(0.4..0.6), rng.random_range(0.3..0.5)];
    let shapes: Vec<(bool, f64, f64, f64, [f64; 3])> = (0..5)
        .map(|_| {
            let disc = rng.random_bool(0.5);
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..canvas_w as f64);
            let r = rng.random_range(size as f64 * 0.12..size as f64 * 0.25);
            let col = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
            (disc, cy, cx, r, col)
        })
        .collect();
    let texture = value_noise(size, canvas_w, 3, &mut rng);
    let canvas = Image::from_fn(size, canvas_w, |y, x, c| {
        let (fy, fx) = (y as f64, x as f64);
        let t = fx / canvas_w as f64;
        let mut v = base0[c] * (1.0 - t) + base1[c] * t;
        for &(disc, cy, cx, r, col) in &shapes {
            let inside = if disc {
                (fy - cy).powi(2) + (fx - cx).powi(2) < r * r
            } else {
                (fy - cy).abs() < r && (fx - cx).abs() < 0.7 * r
            };
            if inside {
                v = col[c];
            }
        }
        v += TEXTURE_AMPLITUDE * texture[y * canvas_w + x][c];
        v.clamp(0.15, 0.85)
    });
    (0..views)
        .map(|k| crop(&canvas, 0, k * shift, size, size))
        .collect()
}

/// Saturated diagonal bands from a four-colour palette with a light weave.
pub fn style_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut palette = vec![
        [0.92, 0.35, 0.12],
        [0.96, 0.82, 0.22],
        [0.35, 0.12, 0.62],
        [0.1, 0.48, 0.82],
    ];
    palette.shuffle(&mut rng);
    let period = rng.random_range(5.0..9.0);
    Image::from_fn(size, size, |y, x, c| {
        let band = (((x + y) as f64 / period).floor() as usize) % palette.len();
        let weave = 0.06 * ((x as f64 * 1.3).sin() * (y as f64 * 1.1).sin());
        palette[band][c] + weave
    })
}

/// Independent uniform pixels in `[0.05, 0.95]`.
pub fn noise_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * height * width).map(|_| rng.random_range(0.05..0.95)).collect();
    Image::new(height, width, data).expect("values lie in [0, 1]")
}

/// Two views of a random texture where view 2 is view 1 moved by `(dx, dy)`:
/// `b(y, x) = a(y − dy, x − dx)` wherever both are defined.
pub fn translated_pair(height: usize, width: usize, dx: usize, dy: usize, seed: u64) -> (Image, Image) {
    let canvas = noise_image(height + dy, width + dx, seed);
    (
        crop(&canvas, dy, dx, height, width),
        crop(&canvas, 0, 0, height, width),
    )
}

fn crop(img: &Image, y0: usize, x0: usize, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |y, x, c| img.get(y0 + y, x0 + x, c))
}

/// Bijective per-pixel colour map: channel permutation followed by
/// per-channel gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorRemap {
    pub permutation: [usize; 3],
    pub gamma: [f64; 3],
}

impl ColorRemap {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut permutation = [0, 1, 2];
        permutation.shuffle(&mut rng);
        let gamma = [0; 3].map(|_| rng.random_range(0.5..2.0));
        Self { permutation, gamma }
    }

    pub fn apply(&self, img: &Image) -> Image {
        Image::from_fn(img.height(), img.width(), |y, x, c| {
            img.get(y, x, self.permutation[c]).powf(self.gamma[c])
        })
    }
}

/// Writes `view_NN.png` files under `dir/scene` and `dir/style.png`.
/// Returns `(scene_dir, style_path)`.
pub fn write_toy_scene(dir: &Path, views: usize, size: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let scene = dir.join("scene");
    std::fs::create_dir_all(&scene)?;
    for (i, v) in scene_views(views, size, 2, seed).iter().enumerate() {
        v.save_png(&scene.join(format!("view_{i:02}.png")))?;
    }
    let style = dir.join("style.png");
    style_image(size, seed.wrapping_add(1)).save_png(&style)?;
    Ok((scene, style))
}
