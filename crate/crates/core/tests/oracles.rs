//! Brute-force reference implementations checked against the library.

use mvstyle::imaging::{color_histogram, hellinger, laplacian, sobel, HistogramParams};
use mvstyle::metrics::{BlockMatching, FlowEstimator};
use mvstyle::synthetic::{noise_image, translated_pair};
use mvstyle::Image;

fn clamped(img: &Image, y: isize, x: isize, c: usize) -> f64 {
    let y = y.clamp(0, img.height() as isize - 1) as usize;
    let x = x.clamp(0, img.width() as isize - 1) as usize;
    img.get(y, x, c)
}

fn correlate(img: &Image, k: [[f64; 3]; 3], y: usize, x: usize, c: usize) -> f64 {
    let mut acc = 0.0;
    for (i, row) in k.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            acc += w * clamped(img, y as isize + i as isize - 1, x as isize + j as isize - 1, c);
        }
    }
    acc
}

#[test]
fn edge_operators_match_direct_correlation() {
    let img = noise_image(9, 11, 4);
    let gx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let gy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let lap = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let s = sobel(&img).unwrap();
    let l = laplacian(&img).unwrap();
    for c in 0..3 {
        for y in 0..9 {
            for x in 0..11 {
                assert!((s.get(2 * c, y, x) - correlate(&img, gx, y, x, c)).abs() < 1e-12);
                assert!((s.get(2 * c + 1, y, x) - correlate(&img, gy, y, x, c)).abs() < 1e-12);
                assert!((l.get(c, y, x) - correlate(&img, lap, y, x, c)).abs() < 1e-12);
            }
        }
    }
}

/// Per-pixel, per-bin evaluation of the weighted log-chroma kernel density.
fn histogram_oracle(img: &Image, p: &HistogramParams) -> Vec<f64> {
    let centers = p.centers();
    let k = |d: f64| 1.0 / (1.0 + (d / p.tau).powi(2));
    let h = p.bins;
    let mut mass = vec![0.0; 3 * h * h];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = [0, 1, 2].map(|c| img.get(y, x, c));
            let lg = px.map(|v| (v + p.eps).ln());
            let weight = (px.iter().map(|v| v * v).sum::<f64>() + p.eps).sqrt();
            for (c, (a, b)) in [(1, 2), (0, 2), (0, 1)].into_iter().enumerate() {
                let (u, v) = (lg[c] - lg[a], lg[c] - lg[b]);
                for i in 0..h {
                    for j in 0..h {
                        mass[(c * h + i) * h + j] += weight * k(u - centers[i]) * k(v - centers[j]);
                    }
                }
            }
        }
    }
    let total: f64 = mass.iter().sum();
    mass.into_iter().map(|m| m / total).collect()
}

#[test]
fn histogram_matches_per_bin_sum() {
    let p = HistogramParams { bins: 12, tau: 0.3, ..HistogramParams::default() };
    for seed in 0..3 {
        let img = noise_image(6, 7, seed);
        let got = color_histogram(&img, &p).unwrap();
        for (a, b) in got.data().iter().zip(histogram_oracle(&img, &p)) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }
}

#[test]
fn hellinger_matches_bhattacharyya_form() {
    let p = HistogramParams { bins: 8, tau: 0.5, ..HistogramParams::default() };
    let a = color_histogram(&noise_image(5, 5, 1), &p).unwrap();
    let b = color_histogram(&noise_image(5, 5, 2), &p).unwrap();
    let bc: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x * y).sqrt()).sum();
    let expected = (1.0 - bc).max(0.0).sqrt();
    assert!((hellinger(&a, &b).unwrap() - expected).abs() < 1e-9);
}

/// Direct search: for every pixel and displacement, sum the window anew.
fn block_matching_oracle(first: &Image, second: &Image, patch: usize, radius: usize) -> Vec<(isize, isize)> {
    let (h, w) = (first.height() as isize, first.width() as isize);
    let (before, after) = ((patch / 2) as isize, (patch - patch / 2) as isize);
    let r = radius as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            // (score, |d|², dy, dx) ordering reproduces the smaller-displacement tie rule
            let mut best: Option<(f64, isize, isize, isize)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (mut cost, mut n) = (0.0, 0usize);
                    for yy in (y - before).max(0)..(y + after).min(h) {
                        for xx in (x - before).max(0)..(x + after).min(w) {
                            let (ty, tx) = (yy + dy, xx + dx);
                            if ty < 0 || tx < 0 || ty >= h || tx >= w {
                                continue;
                            }
                            n += 1;
                            for c in 0..3 {
                                cost += (first.get(yy as usize, xx as usize, c)
                                    - second.get(ty as usize, tx as usize, c))
                                .abs();
                            }
                        }
                    }
                    if n < patch {
                        continue;
                    }
                    let cand = (cost / n as f64, dx * dx + dy * dy, dy, dx);
                    let better = match best {
                        None => true,
                        Some(b) => {
                            cand.0 < b.0 - 1e-12 || (cand.0 <= b.0 + 1e-12 && (cand.1, cand.2, cand.3) < (b.1, b.2, b.3))
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
            let (_, _, dy, dx) = best.expect("zero displacement always qualifies");
            out.push((dx, dy));
        }
    }
    out
}

#[test]
fn block_matching_matches_exhaustive_search() {
    for (seed, patch, radius) in [(1, 3, 2), (2, 4, 3), (3, 5, 2)] {
        let (a, _) = translated_pair(10, 12, 2, 1, seed);
        let b = noise_image(10, 12, seed + 50);
        let b = Image::from_fn(10, 12, |y, x, c| 0.5 * (b.get(y, x, c) + a.get(y, (x + 1).min(11), c)));
        let flow = BlockMatching { patch, radius }.estimate(&a, &b).unwrap();
        let oracle = block_matching_oracle(&a, &b, patch, radius);
        for y in 0..10 {
            for x in 0..12 {
                let (dx, dy) = oracle[y * 12 + x];
                assert_eq!(flow.get(y, x), (dx as f64, dy as f64), "pixel ({y}, {x})");
            }
        }
    }
}
