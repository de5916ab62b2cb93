//! Synthetic training data: procedural high-quality images and a seeded
//! single-round degradation (blur, bicubic downsample, noise, block-transform
//! compression).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{clamp01, ImageBuffer, CHANNELS};
use crate::rng::{derive_seed, derived, seeded, streams};

/// Shape families drawn by the generator; the family doubles as the class id
/// used for conditioning.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["discs", "rectangles", "stripes", "rings"];

/// Image sides must be a multiple of this (autoencoder reduction and default
/// downscale factor).
pub const SIZE_MULTIPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub blur_sigma_range: [f64; 2],
    pub downscale_factor: usize,
    pub noise_sigma_range: [f64; 2],
    pub compression_block: usize,
    pub compression_keep: f64,
    pub order_seed: u64,
}

impl Default for DegradationRecipe {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.4, 1.6],
            downscale_factor: 4,
            noise_sigma_range: [0.0, 0.04],
            compression_block: 4,
            compression_keep: 0.4,
            order_seed: 0,
        }
    }
}

impl DegradationRecipe {
    /// Recipe that leaves its input untouched.
    pub fn identity() -> Self {
        Self {
            blur_sigma_range: [0.0, 0.0],
            downscale_factor: 1,
            noise_sigma_range: [0.0, 0.0],
            compression_block: 8,
            compression_keep: 1.0,
            order_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !range_ok(self.blur_sigma_range) {
            return Err(invalid("blur_sigma_range must satisfy 0 <= lo <= hi"));
        }
        if !range_ok(self.noise_sigma_range) || self.noise_sigma_range[1] > 1.0 {
            return Err(invalid("noise_sigma_range must satisfy 0 <= lo <= hi <= 1"));
        }
        if self.downscale_factor < 1 {
            return Err(invalid("downscale_factor must be >= 1"));
        }
        if self.compression_block < 1 {
            return Err(invalid("compression_block must be >= 1"));
        }
        if !(self.compression_keep > 0.0 && self.compression_keep <= 1.0) {
            return Err(invalid("compression_keep must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A generated high-quality image and its shape class.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub image: ImageBuffer,
    pub class_id: usize,
}

/// Low-quality input, high-quality reference and class id.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub lq: ImageBuffer,
    pub hq: ImageBuffer,
    pub class_id: usize,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// `n` deterministic images of `size x size`, classes assigned round-robin.
pub fn synth_hq(n: usize, size: usize, seed: u64) -> Result<Vec<SynthImage>> {
    if n == 0 {
        return Err(Error::InvalidSize("need at least one image".into()));
    }
    if size < 2 * SIZE_MULTIPLE || !size.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::InvalidSize(format!(
            "size {size} must be a multiple of {SIZE_MULTIPLE} and >= 8"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let class_id = i % NUM_CLASSES;
            let mut rng = derived(seed, streams::HQ, i as u64);
            SynthImage {
                image: draw_image(size, class_id, &mut rng),
                class_id,
            }
        })
        .collect())
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
        rng.gen_range(0.1..0.9),
    ]
}

fn draw_image<R: Rng + ?Sized>(size: usize, class_id: usize, rng: &mut R) -> ImageBuffer {
    let s = size as f64;
    let (c0, c1) = (random_color(rng), random_color(rng));
    let theta: f64 = rng.gen_range(0.0..2.0 * PI);
    let (dx, dy) = (theta.cos(), theta.sin());

    struct Wave {
        kx: f64,
        ky: f64,
        phase: f64,
        amp: f64,
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let period: f64 = rng.gen_range(4.0..10.0);
            let ang: f64 = rng.gen_range(0.0..PI);
            Wave {
                kx: 2.0 * PI * ang.cos() / period,
                ky: 2.0 * PI * ang.sin() / period,
                phase: rng.gen_range(0.0..2.0 * PI),
                amp: rng.gen_range(0.015..0.04),
            }
        })
        .collect();

    let mut px = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = (((fx / s - 0.5) * dx + (fy / s - 0.5) * dy) + 0.5).clamp(0.0, 1.0);
            let tex: f64 = waves
                .iter()
                .map(|w| w.amp * (w.kx * fx + w.ky * fy + w.phase).sin())
                .sum();
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - u) + c1[c] * u + tex;
            }
        }
    }

    let count = rng.gen_range(3..=5);
    for _ in 0..count {
        let color = random_color(rng);
        let cx: f64 = rng.gen_range(0.1 * s..0.9 * s);
        let cy: f64 = rng.gen_range(0.1 * s..0.9 * s);
        let r: f64 = rng.gen_range(0.09 * s..0.25 * s);
        let aspect: f64 = rng.gen_range(0.5..1.0);
        let thickness: f64 = rng.gen_range(1.5..3.5);
        let period: f64 = rng.gen_range(4.0..8.0);
        let ang: f64 = rng.gen_range(0.0..PI);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // Signed distance in pixels, negative inside.
                let d = match class_id {
                    0 => (fx * fx + fy * fy).sqrt() - r,
                    1 | 2 => (fx.abs() - r).max(fy.abs() - r * aspect),
                    _ => ((fx * fx + fy * fy).sqrt() - r).abs() - 0.5 * thickness,
                };
                let mut cov = (0.5 - d).clamp(0.0, 1.0);
                if class_id == 2 {
                    let proj = fx * ang.cos() + fy * ang.sin();
                    cov *= 0.5 + 0.5 * (2.0 * PI * proj / period).sin();
                }
                if cov > 0.0 {
                    let p = &mut px[y * size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - cov) + color[c] * cov;
                    }
                }
            }
        }
    }

    let mut img = ImageBuffer::new(size, size);
    for y in 0..size {
        for x in 0..size {
            for (c, &v) in px[y * size + x].iter().enumerate() {
                img.set(c, y, x, clamp01(v as f32));
            }
        }
    }
    img
}

/// Mean spectral energy of the tapered luminance plane at radial frequencies
/// above a quarter of Nyquist (DC removed).
pub fn high_frequency_energy(img: &ImageBuffer) -> f64 {
    let (h, w) = (img.height(), img.width());
    let mut plane: Vec<f64> = (0..h * w)
        .map(|i| {
            0.299 * img.plane(0)[i] as f64
                + 0.587 * img.plane(1)[i] as f64
                + 0.114 * img.plane(2)[i] as f64
        })
        .collect();
    let mean = plane.iter().sum::<f64>() / (h * w) as f64;
    // Hann taper so the periodic wrap of the transform adds no false edges.
    let hann = |i: usize, n: usize| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / n as f64).cos();
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = (plane[y * w + x] - mean) * hann(y, h) * hann(x, w);
        }
    }

    let twiddles = |n: usize| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                (
                    (2.0 * PI * k as f64 / n as f64).cos(),
                    -(2.0 * PI * k as f64 / n as f64).sin(),
                )
            })
            .collect()
    };
    let (tw_w, tw_h) = (twiddles(w), twiddles(h));
    // Row transform.
    let mut rows = vec![(0.0f64, 0.0f64); h * w];
    for y in 0..h {
        for k in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for x in 0..w {
                let (c, s) = tw_w[(k * x) % w];
                let v = plane[y * w + x];
                re += v * c;
                im += v * s;
            }
            rows[y * w + k] = (re, im);
        }
    }
    let cutoff = 0.5 / 4.0;
    let (mut total, mut count) = (0.0, 0usize);
    for kx in 0..w {
        let fx = if kx <= w / 2 {
            kx as f64
        } else {
            kx as f64 - w as f64
        } / w as f64;
        for ky in 0..h {
            let fy = if ky <= h / 2 {
                ky as f64
            } else {
                ky as f64 - h as f64
            } / h as f64;
            if (fx * fx + fy * fy).sqrt() <= cutoff {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                let (c, s) = tw_h[(ky * y) % h];
                let (a, b) = rows[y * w + kx];
                re += a * c - b * s;
                im += a * s + b * c;
            }
            total += (re * re + im * im) / ((h * w) as f64).powi(2);
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Ratio of the set's mean high-frequency energy to that of a horizontal
/// ramp of the same size.
pub fn detail_score(images: &[SynthImage]) -> f64 {
    let Some(first) = images.first() else {
        return 0.0;
    };
    let (h, w) = (first.image.height(), first.image.width());
    let mut ramp = ImageBuffer::new(h, w);
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                ramp.set(c, y, x, x as f32 / (w - 1) as f32);
            }
        }
    }
    let mean = images
        .iter()
        .map(|s| high_frequency_energy(&s.image))
        .sum::<f64>()
        / images.len() as f64;
    mean / high_frequency_energy(&ramp)
}

/// Blur, downsample, add noise, compress, clamp.
pub fn degrade<R: Rng + ?Sized>(
    hq: &ImageBuffer,
    recipe: &DegradationRecipe,
    rng: &mut R,
) -> Result<ImageBuffer> {
    recipe.validate()?;
    let f = recipe.downscale_factor;
    if !hq.height().is_multiple_of(f) || !hq.width().is_multiple_of(f) {
        return Err(Error::InvalidSize(format!(
            "{}x{} not divisible by downscale factor {f}",
            hq.height(),
            hq.width()
        )));
    }
    let blur_sigma = uniform(rng, recipe.blur_sigma_range);
    let noise_sigma = uniform(rng, recipe.noise_sigma_range);

    let mut img = if blur_sigma > 0.0 {
        gaussian_blur(hq, blur_sigma)
    } else {
        hq.clone()
    };
    if f > 1 {
        img = downsample_bicubic(&img, f);
    }
    if noise_sigma > 0.0 {
        for c in 0..CHANNELS {
            for v in img.plane_mut(c) {
                let z: f64 = StandardNormal.sample(rng);
                *v += (z * noise_sigma) as f32;
            }
        }
    }
    if recipe.compression_keep < 1.0 {
        compress_blocks(&mut img, recipe.compression_block, recipe.compression_keep);
    }
    img.clamp();
    Ok(img)
}

/// Degrades every image with a per-index stream, so pairs do not depend on
/// iteration order.
pub fn make_pairs(
    hq_set: &[SynthImage],
    recipe: &DegradationRecipe,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let base = derive_seed(seed, streams::DEGRADE, recipe.order_seed);
    hq_set
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seeded(derive_seed(base, streams::DEGRADE, i as u64));
            Ok(TrainingPair {
                lq: degrade(&s.image, recipe, &mut rng)?,
                hq: s.image.clone(),
                class_id: s.class_id,
            })
        })
        .collect()
}

fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let taps: Vec<(isize, f64)> = (-radius..=radius).zip(kernel).collect();
    separable(img, img.height(), img.width(), |n, o| {
        taps.iter()
            .map(|&(d, k)| ((o as isize + d).clamp(0, n as isize - 1) as usize, k))
            .collect()
    })
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Antialiased bicubic reduction by an integer factor.
fn downsample_bicubic(img: &ImageBuffer, f: usize) -> ImageBuffer {
    let scale = f as f64;
    separable(img, img.height() / f, img.width() / f, |n, o| {
        let centre = (o as f64 + 0.5) * scale - 0.5;
        let lo = (centre - 2.0 * scale).floor() as isize;
        let hi = (centre + 2.0 * scale).ceil() as isize;
        let mut taps: Vec<(usize, f64)> = (lo..=hi)
            .map(|i| {
                (
                    (i.clamp(0, n as isize - 1)) as usize,
                    cubic((i as f64 - centre) / scale),
                )
            })
            .filter(|&(_, w)| w != 0.0)
            .collect();
        let total: f64 = taps.iter().map(|t| t.1).sum();
        taps.iter_mut().for_each(|t| t.1 /= total);
        taps
    })
}

/// Applies a 1-D resampling rule along x then y. `taps(n, o)` lists
/// `(source index, weight)` for output index `o` over an axis of length `n`.
fn separable(
    img: &ImageBuffer,
    out_h: usize,
    out_w: usize,
    taps: impl Fn(usize, usize) -> Vec<(usize, f64)>,
) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    let xt: Vec<_> = (0..out_w).map(|o| taps(w, o)).collect();
    let yt: Vec<_> = (0..out_h).map(|o| taps(h, o)).collect();
    let mut out = ImageBuffer::new(out_h, out_w);
    let mut tmp = vec![0.0f64; h * out_w];
    for c in 0..CHANNELS {
        let src = img.plane(c);
        for y in 0..h {
            for (x, t) in xt.iter().enumerate() {
                tmp[y * out_w + x] = t.iter().map(|&(i, k)| src[y * w + i] as f64 * k).sum();
            }
        }
        let dst = out.plane_mut(c);
        for (y, t) in yt.iter().enumerate() {
            for x in 0..out_w {
                dst[y * out_w + x] =
                    t.iter().map(|&(i, k)| tmp[i * out_w + x] * k).sum::<f64>() as f32;
            }
        }
    }
    out
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] = a * (PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Per-block orthonormal DCT, keeping the lowest-frequency `keep` fraction of
/// coefficients. Edge blocks shrink to fit.
fn compress_blocks(img: &mut ImageBuffer, block: usize, keep: f64) {
    let (h, w) = (img.height(), img.width());
    for c in 0..CHANNELS {
        let plane = img.plane_mut(c);
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (bh, bw) = (block.min(h - by), block.min(w - bx));
                let (dh, dw) = (dct_matrix(bh), dct_matrix(bw));
                let mut blk = vec![0.0f64; bh * bw];
                for y in 0..bh {
                    for x in 0..bw {
                        blk[y * bw + x] = plane[(by + y) * w + bx + x] as f64;
                    }
                }
                // coef = Dh * blk * Dw^T
                let mut tmp = vec![0.0; bh * bw];
                for u in 0..bh {
                    for x in 0..bw {
                        tmp[u * bw + x] = (0..bh).map(|y| dh[u * bh + y] * blk[y * bw + x]).sum();
                    }
                }
                let mut coef = vec![0.0; bh * bw];
                for u in 0..bh {
                    for v in 0..bw {
                        coef[u * bw + v] = (0..bw).map(|x| tmp[u * bw + x] * dw[v * bw + x]).sum();
                    }
                }
                let mut order: Vec<(usize, usize)> =
                    (0..bh).flat_map(|u| (0..bw).map(move |v| (u, v))).collect();
                order.sort_by_key(|&(u, v)| (u + v, u));
                let kept = ((keep * (bh * bw) as f64).ceil() as usize).clamp(1, bh * bw);
                for &(u, v) in &order[kept..] {
                    coef[u * bw + v] = 0.0;
                }
                // blk = Dh^T * coef * Dw
                for y in 0..bh {
                    for v in 0..bw {
                        tmp[y * bw + v] = (0..bh).map(|u| dh[u * bh + y] * coef[u * bw + v]).sum();
                    }
                }
                for y in 0..bh {
                    for x in 0..bw {
                        let val: f64 = (0..bw).map(|v| tmp[y * bw + v] * dw[v * bw + x]).sum();
                        plane[(by + y) * w + bx + x] = val as f32;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr_y;

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_hq(2, 64, 7).unwrap();
        let b = synth_hq(2, 64, 7).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_ne!(synth_hq(1, 64, 8).unwrap()[0], a[0]);
        assert!(synth_hq(0, 64, 1).is_err());
        assert!(synth_hq(1, 30, 1).is_err());
    }

    #[test]
    fn synth_has_more_detail_than_a_ramp() {
        let set = synth_hq(8, 64, 3).unwrap();
        let score = detail_score(&set);
        assert!(score > 1.5, "detail score {score}");
    }

    #[test]
    fn identity_recipe_is_exact() {
        let hq = &synth_hq(1, 32, 1).unwrap()[0].image;
        let out = degrade(hq, &DegradationRecipe::identity(), &mut seeded(0)).unwrap();
        assert_eq!(&out, hq);
    }

    #[test]
    fn degrade_shape_and_range() {
        let hq = &synth_hq(1, 64, 1).unwrap()[0].image;
        let out = degrade(hq, &DegradationRecipe::default(), &mut seeded(0)).unwrap();
        assert_eq!((out.height(), out.width()), (16, 16));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let recipe = DegradationRecipe {
            downscale_factor: 3,
            ..Default::default()
        };
        assert!(degrade(hq, &recipe, &mut seeded(0)).is_err());
    }

    #[test]
    fn recipe_validation() {
        let r = DegradationRecipe {
            blur_sigma_range: [2.0, 1.0],
            ..Default::default()
        };
        assert!(r.validate().is_err());
        let r = DegradationRecipe {
            compression_keep: 0.0,
            ..Default::default()
        };
        assert!(r.validate().is_err());
        let r = DegradationRecipe {
            downscale_factor: 0,
            ..Default::default()
        };
        assert!(r.validate().is_err());
    }

    #[test]
    fn degrade_is_deterministic_given_rng() {
        let hq = &synth_hq(1, 64, 1).unwrap()[0].image;
        let r = DegradationRecipe::default();
        assert_eq!(
            degrade(hq, &r, &mut seeded(5)).unwrap(),
            degrade(hq, &r, &mut seeded(5)).unwrap()
        );
    }

    #[test]
    fn make_pairs_contract() {
        let set = synth_hq(6, 32, 2).unwrap();
        let r = DegradationRecipe::default();
        let a = make_pairs(&set, &r, 1).unwrap();
        let b = make_pairs(&set, &r, 1).unwrap();
        let c = make_pairs(&set, &r, 2).unwrap();
        assert_eq!(a.len(), set.len());
        assert_eq!(a, b);
        assert!(a.iter().zip(&c).any(|(x, y)| x.lq != y.lq));
        for (p, s) in a.iter().zip(&set) {
            assert_eq!(p.hq, s.image);
            assert_eq!(p.class_id, s.class_id);
        }
    }

    #[test]
    fn dct_keep_all_round_trips() {
        let hq = &synth_hq(1, 16, 4).unwrap()[0].image;
        let mut a = hq.clone();
        // keep = 1 goes through the transform pair unchanged up to rounding.
        compress_blocks(&mut a, 4, 1.0);
        for (x, y) in a.data().iter().zip(hq.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn more_noise_lowers_psnr() {
        let set = synth_hq(32, 32, 11).unwrap();
        let mut prev = f64::INFINITY;
        for sigma in [0.01, 0.03, 0.06, 0.1] {
            let recipe = DegradationRecipe {
                blur_sigma_range: [0.0, 0.0],
                downscale_factor: 1,
                noise_sigma_range: [sigma, sigma],
                compression_keep: 1.0,
                ..Default::default()
            };
            let pairs = make_pairs(&set, &recipe, 3).unwrap();
            let mean = pairs
                .iter()
                .map(|p| psnr_y(&p.lq, &p.hq).unwrap())
                .sum::<f64>()
                / pairs.len() as f64;
            assert!(mean < prev, "sigma {sigma}: {mean} >= {prev}");
            prev = mean;
        }
    }

    #[test]
    fn default_recipe_psnr_band() {
        let set = synth_hq(64, 64, 1).unwrap();
        let pairs = make_pairs(&set, &DegradationRecipe::default(), 2).unwrap();
        let mean = pairs
            .iter()
            .map(|p| psnr_y(&p.lq.resize_bilinear(64, 64), &p.hq).unwrap())
            .sum::<f64>()
            / 64.0;
        assert!(
            (mean - 26.08).abs() <= 1.0,
            "bilinear PSNR {mean} outside the frozen band"
        );
    }
}
