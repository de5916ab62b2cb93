//! Full-reference image metrics on the luminance channel, a Fréchet distance
//! over frozen-encoder features, and the evaluation report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::degradation::TrainingPair;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::linalg::{matmul_sq, sqrt_psd, symmetric_eigen};
use crate::losses::perceptual_distance;
use crate::nets::{AutoEncoder, Ctx, Student, Trainable};
use crate::real::Real;
use crate::tape::Tape;

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Full-range BT.601 luma.
pub fn rgb_to_y(img: &ImageBuffer) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .collect()
}

pub fn psnr_y(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    let (ya, yb) = (rgb_to_y(a), rgb_to_y(b));
    let mse = ya
        .iter()
        .zip(&yb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / ya.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalised `11 x 11` Gaussian window, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// Mean SSIM over all fully-contained `11 x 11` windows.
pub fn ssim_y(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidSize(format!(
            "{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (ya, yb) = (rgb_to_y(a), rgb_to_y(b));
    let win = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                let row = (y + dy) * w + x;
                for dx in 0..SSIM_WINDOW {
                    let k = win[dy * SSIM_WINDOW + dx];
                    let (pa, pb) = (ya[row + dx], yb[row + dx]);
                    ma += k * pa;
                    mb += k * pb;
                    saa += k * pa * pa;
                    sbb += k * pb * pb;
                    sab += k * pa * pb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

fn mean_and_cov(set: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = vec![0.0; d];
    for v in set {
        mu.iter_mut().zip(v).for_each(|(m, x)| *m += x / n);
    }
    let mut cov = vec![0.0; d * d];
    for v in set {
        for i in 0..d {
            let di = v[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (v[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, cov)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` between Gaussian fits.
///
/// The trace of the cross term is computed as `tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`,
/// which is symmetric and has the same eigenvalues.
pub fn frechet_distance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    let d = set_a.first().or(set_b.first()).map_or(0, Vec::len);
    for set in [set_a, set_b] {
        if set.len() < d + 1 || set.is_empty() {
            return Err(Error::InsufficientSamples {
                need: d + 1,
                got: set.len(),
            });
        }
        if let Some(bad) = set.iter().find(|v| v.len() != d) {
            return Err(Error::ShapeMismatch {
                expected: vec![d],
                got: vec![bad.len()],
            });
        }
    }
    let (ma, ca) = mean_and_cov(set_a);
    let (mb, cb) = mean_and_cov(set_b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b) * (a - b)).sum();
    let ra = sqrt_psd(&ca, d);
    let mut inner = matmul_sq(&matmul_sq(&ra, &cb, d), &ra, d);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, d);
    let cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr: f64 = (0..d).map(|i| ca[i * d + i] + cb[i * d + i]).sum();
    Ok((mean_term + tr - 2.0 * cross).max(0.0))
}

/// Spatially averaged deepest encoder activations, one vector per image.
pub fn pooled_features<F: Real>(
    ae: &AutoEncoder<F>,
    images: &[ImageBuffer],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let refs: Vec<&ImageBuffer> = chunk.iter().collect();
        let x = ImageBuffer::batch::<F>(&refs)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, Trainable::Nothing);
        let xv = ctx.tape.constant(x);
        let enc = ae.encode_graph(&mut ctx, xv);
        let f = tape.value(*enc.features.last().expect("encoder features"));
        let (n, c, h, w) = f.dims4();
        for i in 0..n {
            out.push(
                (0..c)
                    .map(|ch| {
                        let base = (i * c + ch) * h * w;
                        f.data()[base..base + h * w]
                            .iter()
                            .map(|v| v.f64())
                            .sum::<f64>()
                            / (h * w) as f64
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Fréchet distance between pooled frozen-encoder features of two image sets.
pub fn frechet_feature_distance<F: Real>(
    set_a: &[ImageBuffer],
    set_b: &[ImageBuffer],
    ae: &AutoEncoder<F>,
) -> Result<f64> {
    frechet_distance(&pooled_features(ae, set_a)?, &pooled_features(ae, set_b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub perceptual: f64,
    pub denoiser_evals: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub psnr_y: Aggregate,
    pub ssim_y: Aggregate,
    pub perceptual: Aggregate,
    pub denoiser_evals: Aggregate,
    /// Present when both sets hold more images than the feature dimension.
    pub ffd: Option<f64>,
}

impl MetricsReport {
    /// Aggregates rows; `ffd` is filled in by the caller.
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        Self {
            psnr_y: Aggregate::of(rows.iter().map(|r| r.psnr_y)),
            ssim_y: Aggregate::of(rows.iter().map(|r| r.ssim_y)),
            perceptual: Aggregate::of(rows.iter().map(|r| r.perceptual)),
            denoiser_evals: Aggregate::of(rows.iter().map(|r| r.denoiser_evals as f64)),
            ffd: None,
            rows,
        }
    }
}

fn score_outputs<F: Real>(
    outputs: &[ImageBuffer],
    pairs: &[TrainingPair],
    evals: &[u64],
    ae: &AutoEncoder<F>,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for (i, ((out, pair), &ev)) in outputs.iter().zip(pairs).zip(evals).enumerate() {
        rows.push(MetricRow {
            id: format!("{i:04}"),
            psnr_y: psnr_y(out, &pair.hq)?,
            ssim_y: ssim_y(out, &pair.hq)?,
            perceptual: perceptual_distance(ae, out, &pair.hq)?,
            denoiser_evals: ev,
        });
    }
    let mut report = MetricsReport::from_rows(rows);
    let hq: Vec<ImageBuffer> = pairs.iter().map(|p| p.hq.clone()).collect();
    report.ffd = match frechet_feature_distance(outputs, &hq, ae) {
        Ok(v) => Some(v),
        Err(Error::InsufficientSamples { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(report)
}

/// Student outputs for every pair, one forward pass per image.
pub fn student_outputs<F: Real>(
    student: &Student<F>,
    pairs: &[TrainingPair],
) -> Result<(Vec<ImageBuffer>, Vec<u64>)> {
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut evals = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let before = student.evals();
        let (_, img) = student.student_forward(&pair.lq)?;
        evals.push(student.evals() - before);
        outputs.push(img);
    }
    Ok((outputs, evals))
}

/// Scores the student against the high-quality targets.
pub fn evaluate<F: Real>(
    student: &Student<F>,
    pairs: &[TrainingPair],
    ae: &AutoEncoder<F>,
) -> Result<MetricsReport> {
    let (outputs, evals) = student_outputs(student, pairs)?;
    score_outputs(&outputs, pairs, &evals, ae)
}

/// Same report for plain bilinear upsampling of the inputs.
pub fn evaluate_bilinear<F: Real>(
    pairs: &[TrainingPair],
    ae: &AutoEncoder<F>,
) -> Result<MetricsReport> {
    let outputs: Vec<ImageBuffer> = pairs
        .iter()
        .map(|p| p.lq.resize_bilinear(p.hq.height(), p.hq.width()))
        .collect();
    score_outputs(&outputs, pairs, &vec![0; pairs.len()], ae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_image(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = seeded(seed);
        ImageBuffer::from_planar(h, w, (0..3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn noisy(img: &ImageBuffer, sigma: f32, seed: u64) -> ImageBuffer {
        let mut rng = seeded(seed);
        let data = img
            .data()
            .iter()
            .map(|&v| {
                let n: f32 = StandardNormal.sample(&mut rng);
                v + sigma * n
            })
            .collect();
        ImageBuffer::from_planar(img.height(), img.width(), data).unwrap()
    }

    #[test]
    fn luma_weights() {
        assert!((rgb_to_y(&ImageBuffer::filled(2, 2, [1.0, 1.0, 1.0]))[0] - 1.0).abs() < 1e-12);
        assert!((rgb_to_y(&ImageBuffer::filled(2, 2, [1.0, 0.0, 0.0]))[0] - 0.299).abs() < 1e-12);
        let gray = rgb_to_y(&ImageBuffer::filled(2, 2, [0.25, 0.25, 0.25]));
        assert!(gray.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr_y(&a, &a).unwrap(), PSNR_CAP);
        let b = ImageBuffer::filled(4, 4, [0.5, 0.5, 0.5]);
        let c = ImageBuffer::filled(4, 4, [0.6, 0.6, 0.6]);
        assert!((psnr_y(&b, &c).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr_y(&a, &b).is_err());
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        for seed in 0..10 {
            let (a, b) = (random_image(9, 7, seed), random_image(9, 7, seed + 100));
            let mut se = 0.0;
            for y in 0..9 {
                for x in 0..7 {
                    let ya = 0.299 * a.get(0, y, x) as f64
                        + 0.587 * a.get(1, y, x) as f64
                        + 0.114 * a.get(2, y, x) as f64;
                    let yb = 0.299 * b.get(0, y, x) as f64
                        + 0.587 * b.get(1, y, x) as f64
                        + 0.114 * b.get(2, y, x) as f64;
                    se += (ya - yb) * (ya - yb);
                }
            }
            let reference = 10.0 * (63.0 / se).log10();
            assert!((psnr_y(&a, &b).unwrap() - reference).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let a = random_image(16, 16, 3);
        assert!((ssim_y(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim_y(&random_image(10, 16, 1), &random_image(10, 16, 2)).is_err());
        let s = ssim_y(&a, &random_image(16, 16, 4)).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    /// Direct windowed SSIM with a separately built window.
    fn ssim_brute(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let mut k = [[0.0f64; 11]; 11];
        let mut s = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(dy * dy + dx * dx) / 4.5).exp();
                s += *v;
            }
        }
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let mut m = [0.0; 5];
                for i in 0..11 {
                    for j in 0..11 {
                        let kk = k[i][j] / s;
                        let (p, q) = (a[(y + i) * w + x + j], b[(y + i) * w + x + j]);
                        m[0] += kk * p;
                        m[1] += kk * q;
                        m[2] += kk * p * p;
                        m[3] += kk * q * q;
                        m[4] += kk * p * q;
                    }
                }
                let num = (2.0 * m[0] * m[1] + 1e-4) * (2.0 * (m[4] - m[0] * m[1]) + 9e-4);
                let den = (m[0] * m[0] + m[1] * m[1] + 1e-4)
                    * (m[2] - m[0] * m[0] + m[3] - m[1] * m[1] + 9e-4);
                acc += num / den;
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn ssim_matches_brute_force_on_inverted_binary() {
        let (h, w) = (14, 13);
        let mut a = ImageBuffer::new(h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    a.set(c, y, x, if (x / 3 + y / 2) % 2 == 0 { 1.0 } else { 0.0 });
                }
            }
        }
        let inv =
            ImageBuffer::from_planar(h, w, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let got = ssim_y(&a, &inv).unwrap();
        let want = ssim_brute(&rgb_to_y(&a), &rgb_to_y(&inv), h, w);
        assert!((got - want).abs() < 1e-12);
        assert!(got < -0.9, "{got}");
        let b = random_image(h, w, 7);
        assert!(
            (ssim_y(&a, &b).unwrap() - ssim_brute(&rgb_to_y(&a), &rgb_to_y(&b), h, w)).abs()
                < 1e-12
        );
    }

    #[test]
    fn ssim_and_psnr_fall_with_noise() {
        let base = ImageBuffer::from_planar(
            32,
            32,
            (0..3 * 32 * 32)
                .map(|i| 0.5 + 0.3 * ((i % 32) as f32 * 0.3).sin())
                .collect(),
        )
        .unwrap();
        let mut last = (f64::INFINITY, f64::INFINITY);
        for (k, sigma) in [0.01, 0.03, 0.06, 0.1, 0.2].into_iter().enumerate() {
            let n = noisy(&base, sigma, 40 + k as u64);
            let cur = (ssim_y(&base, &n).unwrap(), psnr_y(&base, &n).unwrap());
            assert!(cur.0 < last.0 && cur.1 < last.1);
            last = cur;
        }
    }

    #[test]
    fn ssim_translation_leaves_only_luminance_term() {
        let (h, w) = (16, 16);
        let mut rng = seeded(9);
        let a = ImageBuffer::from_planar(
            h,
            w,
            (0..3 * h * w)
                .map(|_| 0.2 + 0.5 * rng.gen::<f32>())
                .collect(),
        )
        .unwrap();
        let win = gaussian_window();
        for c in [0.01f32, 0.05, 0.1] {
            let b =
                ImageBuffer::from_planar(h, w, a.data().iter().map(|v| v + c).collect()).unwrap();
            let (ya, yb) = (rgb_to_y(&a), rgb_to_y(&b));
            let mut acc = 0.0;
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            ma += win[i * 11 + j] * ya[(y + i) * w + x + j];
                            mb += win[i * 11 + j] * yb[(y + i) * w + x + j];
                        }
                    }
                    acc += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
                }
            }
            let want = acc / 36.0;
            assert!((ssim_y(&a, &b).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let mut rng = seeded(11);
        let set: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        assert!(frechet_distance(&set, &set).unwrap().abs() < 1e-6);
        let shift = [0.5, -1.0, 2.0, 0.0];
        let moved: Vec<Vec<f64>> = set
            .iter()
            .map(|v| v.iter().zip(shift).map(|(a, s)| a + s).collect())
            .collect();
        assert!((frechet_distance(&set, &moved).unwrap() - 5.25).abs() < 1e-6);
        assert!(matches!(
            frechet_distance(&set[..4], &set),
            Err(Error::InsufficientSamples { need: 5, got: 4 })
        ));
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..500) {
            let (a, b) = (random_image(12, 12, seed), random_image(12, 12, seed + 1));
            prop_assert!((psnr_y(&a, &b).unwrap() - psnr_y(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ssim_y(&a, &b).unwrap() - ssim_y(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn frechet_nonnegative(seed in 0u64..200) {
            let mut rng = seeded(seed);
            let a: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..9).map(|_| (0..3).map(|_| rng.gen_range(-2.0..1.0)).collect()).collect();
            prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
        }
    }
}
