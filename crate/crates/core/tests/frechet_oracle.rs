//! Fréchet distance against an eigendecomposition computed with nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sr_distill_core::metrics::frechet_distance;
use sr_distill_core::rng::seeded;

fn gaussian_set(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    let mix = DMatrix::<f64>::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let shift = DVector::<f64>::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
    (0..n)
        .map(|_| {
            let g = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            (&mix * g + &shift).iter().copied().collect()
        })
        .collect()
}

fn fit(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let x = DMatrix::from_fn(set.len(), d, |i, j| set[i][j]);
    let mu = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centred = DMatrix::from_fn(set.len(), d, |i, j| x[(i, j)] - mu[j]);
    let cov = centred.transpose() * &centred / (set.len() as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let root = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &e.eigenvectors * root * e.eigenvectors.transpose()
}

fn oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (ma, ca) = fit(a);
    let (mb, cb) = fit(b);
    let ra = psd_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross
}

#[test]
fn matches_nalgebra_on_random_gaussians() {
    for seed in 0..10 {
        let a = gaussian_set(40, 8, 2 * seed);
        let b = gaussian_set(50, 8, 2 * seed + 1);
        let got = frechet_distance(&a, &b).unwrap();
        let want = oracle(&a, &b);
        assert!(
            (got - want).abs() <= 1e-6 * want.abs().max(1.0),
            "seed {seed}: {got} vs {want}"
        );
    }
}

#[test]
fn identical_sets_and_pure_shift() {
    let a = gaussian_set(30, 8, 99);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    let shift = [0.5, -1.0, 0.0, 2.0, 0.25, 0.0, -0.75, 1.0];
    let b: Vec<Vec<f64>> = a
        .iter()
        .map(|v| v.iter().zip(&shift).map(|(x, s)| x + s).collect())
        .collect();
    let expect: f64 = shift.iter().map(|s| s * s).sum();
    assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-6);
}

#[test]
fn too_few_samples() {
    let a = gaussian_set(8, 8, 1);
    assert!(frechet_distance(&a, &a).is_err());
}
