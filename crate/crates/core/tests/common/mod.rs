#![allow(dead_code)]

use ctrecon::covariance::{ErrorPanel, ErrorSource};
use ctrecon::hierarchy::{two_series_example, CrossSectionalHierarchy, CrossTemporalStructure, TemporalSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `X = W + Z` with `m = 6`, `K = {6, 3, 2, 1}`.
pub fn small() -> CrossTemporalStructure {
    CrossTemporalStructure::new(two_series_example(), TemporalSpec::new(6, vec![6, 3, 2, 1]).unwrap())
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Total plus up to two random groups over 2..=4 bottom series, so `n ≤ 7`.
pub fn random_cross_sectional(rng: &mut ChaCha8Rng) -> CrossSectionalHierarchy {
    let n_b = rng.random_range(2..=4);
    let bottom: Vec<String> = (0..n_b).map(|i| format!("B{i}")).collect();
    let mut groups = Vec::new();
    for g in 0..rng.random_range(0..=2usize) {
        let size = rng.random_range(1..n_b);
        let start = rng.random_range(0..=n_b - size);
        groups.push((format!("G{g}"), bottom[start..start + size].to_vec()));
    }
    CrossSectionalHierarchy::from_groups(bottom, &groups).unwrap()
}

/// All divisors of a random `m ∈ {2, 3, 4, 6, 12}`.
pub fn random_temporal(rng: &mut ChaCha8Rng) -> TemporalSpec {
    let m = [2, 3, 4, 6, 12][rng.random_range(0..5)];
    TemporalSpec::all_divisors(m).unwrap()
}

pub fn random_structure(rng: &mut ChaCha8Rng) -> CrossTemporalStructure {
    let cs = random_cross_sectional(rng);
    CrossTemporalStructure::new(cs, random_temporal(rng))
}

/// Coherent errors (aggregated bottom noise) plus an incoherent part, with a
/// per-series scale and a common factor.
pub fn random_panel(rng: &mut ChaCha8Rng, s: &CrossTemporalStructure, n_obs: usize) -> ErrorPanel<f64> {
    let scale: Vec<f64> = (0..s.n()).map(|_| 0.5 + 2.0 * rng.random::<f64>()).collect();
    let rows: Vec<Vec<f64>> = (0..n_obs)
        .map(|_| {
            let b = normals(rng, s.bottom_dim());
            let common = normal(rng);
            let mut y = s.aggregate(&b).unwrap();
            for (j, v) in y.iter_mut().enumerate() {
                *v = scale[j % s.n()] * (*v + 0.5 * common + 0.3 * normal(rng));
            }
            y.as_slice().to_vec()
        })
        .collect();
    ErrorPanel::from_rows(ErrorSource::Validation, &rows, s).unwrap()
}

/// Minimizes `(y − ŷ)'W(y − ŷ)` subject to `Cy = 0` by solving the dense
/// KKT system `[W C'; C 0][y; μ] = [Wŷ; 0]` with LU.
pub fn kkt_weighted(w: &DMatrix<f64>, c: &DMatrix<f64>, base: &[f64]) -> DVector<f64> {
    let (d, r) = (w.nrows(), c.nrows());
    let mut k = DMatrix::zeros(d + r, d + r);
    k.view_mut((0, 0), (d, d)).copy_from(w);
    k.view_mut((0, d), (d, r)).copy_from(&c.transpose());
    k.view_mut((d, 0), (r, d)).copy_from(c);
    let mut rhs = DVector::zeros(d + r);
    rhs.rows_mut(0, d).copy_from(&(w * DVector::from_column_slice(base)));
    let sol = k.full_piv_lu().solve(&rhs).expect("KKT system is nonsingular");
    sol.rows(0, d).into_owned()
}

/// KKT oracle in the `Ω⁻¹` metric.
pub fn kkt(omega: &DMatrix<f64>, c: &DMatrix<f64>, base: &[f64]) -> DVector<f64> {
    let w = omega.clone().try_inverse().expect("Ω is invertible");
    kkt_weighted(&w, c, base)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Incoherent base: a coherent vector plus iid noise.
pub fn random_base(rng: &mut ChaCha8Rng, s: &CrossTemporalStructure, noise: f64) -> Vec<f64> {
    let b: Vec<f64> = (0..s.bottom_dim()).map(|_| 10.0 + 5.0 * normal(rng)).collect();
    let y = s.aggregate(&b).unwrap();
    y.iter().map(|v| v + noise * normal(rng)).collect()
}

pub fn coherent_within(s: &CrossTemporalStructure, y: &[f64], tol: f64) -> bool {
    s.coherence_residual(y).unwrap() <= tol * max_abs(y).max(1.0)
}
