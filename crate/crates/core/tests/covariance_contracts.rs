mod common;

use common::*;
use ctrecon::covariance::{estimate, estimate_with, shrink, CovarianceKind, ErrorPanel, ErrorSource, EstimateOptions};
use ctrecon::linalg::is_positive_definite;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL_KINDS: [CovarianceKind; 6] = [
    CovarianceKind::Ols,
    CovarianceKind::Str,
    CovarianceKind::Wlsv,
    CovarianceKind::Acov,
    CovarianceKind::Bdshr,
    CovarianceKind::ShrCs,
];

#[test]
fn every_estimator_factorizes_on_200_panels() {
    let mut rng = ChaCha8Rng::seed_from_u64(144);
    for trial in 0..200 {
        let s = if trial % 2 == 0 {
            small()
        } else {
            random_structure(&mut rng)
        };
        // alternate between scarce and plentiful observations
        let n_obs = if trial % 3 == 0 {
            rng.random_range(2..6)
        } else {
            rng.random_range(s.m_star()..2 * s.dim())
        };
        let panel = random_panel(&mut rng, &s, n_obs);
        for kind in ALL_KINDS {
            let model = estimate(kind, &panel, &s).unwrap();
            assert!(model.is_positive_definite(), "{kind}, trial {trial}, N={n_obs}");
            assert!(model.structure.factorize().is_ok());
            for l in &model.lambdas {
                assert!((0.0..=1.0).contains(l), "{kind}: λ = {l}");
            }
        }
    }
}

#[test]
fn bdshr_with_full_shrinkage_is_wlsv() {
    let mut rng = ChaCha8Rng::seed_from_u64(233);
    for _ in 0..20 {
        let s = random_structure(&mut rng);
        let panel = random_panel(&mut rng, &s, 40);
        let opts = EstimateOptions {
            force_lambda: Some(1.0),
        };
        let b = estimate_with(CovarianceKind::Bdshr, &panel, &s, &opts)
            .unwrap()
            .to_dense();
        let w = estimate(CovarianceKind::Wlsv, &panel, &s).unwrap().to_dense();
        assert!(max_abs_diff(b.as_slice(), w.as_slice()) <= 1e-12 * max_abs(w.as_slice()));
    }
}

#[test]
fn shrinkage_intensity_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(377);
    for _ in 0..200 {
        let (n, d) = (rng.random_range(2..40), rng.random_range(2..12));
        let x = DMatrix::from_fn(n, d, |_, _| normal(&mut rng));
        let sh = shrink(&x).unwrap();
        assert!((0.0..=1.0).contains(&sh.lambda));
        assert!(is_positive_definite(&sh.cov));
    }
}

#[test]
fn tiny_panel_is_clipped_and_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(610);
    let x = DMatrix::from_fn(2, 10, |_, _| normal(&mut rng));
    let sh = shrink(&x).unwrap();
    assert!((0.0..=1.0).contains(&sh.lambda));
    assert!(sh.cov.clone().cholesky().is_some());
}

#[test]
fn ninety_two_day_validation_window_gives_276_rows() {
    let s = small();
    let rows = vec![vec![0.5; s.dim()]; 92 * 24 / 8];
    let panel = ErrorPanel::from_rows(ErrorSource::Validation, &rows, &s).unwrap();
    assert_eq!(panel.n_obs(), 276);
}

#[test]
fn f32_estimates_track_f64() {
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(987);
    let p64 = random_panel(&mut rng, &s, 50);
    let obs32 = p64.observations().map(|v| v as f32);
    let p32 = ErrorPanel::new(ErrorSource::Validation, obs32, &s).unwrap();
    for kind in [CovarianceKind::Wlsv, CovarianceKind::Acov, CovarianceKind::Bdshr] {
        let a = estimate(kind, &p64, &s).unwrap().to_dense();
        let b = estimate(kind, &p32, &s).unwrap().to_dense().map(|v| v as f64);
        let rel = max_abs_diff(a.as_slice(), b.as_slice()) / max_abs(a.as_slice());
        assert!(rel < 6e-5, "{kind}: {rel:e}");
    }
}
