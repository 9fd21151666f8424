mod common;

use common::*;
use ctrecon::covariance::{estimate, CovarianceKind, CovarianceModel};
use ctrecon::reconcile::{
    IterativeReconciler, NonNeg, PartlyBottomUp, ProjectionReconciler, Reconciler, StructuralReconciler, ITE_MAX_ITER,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn projection_structural_and_kkt_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..12 {
        let s = random_structure(&mut rng);
        assert!(s.n() <= 7 && s.m() <= 12);
        let panel = random_panel(&mut rng, &s, 3 * s.dim());
        let c = s.c_ct().to_dense::<f64>();
        for kind in CovarianceKind::CROSS_TEMPORAL {
            let omega = estimate(kind, &panel, &s).unwrap();
            let proj = ProjectionReconciler::new(&s, &omega).unwrap();
            let stru = StructuralReconciler::new(&s, &omega).unwrap();
            let dense = omega.to_dense();
            for _ in 0..3 {
                let base = random_base(&mut rng, &s, 3.0);
                let a = proj.reconcile(&base).unwrap().y;
                let b = stru.reconcile(&base).unwrap().y;
                let k = kkt(&dense, &c, &base);
                let d = max_abs_diff(a.as_slice(), b.as_slice())
                    .max(max_abs_diff(a.as_slice(), k.as_slice()))
                    .max(max_abs_diff(b.as_slice(), k.as_slice()));
                assert!(d < 1e-8, "{kind} on n={}, m={}: {d:e}", s.n(), s.m());
                worst = worst.max(d);
            }
        }
    }
    assert!(worst < 1e-8);
}

#[test]
fn identity_weights_remove_the_orthogonal_component() {
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let omega = CovarianceModel::identity(s.dim());
    let proj = ProjectionReconciler::new(&s, &omega).unwrap();
    let stru = StructuralReconciler::new(&s, &omega).unwrap();
    let b = normals(&mut rng, s.bottom_dim());
    let coherent = s.aggregate(&b).unwrap();
    let w = normals(&mut rng, s.c_ct().nrows());
    let perturbed = &coherent + s.c_ct().tr_mul_vec(&w).unwrap();
    let a = proj.reconcile(perturbed.as_slice()).unwrap().y;
    let g = stru.reconcile(perturbed.as_slice()).unwrap().y;
    assert!(max_abs_diff(a.as_slice(), coherent.as_slice()) < 1e-10);
    assert!(max_abs_diff(g.as_slice(), a.as_slice()) < 1e-8);
}

#[test]
fn huge_variance_row_is_effectively_ignored() {
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = s.c_ct().to_dense::<f64>();
    let d: Vec<f64> = (0..s.dim()).map(|_| 0.5 + rng_unit(&mut rng)).collect();
    // series X (index 0) at the top temporal slot
    let target = s.index(0, 0);
    let mut big = d.clone();
    big[target] *= 1e8;
    let omega = CovarianceModel {
        structure: ctrecon::covariance::CovStructure::Diagonal(DVector::from_vec(big)),
        ..CovarianceModel::identity(s.dim())
    };
    let mut w = DMatrix::from_diagonal(&DVector::from_iterator(s.dim(), d.iter().map(|v| 1.0 / v)));
    w[(target, target)] = 0.0;
    for _ in 0..20 {
        let base = random_base(&mut rng, &s, 4.0);
        let y = StructuralReconciler::new(&s, &omega)
            .unwrap()
            .reconcile(&base)
            .unwrap()
            .y;
        let dropped = kkt_weighted(&w, &c, &base);
        let rel = max_abs_diff(y.as_slice(), dropped.as_slice()) / max_abs(dropped.as_slice());
        assert!(rel < 1e-4, "relative difference {rel:e}");
    }
}

fn rng_unit(rng: &mut ChaCha8Rng) -> f64 {
    rand::Rng::random::<f64>(rng)
}

#[test]
fn pbu_matches_slotwise_cross_sectional_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..8 {
        let s = random_structure(&mut rng);
        let panel = random_panel(&mut rng, &s, 2 * s.dim());
        let shr = estimate(CovarianceKind::ShrCs, &panel, &s).unwrap();
        let pbu = PartlyBottomUp::new(&s, &shr).unwrap();
        let c_cs = s.c_cs().to_dense::<f64>();
        let w_dense = shr.to_dense();
        let n_a = s.n_a();
        let hf0 = s.temporal().k_star();
        let base = random_base(&mut rng, &s, 2.0);
        let mut bottom = Vec::with_capacity(s.bottom_dim());
        for tau in 0..s.m() {
            let slot = &base[s.slot_indices(hf0 + tau)];
            let rec = kkt(&w_dense, &c_cs, slot);
            bottom.extend_from_slice(&rec.as_slice()[n_a..]);
        }
        let expected = s.aggregate(&bottom).unwrap();
        let got = pbu.reconcile(&base).unwrap().y;
        assert!(max_abs_diff(got.as_slice(), expected.as_slice()) < 1e-8);
    }
}

#[test]
fn pbu_with_identity_on_coherent_slot_is_bottom_up() {
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pbu = PartlyBottomUp::new(&s, &CovarianceModel::identity(s.n())).unwrap();
    let coherent = s.aggregate(&normals(&mut rng, s.bottom_dim())).unwrap();
    let mut base = coherent.as_slice().to_vec();
    // perturb only the temporal uppers; the high-frequency block stays coherent
    for t in 0..s.temporal().k_star() {
        for j in s.slot_indices(t) {
            base[j] += normal(&mut rng);
        }
    }
    let got = pbu.reconcile(&base).unwrap().y;
    assert!(max_abs_diff(got.as_slice(), coherent.as_slice()) < 1e-10);
}

fn ite_for(s: &ctrecon::hierarchy::CrossTemporalStructure, rng: &mut ChaCha8Rng) -> IterativeReconciler<f64> {
    let panel = random_panel(rng, s, 2 * s.dim());
    let acov = estimate(CovarianceKind::Acov, &panel, s).unwrap();
    let shr = estimate(CovarianceKind::ShrCs, &panel, s).unwrap();
    IterativeReconciler::from_models(s, &acov, &shr, 1e-10, ITE_MAX_ITER).unwrap()
}

#[test]
fn ite_is_coherent_over_200_trials() {
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ite = ite_for(&s, &mut rng);
    for _ in 0..200 {
        let base = random_base(&mut rng, &s, 5.0);
        let r = ite.reconcile(&base).unwrap();
        assert!(coherent_within(&s, r.y.as_slice(), 1e-8));
    }
}

#[test]
fn ite_discrepancy_is_non_increasing() {
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..20 {
        let ite = ite_for(&s, &mut rng);
        let r = ite.reconcile(&random_base(&mut rng, &s, 5.0)).unwrap();
        let h = &r.diagnostics.discrepancy_history;
        assert!(!h.is_empty());
        assert!(h.windows(2).all(|w| w[1] <= w[0]), "{h:?}");
        assert_eq!(r.diagnostics.converged, Some(true));
    }
}

#[test]
fn ite_per_level_blocks_stay_coherent() {
    // bdshr blocks give each level its own cross-sectional metric
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let panel = random_panel(&mut rng, &s, 2 * s.dim());
    let acov = estimate(CovarianceKind::Acov, &panel, &s).unwrap();
    let bdshr = estimate(CovarianceKind::Bdshr, &panel, &s).unwrap();
    let ite = IterativeReconciler::from_models(&s, &acov, &bdshr, 1e-6, ITE_MAX_ITER).unwrap();
    for _ in 0..50 {
        let r = ite.reconcile(&random_base(&mut rng, &s, 5.0)).unwrap();
        assert!(coherent_within(&s, r.y.as_slice(), 1e-8));
    }
}

#[test]
fn sntz_is_nonnegative_and_coherent_over_500_trials() {
    let s = small();
    let mut rng = ChaCha8Rng::seed_from_u64(89);
    let panel = random_panel(&mut rng, &s, 2 * s.dim());
    let reconcilers = [
        Reconciler::Projection(
            ProjectionReconciler::new(&s, &estimate(CovarianceKind::Acov, &panel, &s).unwrap()).unwrap(),
        ),
        Reconciler::Structural(
            StructuralReconciler::new(&s, &estimate(CovarianceKind::Wlsv, &panel, &s).unwrap()).unwrap(),
        ),
        Reconciler::PartlyBottomUp(
            PartlyBottomUp::new(&s, &estimate(CovarianceKind::ShrCs, &panel, &s).unwrap()).unwrap(),
        ),
    ];
    for t in 0..500 {
        let r = &reconcilers[t % reconcilers.len()];
        // centred near zero so that negatives are common
        let base: Vec<f64> = random_base(&mut rng, &s, 3.0)
            .iter()
            .map(|v| v - 10.0 * s.dim() as f64 / 36.0)
            .collect();
        let out = r.reconcile(&base, NonNeg::Sntz).unwrap();
        assert!(out.y.iter().all(|v| *v >= 0.0));
        assert!(coherent_within(&s, out.y.as_slice(), 1e-8));
    }
}

#[test]
fn sntz_leaves_nonnegative_output_alone() {
    let s = small();
    let r = Reconciler::<f64>::BottomUp(s.clone());
    let base: Vec<f64> = (0..s.dim()).map(|j| 1.0 + j as f64).collect();
    let plain = r.reconcile(&base, NonNeg::None).unwrap();
    let clamped = r.reconcile(&base, NonNeg::Sntz).unwrap();
    assert_eq!(plain.y, clamped.y);
    assert_eq!(clamped.diagnostics.negatives_clamped, 0);
}
