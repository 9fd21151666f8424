mod common;

use common::*;
use ctrecon::covariance::{estimate, CovarianceKind};
use ctrecon::hierarchy::{CrossSectionalHierarchy, CrossTemporalStructure, TemporalSpec};
use ctrecon::reconcile::{NonNeg, ProjectionReconciler, Reconciler, StructuralReconciler};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn three_bottom() -> CrossTemporalStructure {
    let cs = CrossSectionalHierarchy::from_groups(
        vec!["a".into(), "b".into(), "c".into()],
        &[("ab".into(), vec!["a".into(), "b".into()])],
    )
    .unwrap();
    CrossTemporalStructure::new(cs, TemporalSpec::new(4, vec![4, 2, 1]).unwrap())
}

fn reconciler(s: &CrossTemporalStructure, kind: CovarianceKind, seed: u64) -> Reconciler<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let panel = random_panel(&mut rng, s, 2 * s.dim());
    let omega = estimate(kind, &panel, s).unwrap();
    if seed.is_multiple_of(2) {
        Reconciler::Projection(ProjectionReconciler::new(s, &omega).unwrap())
    } else {
        Reconciler::Structural(StructuralReconciler::new(s, &omega).unwrap())
    }
}

fn kind_strategy() -> impl Strategy<Value = CovarianceKind> {
    prop::sample::select(CovarianceKind::CROSS_TEMPORAL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn output_is_coherent(kind in kind_strategy(), seed in 0u64..1000, base in prop::collection::vec(-50.0f64..150.0, 36)) {
        let s = small();
        let y = reconciler(&s, kind, seed).reconcile(&base, NonNeg::None).unwrap().y;
        prop_assert!(coherent_within(&s, y.as_slice(), 1e-8));
    }

    #[test]
    fn reconciliation_is_idempotent(kind in kind_strategy(), seed in 0u64..1000, base in prop::collection::vec(-50.0f64..150.0, 36)) {
        let s = small();
        let r = reconciler(&s, kind, seed);
        let once = r.reconcile(&base, NonNeg::None).unwrap().y;
        let twice = r.reconcile(once.as_slice(), NonNeg::None).unwrap().y;
        prop_assert!(max_abs_diff(once.as_slice(), twice.as_slice()) <= 1e-9 * max_abs(once.as_slice()).max(1.0));
    }

    #[test]
    fn coherent_input_is_fixed(kind in kind_strategy(), seed in 0u64..1000, b in prop::collection::vec(0.0f64..100.0, 12)) {
        // M S = S
        let s = small();
        let y = s.aggregate(&b).unwrap();
        let out = reconciler(&s, kind, seed).reconcile(y.as_slice(), NonNeg::None).unwrap().y;
        prop_assert!(max_abs_diff(out.as_slice(), y.as_slice()) <= 1e-9 * max_abs(y.as_slice()).max(1.0));
    }

    #[test]
    fn relabelling_bottoms_permutes_the_output(
        kind in prop::sample::select(vec![CovarianceKind::Ols, CovarianceKind::Str]),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        base in prop::collection::vec(-50.0f64..150.0, 5 * 7),
    ) {
        let s = three_bottom();
        let cs = s.cross_sectional().clone();
        let p = CrossTemporalStructure::new(cs.permute_bottom(&perm).unwrap(), s.temporal().clone());
        let n_a = s.n_a();
        let old_of = |i: usize| if i < n_a { i } else { n_a + perm[i - n_a] };
        let permuted: Vec<f64> = (0..p.dim()).map(|j| base[(j / s.n()) * s.n() + old_of(j % s.n())]).collect();
        let r = reconciler(&s, kind, 0).reconcile(&base, NonNeg::None).unwrap().y;
        let rp = reconciler(&p, kind, 0).reconcile(&permuted, NonNeg::None).unwrap().y;
        for j in 0..p.dim() {
            let o = (j / s.n()) * s.n() + old_of(j % s.n());
            prop_assert!((rp[j] - r[o]).abs() <= 1e-9 * max_abs(r.as_slice()).max(1.0));
        }
    }

    #[test]
    fn bottom_up_keeps_high_frequency_bottoms(base in prop::collection::vec(-50.0f64..150.0, 36)) {
        let s = small();
        let y = Reconciler::BottomUp(s.clone()).reconcile(&base, NonNeg::None).unwrap().y;
        prop_assert_eq!(s.bottom_hf(y.as_slice()).unwrap(), s.bottom_hf(&base).unwrap());
        prop_assert!(coherent_within(&s, y.as_slice(), 1e-12));
    }
}
