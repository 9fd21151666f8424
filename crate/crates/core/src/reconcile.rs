//! Mapping incoherent base forecasts onto the coherent subspace.
//!
//! All reconcilers precompute their factorizations once and can then be
//! applied to any number of stacked base vectors (one per forecast origin).

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::{CovStructure, CovarianceModel, OmegaFactor};
use crate::error::{check_dim, Error, Result};
use crate::hierarchy::CrossTemporalStructure;
use crate::linalg::SpdFactor;
use crate::scalar::{max_abs, Scalar};
use crate::sparse::IntMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// `ỹ = ŷ − ΩC'(CΩC')⁻¹Cŷ`.
    Projection,
    /// `ỹ = S(S'Ω⁻¹S)⁻¹S'Ω⁻¹ŷ`.
    Structural,
    BottomUp,
    /// Cross-sectional reconciliation of the high-frequency block, then temporal bottom-up.
    PartlyBottomUp,
    /// Alternating temporal and cross-sectional reconciliation.
    Iterative,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Projection => "ct_projection",
            Method::Structural => "ct_structural",
            Method::BottomUp => "ct_bu",
            Method::PartlyBottomUp => "pbu",
            Method::Iterative => "ite",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Non-negativity handling applied after reconciliation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum NonNeg {
    #[default]
    None,
    /// Set negative high-frequency bottom values to zero, then re-aggregate.
    Sntz,
}

impl FromStr for NonNeg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NonNeg::None),
            "sntz" => Ok(NonNeg::Sntz),
            other => Err(Error::InvalidInput(format!("unknown non-negativity mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics<T: Scalar> {
    /// `‖C_ct ỹ‖∞`.
    pub coherence_residual: T,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    /// Relative temporal discrepancy after each iteration.
    pub discrepancy_history: Vec<T>,
    /// Whether the closing projection onto the coherent subspace was applied.
    pub cleanup_applied: bool,
    pub negatives_clamped: usize,
}

impl<T: Scalar> Diagnostics<T> {
    fn plain(coherence_residual: T) -> Self {
        Self {
            coherence_residual,
            iterations: None,
            converged: None,
            discrepancy_history: Vec::new(),
            cleanup_applied: false,
            negatives_clamped: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconciledResult<T: Scalar> {
    pub y: DVector<T>,
    pub diagnostics: Diagnostics<T>,
}

impl<T: Scalar> ReconciledResult<T> {
    /// `‖C ỹ‖∞ ≤ tol·max(1, ‖ỹ‖∞)`.
    pub fn is_coherent(&self) -> bool {
        self.diagnostics.coherence_residual <= T::coherence_tol() * T::one().max(max_abs(self.y.as_slice()))
    }
}

fn check_base<T: Scalar>(structure: &CrossTemporalStructure, base: &[T]) -> Result<()> {
    check_dim("base forecast vector", structure.dim(), base.len())?;
    if base.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("base forecast vector".into()));
    }
    Ok(())
}

fn finish<T: Scalar>(structure: &CrossTemporalStructure, y: DVector<T>) -> Result<ReconciledResult<T>> {
    let r = structure.coherence_residual(y.as_slice())?;
    Ok(ReconciledResult {
        y,
        diagnostics: Diagnostics::plain(r),
    })
}

/// Oblique projection onto the nullspace of a constraint matrix `C` in the
/// `Ω⁻¹` metric: `y ↦ y − ΩC'(CΩC')⁻¹Cy`.
#[derive(Debug, Clone)]
pub struct ConstraintProjector<T: Scalar> {
    c: IntMatrix,
    omega_ct: DMatrix<T>,
    factor: Option<SpdFactor<T>>,
}

impl<T: Scalar> ConstraintProjector<T> {
    pub fn new(c: &IntMatrix, omega: &CovStructure<T>) -> Result<Self> {
        check_dim("covariance order", c.ncols(), omega.dim())?;
        if c.nrows() == 0 {
            return Ok(Self {
                c: c.clone(),
                omega_ct: DMatrix::zeros(c.ncols(), 0),
                factor: None,
            });
        }
        let ct = c.transpose().to_dense::<T>();
        let omega_ct = omega.mul_mat(&ct);
        let mut coc = c.mul_dense(&omega_ct)?;
        // symmetrize against round-off before factorizing
        let coc_t = coc.transpose();
        coc += coc_t;
        coc *= T::of(0.5);
        let factor = SpdFactor::new(coc, "C Ω C'")?;
        if factor.jitter() > T::zero() {
            warn!("C Ω C' needed diagonal jitter {}", factor.jitter());
        }
        Ok(Self {
            c: c.clone(),
            omega_ct,
            factor: Some(factor),
        })
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    pub fn project(&self, y: &[T]) -> Result<DVector<T>> {
        check_dim("projected vector", self.dim(), y.len())?;
        let y = DVector::from_column_slice(y);
        match &self.factor {
            None => Ok(y),
            Some(f) => {
                let z = f.solve_vec(&self.c.mul_vec(y.as_slice())?);
                Ok(y - &self.omega_ct * z)
            }
        }
    }
}

/// Cross-temporal projection reconciliation.
#[derive(Debug, Clone)]
pub struct ProjectionReconciler<T: Scalar> {
    structure: CrossTemporalStructure,
    projector: ConstraintProjector<T>,
}

impl<T: Scalar> ProjectionReconciler<T> {
    pub fn new(structure: &CrossTemporalStructure, omega: &CovarianceModel<T>) -> Result<Self> {
        check_dim("covariance order", structure.dim(), omega.dim())?;
        Ok(Self {
            structure: structure.clone(),
            projector: ConstraintProjector::new(structure.c_ct(), &omega.structure)?,
        })
    }

    pub fn reconcile(&self, base: &[T]) -> Result<ReconciledResult<T>> {
        check_base(&self.structure, base)?;
        finish(&self.structure, self.projector.project(base)?)
    }
}

/// Cross-temporal structural (GLS) reconciliation.
#[derive(Debug, Clone)]
pub struct StructuralReconciler<T: Scalar> {
    structure: CrossTemporalStructure,
    /// `Ω⁻¹ S`.
    omega_inv_s: DMatrix<T>,
    /// Factor of `S'Ω⁻¹S`.
    gram: SpdFactor<T>,
}

impl<T: Scalar> StructuralReconciler<T> {
    pub fn new(structure: &CrossTemporalStructure, omega: &CovarianceModel<T>) -> Result<Self> {
        check_dim("covariance order", structure.dim(), omega.dim())?;
        let factor: OmegaFactor<T> = omega.structure.factorize()?;
        let s = structure.s_ct().to_dense::<T>();
        let omega_inv_s = factor.solve_mat(&s);
        let mut gram = s.tr_mul(&omega_inv_s);
        let gram_t = gram.transpose();
        gram += gram_t;
        gram *= T::of(0.5);
        Ok(Self {
            structure: structure.clone(),
            omega_inv_s,
            gram: SpdFactor::new(gram, "S' Ω⁻¹ S")?,
        })
    }

    /// `G_ct ŷ`: the reconciled high-frequency bottom vector.
    pub fn bottom(&self, base: &[T]) -> Result<DVector<T>> {
        check_base(&self.structure, base)?;
        let rhs = self.omega_inv_s.tr_mul(&DVector::from_column_slice(base));
        Ok(self.gram.solve_vec(&rhs))
    }

    pub fn reconcile(&self, base: &[T]) -> Result<ReconciledResult<T>> {
        let b = self.bottom(base)?;
        finish(&self.structure, self.structure.aggregate(b.as_slice())?)
    }
}

/// `ỹ = S_ct b̂^[1]`, ignoring every base forecast above the high-frequency bottom block.
pub fn reconcile_bottom_up<T: Scalar>(structure: &CrossTemporalStructure, base: &[T]) -> Result<ReconciledResult<T>> {
    check_base(structure, base)?;
    let b = structure.bottom_hf(base)?;
    finish(structure, structure.aggregate(b.as_slice())?)
}

/// Partly bottom-up: `ỹ = S_ct (G_cs ⊗ G_te(bu)) ŷ`.
#[derive(Debug, Clone)]
pub struct PartlyBottomUp<T: Scalar> {
    structure: CrossTemporalStructure,
    /// `G_cs = (S'W⁻¹S)⁻¹ S'W⁻¹`, `n_b × n`.
    g_cs: DMatrix<T>,
}

impl<T: Scalar> PartlyBottomUp<T> {
    /// `w` is the `n × n` cross-sectional covariance (e.g. `shr_cs`).
    pub fn new(structure: &CrossTemporalStructure, w: &CovarianceModel<T>) -> Result<Self> {
        check_dim("cross-sectional covariance order", structure.n(), w.dim())?;
        let factor = w.structure.factorize()?;
        let s = structure.s_cs().to_dense::<T>();
        let w_inv_s = factor.solve_mat(&s);
        let gram = SpdFactor::new(s.tr_mul(&w_inv_s), "S_cs' W⁻¹ S_cs")?;
        let g_cs = gram.solve_mat(&w_inv_s.transpose());
        Ok(Self {
            structure: structure.clone(),
            g_cs,
        })
    }

    /// Replaces `G_cs` by bottom selection, which reduces to plain bottom-up.
    pub fn bottom_selection(structure: &CrossTemporalStructure) -> Self {
        let (n_a, n_b) = (structure.n_a(), structure.n_b());
        let g_cs = DMatrix::from_fn(n_b, n_a + n_b, |r, c| if c == n_a + r { T::one() } else { T::zero() });
        Self {
            structure: structure.clone(),
            g_cs,
        }
    }

    pub fn g_cs(&self) -> &DMatrix<T> {
        &self.g_cs
    }

    pub fn reconcile(&self, base: &[T]) -> Result<ReconciledResult<T>> {
        let s = &self.structure;
        check_base(s, base)?;
        let hf0 = s.temporal().k_star();
        let mut b = Vec::with_capacity(s.bottom_dim());
        for tau in 0..s.m() {
            let slot = DVector::from_column_slice(&base[s.slot_indices(hf0 + tau)]);
            b.extend((&self.g_cs * slot).iter().copied());
        }
        finish(s, s.aggregate(&b)?)
    }
}

/// Defaults for the iterative reconciler.
pub const ITE_TOL: f64 = 1e-6;
pub const ITE_MAX_ITER: usize = 100;

/// Iterative temporal-then-cross-sectional reconciliation.
#[derive(Debug, Clone)]
pub struct IterativeReconciler<T: Scalar> {
    structure: CrossTemporalStructure,
    temporal: Vec<ConstraintProjector<T>>,
    cross_sectional: Vec<ConstraintProjector<T>>,
    cleanup: ConstraintProjector<T>,
    tol: T,
    max_iter: usize,
}

impl<T: Scalar> IterativeReconciler<T> {
    /// `te_blocks[i]` is the `m* × m*` temporal covariance of series `i`;
    /// `cs_blocks[l]` is the `n × n` cross-sectional covariance at level `l`.
    pub fn new(
        structure: &CrossTemporalStructure,
        te_blocks: &[DMatrix<T>],
        cs_blocks: &[DMatrix<T>],
        tol: T,
        max_iter: usize,
    ) -> Result<Self> {
        check_dim("temporal covariance blocks", structure.n(), te_blocks.len())?;
        check_dim(
            "cross-sectional covariance blocks",
            structure.temporal().p(),
            cs_blocks.len(),
        )?;
        if max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be positive".into()));
        }
        let temporal = te_blocks
            .iter()
            .map(|b| ConstraintProjector::new(structure.c_te(), &CovStructure::Full(b.clone())))
            .collect::<Result<_>>()?;
        let cross_sectional = cs_blocks
            .iter()
            .map(|b| ConstraintProjector::new(structure.c_cs(), &CovStructure::Full(b.clone())))
            .collect::<Result<_>>()?;
        let cleanup = ConstraintProjector::new(structure.c_ct(), &CovStructure::Identity(structure.dim()))?;
        Ok(Self {
            structure: structure.clone(),
            temporal,
            cross_sectional,
            cleanup,
            tol,
            max_iter,
        })
    }

    /// Takes the per-series blocks of an `acov` model. `cs` is either an
    /// `n × n` model shared by every slot or a model with one block per level.
    pub fn from_models(
        structure: &CrossTemporalStructure,
        acov: &CovarianceModel<T>,
        cs: &CovarianceModel<T>,
        tol: T,
        max_iter: usize,
    ) -> Result<Self> {
        let te_blocks = (0..structure.n())
            .map(|i| block_at(acov, &structure.series_indices(i)))
            .collect::<Result<Vec<_>>>()?;
        let te = structure.temporal();
        let cs_blocks = (0..te.p())
            .map(|l| {
                if cs.dim() == structure.n() {
                    return Ok(cs.structure.to_dense());
                }
                let idx: Vec<usize> = structure.slot_indices(te.level_offset(l)).collect();
                block_at(cs, &idx)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(structure, &te_blocks, &cs_blocks, tol, max_iter)
    }

    pub fn reconcile(&self, base: &[T]) -> Result<ReconciledResult<T>> {
        let s = &self.structure;
        check_base(s, base)?;
        let te = s.temporal();
        let slot_level = te.slot_levels();
        let mut y = DVector::from_column_slice(base);
        let mut history = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut best: Option<(T, DVector<T>)> = None;
        for _ in 0..self.max_iter {
            iterations += 1;
            for (i, proj) in self.temporal.iter().enumerate() {
                let idx = s.series_indices(i);
                let yi: Vec<T> = idx.iter().map(|&j| y[j]).collect();
                let yi = proj.project(&yi)?;
                for (a, &j) in idx.iter().enumerate() {
                    y[j] = yi[a];
                }
            }
            for (t, &l) in slot_level.iter().enumerate() {
                let r = s.slot_indices(t);
                let yt = self.cross_sectional[l].project(&y.as_slice()[r.clone()])?;
                y.rows_mut(r.start, r.len()).copy_from(&yt);
            }
            let d = self.temporal_discrepancy(&y)?;
            history.push(d);
            if d <= self.tol {
                converged = true;
                break;
            }
            if !d.is_finite_value() {
                break;
            }
            if best.as_ref().is_none_or(|(b, _)| d < *b) {
                best = Some((d, y.clone()));
            }
        }
        if !converged {
            // The alternation is not a contraction when the two metrics
            // disagree strongly, so fall back to the closest iterate seen.
            if let Some((d, yb)) = best {
                y = yb;
                warn!(
                    "iterative reconciliation did not converge in {iterations} iterations; \
                     keeping the iterate with discrepancy {d}"
                );
            } else {
                y = DVector::from_column_slice(base);
                warn!("iterative reconciliation diverged at the first iteration; starting cleanup from the base");
            }
        }
        let mut cleanup_applied = false;
        if s.coherence_residual(y.as_slice())? > T::zero() {
            y = self.cleanup.project(y.as_slice())?;
            cleanup_applied = true;
            debug!("iterative reconciliation: closing projection applied");
        }
        let r = s.coherence_residual(y.as_slice())?;
        Ok(ReconciledResult {
            y,
            diagnostics: Diagnostics {
                coherence_residual: r,
                iterations: Some(iterations),
                converged: Some(converged),
                discrepancy_history: history,
                cleanup_applied,
                negatives_clamped: 0,
            },
        })
    }

    /// `max_i ‖C_te y_i‖∞ / max(1, ‖y_i‖∞)` over series stacks `y_i`.
    fn temporal_discrepancy(&self, y: &DVector<T>) -> Result<T> {
        let s = &self.structure;
        let mut worst = T::zero();
        for i in 0..s.n() {
            let yi: Vec<T> = s.series_indices(i).into_iter().map(|j| y[j]).collect();
            let d = max_abs(s.c_te().mul_vec(&yi)?.as_slice());
            worst = worst.max(d / T::one().max(max_abs(&yi)));
        }
        Ok(worst)
    }
}

fn block_at<T: Scalar>(model: &CovarianceModel<T>, idx: &[usize]) -> Result<DMatrix<T>> {
    match &model.structure {
        CovStructure::BlockDiagonal { blocks, .. } => blocks
            .iter()
            .find(|b| b.indices == idx)
            .map(|b| b.matrix.clone())
            .ok_or_else(|| Error::InvalidInput(format!("{} model has no block on the requested indices", model.kind))),
        other => {
            let dense = other.to_dense();
            Ok(DMatrix::from_fn(idx.len(), idx.len(), |a, b| dense[(idx[a], idx[b])]))
        }
    }
}

/// Clamps negative high-frequency bottom values to zero and re-aggregates.
pub fn apply_sntz<T: Scalar>(
    result: ReconciledResult<T>,
    structure: &CrossTemporalStructure,
) -> Result<ReconciledResult<T>> {
    let mut b = structure.bottom_hf(result.y.as_slice())?;
    let mut clamped = 0;
    for v in b.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
            clamped += 1;
        }
    }
    if clamped == 0 && result.y.iter().all(|v| *v >= T::zero()) {
        return Ok(result);
    }
    let y = structure.aggregate(b.as_slice())?;
    let mut diagnostics = result.diagnostics;
    diagnostics.coherence_residual = structure.coherence_residual(y.as_slice())?;
    diagnostics.negatives_clamped = clamped;
    Ok(ReconciledResult { y, diagnostics })
}

/// Elementwise `max(0, ·)`.
pub fn clamp_nonneg<T: Scalar>(values: &mut [T]) {
    for v in values {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// A ready-to-apply reconciliation procedure.
#[derive(Debug, Clone)]
pub enum Reconciler<T: Scalar> {
    Projection(ProjectionReconciler<T>),
    Structural(StructuralReconciler<T>),
    BottomUp(CrossTemporalStructure),
    PartlyBottomUp(PartlyBottomUp<T>),
    Iterative(IterativeReconciler<T>),
}

impl<T: Scalar> Reconciler<T> {
    pub fn method(&self) -> Method {
        match self {
            Reconciler::Projection(_) => Method::Projection,
            Reconciler::Structural(_) => Method::Structural,
            Reconciler::BottomUp(_) => Method::BottomUp,
            Reconciler::PartlyBottomUp(_) => Method::PartlyBottomUp,
            Reconciler::Iterative(_) => Method::Iterative,
        }
    }

    fn structure(&self) -> &CrossTemporalStructure {
        match self {
            Reconciler::Projection(r) => &r.structure,
            Reconciler::Structural(r) => &r.structure,
            Reconciler::BottomUp(s) => s,
            Reconciler::PartlyBottomUp(r) => &r.structure,
            Reconciler::Iterative(r) => &r.structure,
        }
    }

    pub fn reconcile(&self, base: &[T], nonneg: NonNeg) -> Result<ReconciledResult<T>> {
        let out = match self {
            Reconciler::Projection(r) => r.reconcile(base)?,
            Reconciler::Structural(r) => r.reconcile(base)?,
            Reconciler::BottomUp(s) => reconcile_bottom_up(s, base)?,
            Reconciler::PartlyBottomUp(r) => r.reconcile(base)?,
            Reconciler::Iterative(r) => r.reconcile(base)?,
        };
        match nonneg {
            NonNeg::None => Ok(out),
            NonNeg::Sntz => apply_sntz(out, self.structure()),
        }
    }

    /// Reconciles one base vector per origin, sharing all factorizations.
    pub fn reconcile_batch(&self, bases: &[Vec<T>], nonneg: NonNeg) -> Result<Vec<ReconciledResult<T>>> {
        bases.par_iter().map(|b| self.reconcile(b, nonneg)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{estimate, CovarianceKind, ErrorPanel, ErrorSource};
    use crate::hierarchy::{two_series_example, TemporalSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> CrossTemporalStructure {
        CrossTemporalStructure::new(two_series_example(), TemporalSpec::new(6, vec![6, 3, 2, 1]).unwrap())
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    }

    #[test]
    fn bottom_up_ignores_uppers() {
        let s = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut base = rand_vec(&mut rng, s.dim());
        let b = s.bottom_hf(&base).unwrap();
        let r1 = reconcile_bottom_up(&s, &base).unwrap();
        base[0] = 1e6;
        base[5] = -3e3;
        let r2 = reconcile_bottom_up(&s, &base).unwrap();
        assert_eq!(r1.y, r2.y);
        assert_eq!(r1.y, s.aggregate(b.as_slice()).unwrap());
        let twice = reconcile_bottom_up(&s, r1.y.as_slice()).unwrap();
        assert_eq!(twice.y, r1.y);
    }

    #[test]
    fn bottom_up_ones_give_total_twelve() {
        let s = small();
        let mut base = vec![0.0; s.dim()];
        for t in 6..12 {
            for i in 1..3 {
                base[s.index(t, i)] = 1.0;
            }
        }
        let r = reconcile_bottom_up(&s, &base).unwrap();
        assert_eq!(r.y[0], 12.0);
    }

    #[test]
    fn projection_removes_orthogonal_component() {
        let s = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = rand_vec(&mut rng, s.bottom_dim());
        let w = rand_vec(&mut rng, s.c_ct().nrows());
        let coherent = s.aggregate(&b).unwrap();
        let perturb = s.c_ct().tr_mul_vec(&w).unwrap();
        let base = &coherent + perturb;
        let r = ProjectionReconciler::new(&s, &CovarianceModel::identity(s.dim()))
            .unwrap()
            .reconcile(base.as_slice())
            .unwrap();
        assert!((r.y - coherent).amax() < 1e-10);
    }

    #[test]
    fn sntz_clamps_and_reaggregates() {
        let s = small();
        let mut b = vec![1.0; s.bottom_dim()];
        b[0] = -1.0;
        b[1] = 2.0;
        let y = s.aggregate(&b).unwrap();
        let r = finish(&s, y).unwrap();
        let out = apply_sntz(r, &s).unwrap();
        let ob = s.bottom_hf(out.y.as_slice()).unwrap();
        assert_eq!(ob[0], 0.0);
        assert_eq!(ob[1], 2.0);
        assert_eq!(out.diagnostics.negatives_clamped, 1);
        // Total@k=6 = 0 + 2 + 10 ones
        assert_eq!(out.y[0], 12.0);
        assert!(out.y.iter().all(|v| *v >= 0.0));
        assert_eq!(s.coherence_residual(out.y.as_slice()).unwrap(), 0.0);
    }

    #[test]
    fn sntz_leaves_nonnegative_untouched() {
        let s = small();
        let y = s.aggregate(&vec![0.5; s.bottom_dim()]).unwrap();
        let r = finish(&s, y.clone()).unwrap();
        assert_eq!(apply_sntz(r, &s).unwrap().y, y);
    }

    #[test]
    fn clamp_base() {
        let mut v = vec![-5.0, 3.2, 0.0, -0.1];
        clamp_nonneg(&mut v);
        assert_eq!(v, vec![0.0, 3.2, 0.0, 0.0]);
    }

    #[test]
    fn ite_on_coherent_input_is_immediate() {
        let s = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = DMatrix::from_fn(40, s.dim(), |_, _| rng.random_range(-1.0..1.0));
        let p = ErrorPanel::new(ErrorSource::Validation, obs, &s).unwrap();
        let acov = estimate(CovarianceKind::Acov, &p, &s).unwrap();
        let bd = estimate(CovarianceKind::Bdshr, &p, &s).unwrap();
        let ite = IterativeReconciler::from_models(&s, &acov, &bd, ITE_TOL, ITE_MAX_ITER).unwrap();
        let b: Vec<f64> = (0..s.bottom_dim()).map(|i| i as f64).collect();
        let y = s.aggregate(&b).unwrap();
        let r = ite.reconcile(y.as_slice()).unwrap();
        assert_eq!(r.diagnostics.iterations, Some(1));
        assert_eq!(r.diagnostics.converged, Some(true));
        assert!((r.y - y).amax() < 1e-10);
    }

    #[test]
    fn ite_with_common_diagonal_metric_matches_projection() {
        // Both steps are orthogonal projections in the same metric, so the
        // alternation converges to the joint projection.
        let s = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let obs = DMatrix::from_fn(40, s.dim(), |_, _| rng.random_range(-1.0..1.0));
        let p = ErrorPanel::new(ErrorSource::Validation, obs, &s).unwrap();
        let wlsv = estimate(CovarianceKind::Wlsv, &p, &s).unwrap();
        let ite = IterativeReconciler::from_models(&s, &wlsv, &wlsv, 1e-12, 10_000).unwrap();
        let proj = ProjectionReconciler::new(&s, &wlsv).unwrap();
        let base = rand_vec(&mut rng, s.dim());
        let a = ite.reconcile(&base).unwrap();
        let b = proj.reconcile(&base).unwrap();
        assert!((a.y - b.y).amax() < 1e-8);
    }

    #[test]
    fn dimension_errors() {
        let s = small();
        assert!(reconcile_bottom_up(&s, &[1.0f64; 3]).is_err());
        let mut bad = vec![0.0f64; s.dim()];
        bad[4] = f64::INFINITY;
        assert!(matches!(reconcile_bottom_up(&s, &bad), Err(Error::NonFinite(_))));
        assert!(ProjectionReconciler::new(&s, &CovarianceModel::<f64>::identity(5)).is_err());
    }
}
