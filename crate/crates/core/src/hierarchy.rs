//! Cross-sectional, temporal and cross-temporal structural matrices.
//!
//! Every stacked vector in this crate uses one canonical ordering: the
//! temporal stack is listed level by level (descending aggregation order `k`,
//! chronological within a level) and each temporal slot holds all `n` series
//! in hierarchy order (upper series first, then bottom series). Entry
//! `(slot t, series i)` lives at index `t * n + i`, which makes
//! `S_ct = S_te ⊗ S_cs` hold literally.

use std::collections::{HashMap, HashSet};

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::scalar::{max_abs, Scalar};
use crate::sparse::IntMatrix;

/// Factor set aggregating 10-minute data up to 8 hours.
pub const STATISTICAL_FACTORS: [usize; 10] = [48, 24, 16, 12, 8, 6, 4, 3, 2, 1];
/// Factor set aggregating 10-minute data up to 1 hour.
pub const DECISION_FACTORS: [usize; 4] = [6, 3, 2, 1];

/// Label of the implicit root series.
pub const TOTAL: &str = "Total";

/// A grouped cross-sectional tree: upper series are sums of bottom series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossSectionalHierarchy {
    labels_upper: Vec<String>,
    labels_bottom: Vec<String>,
    agg: IntMatrix,
}

impl CrossSectionalHierarchy {
    /// Validates and wraps an `n_a × n_b` 0/1 aggregation matrix.
    ///
    /// The first upper row must sum every bottom series.
    pub fn new(labels_upper: Vec<String>, labels_bottom: Vec<String>, agg_rows: &[Vec<i64>]) -> Result<Self> {
        let n_a = labels_upper.len();
        let n_b = labels_bottom.len();
        if n_b == 0 {
            return Err(Error::InvalidHierarchy("no bottom series".into()));
        }
        // A lone series is its own total; otherwise a Total row is required.
        if n_a == 0 && n_b > 1 {
            return Err(Error::InvalidHierarchy(
                "no upper series (a Total row is required)".into(),
            ));
        }
        if agg_rows.len() != n_a {
            return Err(Error::InvalidHierarchy(format!(
                "aggregation matrix has {} rows for {} upper labels",
                agg_rows.len(),
                n_a
            )));
        }
        let mut seen = HashSet::new();
        for l in labels_upper.iter().chain(&labels_bottom) {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidHierarchy(format!("duplicate series label '{l}'")));
            }
        }
        for (r, row) in agg_rows.iter().enumerate() {
            if row.len() != n_b {
                return Err(Error::InvalidHierarchy(format!(
                    "row '{}' has {} entries, expected {n_b}",
                    labels_upper[r],
                    row.len()
                )));
            }
            if row.iter().any(|v| *v != 0 && *v != 1) {
                return Err(Error::InvalidHierarchy(format!(
                    "row '{}' has entries outside {{0,1}}",
                    labels_upper[r]
                )));
            }
            if row.iter().all(|v| *v == 0) {
                return Err(Error::InvalidHierarchy(format!(
                    "row '{}' aggregates no bottom series",
                    labels_upper[r]
                )));
            }
        }
        if n_a > 0 && agg_rows[0].iter().any(|v| *v != 1) {
            return Err(Error::InvalidHierarchy(format!(
                "first upper row '{}' must sum all bottom series",
                labels_upper[0]
            )));
        }
        Ok(Self {
            agg: IntMatrix::from_rows(n_b, agg_rows),
            labels_upper,
            labels_bottom,
        })
    }

    /// Builds `Total` plus one upper row per named group.
    pub fn from_groups(bottom: Vec<String>, groups: &[(String, Vec<String>)]) -> Result<Self> {
        let pos: HashMap<&str, usize> = bottom.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut upper = vec![TOTAL.to_string()];
        let mut rows = vec![vec![1; bottom.len()]];
        for (name, members) in groups {
            let mut row = vec![0; bottom.len()];
            for mem in members {
                let j = *pos.get(mem.as_str()).ok_or_else(|| {
                    Error::InvalidHierarchy(format!("group '{name}' references unknown series '{mem}'"))
                })?;
                row[j] = 1;
            }
            upper.push(name.clone());
            rows.push(row);
        }
        Self::new(upper, bottom, &rows)
    }

    pub fn n(&self) -> usize {
        self.n_a() + self.n_b()
    }

    pub fn n_a(&self) -> usize {
        self.labels_upper.len()
    }

    pub fn n_b(&self) -> usize {
        self.labels_bottom.len()
    }

    pub fn labels_upper(&self) -> &[String] {
        &self.labels_upper
    }

    pub fn labels_bottom(&self) -> &[String] {
        &self.labels_bottom
    }

    /// A single series with no aggregation constraints.
    pub fn single(label: impl Into<String>) -> Self {
        Self {
            labels_upper: Vec::new(),
            labels_bottom: vec![label.into()],
            agg: IntMatrix::zeros(0, 1),
        }
    }

    /// All labels in hierarchy order.
    pub fn labels(&self) -> Vec<String> {
        self.labels_upper.iter().chain(&self.labels_bottom).cloned().collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels_upper
            .iter()
            .chain(&self.labels_bottom)
            .position(|l| l == label)
    }

    /// `A_cs`.
    pub fn agg_matrix(&self) -> &IntMatrix {
        &self.agg
    }

    /// Bottom positions (0-based within the bottom block) aggregated by upper row `r`.
    pub fn members(&self, r: usize) -> Vec<usize> {
        self.agg.row(r).map(|(j, _)| j).collect()
    }

    /// Number of upper series each bottom series contributes to.
    pub fn ancestor_counts(&self) -> Vec<i64> {
        self.agg.col_sums()
    }

    /// `S_cs = [A_cs; I]`.
    pub fn summing_matrix(&self) -> IntMatrix {
        IntMatrix::vstack(&[&self.agg, &IntMatrix::identity(self.n_b())])
    }

    /// `C_cs = [I  −A_cs]`.
    pub fn constraint_matrix(&self) -> IntMatrix {
        IntMatrix::hstack(&[&IntMatrix::identity(self.n_a()), &self.agg.neg()])
    }

    /// `(S_cs, C_cs)`.
    pub fn matrices(&self) -> (IntMatrix, IntMatrix) {
        (self.summing_matrix(), self.constraint_matrix())
    }

    /// Reorders bottom series: new bottom `j` is old bottom `perm[j]`.
    pub fn permute_bottom(&self, perm: &[usize]) -> Result<Self> {
        check_dim("bottom permutation", self.n_b(), perm.len())?;
        let bottom = perm.iter().map(|&p| self.labels_bottom[p].clone()).collect();
        let rows: Vec<Vec<i64>> = self
            .agg
            .to_rows()
            .into_iter()
            .map(|r| perm.iter().map(|&p| r[p]).collect())
            .collect();
        Self::new(self.labels_upper.clone(), bottom, &rows)
    }
}

/// Temporal aggregation orders `K` over a cycle of `m` high-frequency steps.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TemporalSpec {
    m: usize,
    factors: Vec<usize>,
}

impl TemporalSpec {
    /// `factors` must be strictly descending divisors of `m` containing `m` and 1.
    pub fn new(m: usize, factors: Vec<usize>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidTemporal("m must be positive".into()));
        }
        if factors.first() != Some(&m) {
            return Err(Error::InvalidTemporal(format!("factor set must start with m = {m}")));
        }
        if factors.last() != Some(&1) {
            return Err(Error::InvalidTemporal("factor set must end with 1".into()));
        }
        if let Some(w) = factors.windows(2).find(|w| w[0] <= w[1]) {
            return Err(Error::InvalidTemporal(format!(
                "factors must be strictly descending ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(k) = factors.iter().find(|k| !m.is_multiple_of(**k)) {
            return Err(Error::InvalidTemporal(format!("{k} does not divide m = {m}")));
        }
        Ok(Self { m, factors })
    }

    /// `K_SB`, m = 48.
    pub fn statistical() -> Self {
        Self::new(48, STATISTICAL_FACTORS.to_vec()).expect("valid preset")
    }

    /// `K_DB`, m = 6.
    pub fn decision() -> Self {
        Self::new(6, DECISION_FACTORS.to_vec()).expect("valid preset")
    }

    /// Every divisor of `m`.
    pub fn all_divisors(m: usize) -> Result<Self> {
        let factors = (1..=m).rev().filter(|k| m.is_multiple_of(*k)).collect();
        Self::new(m, factors)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "statistical" => Ok(Self::statistical()),
            "decision" => Ok(Self::decision()),
            other => Err(Error::InvalidTemporal(format!("unknown preset '{other}'"))),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn p(&self) -> usize {
        self.factors.len()
    }

    /// `M_k = m / k`.
    pub fn slots(&self, k: usize) -> usize {
        self.m / k
    }

    /// `m* = Σ m/k`.
    pub fn m_star(&self) -> usize {
        self.factors.iter().map(|k| self.m / k).sum()
    }

    /// `k* = m* − m`.
    pub fn k_star(&self) -> usize {
        self.m_star() - self.m
    }

    /// Offset of level `level_idx` (position in `factors`) within the temporal stack.
    pub fn level_offset(&self, level_idx: usize) -> usize {
        self.factors[..level_idx].iter().map(|k| self.m / k).sum()
    }

    /// `(k, slot within level)` for each temporal stack position.
    pub fn stack_positions(&self) -> Vec<(usize, usize)> {
        self.factors
            .iter()
            .flat_map(|&k| (0..self.m / k).map(move |t| (k, t)))
            .collect()
    }

    /// Level index (position in `factors`) of each temporal stack position.
    pub fn slot_levels(&self) -> Vec<usize> {
        self.factors
            .iter()
            .enumerate()
            .flat_map(|(l, &k)| std::iter::repeat_n(l, self.m / k))
            .collect()
    }

    /// `A_te`: `k* × m`, rows ordered by descending k then chronologically.
    pub fn aggregation_matrix(&self) -> IntMatrix {
        let rows = self
            .factors
            .iter()
            .filter(|k| **k != 1)
            .flat_map(|&k| (0..self.m / k).map(move |t| (t * k..(t + 1) * k).map(|j| (j, 1)).collect()))
            .collect();
        IntMatrix::from_sparse_rows(self.m, rows)
    }

    /// `(A_te, S_te, C_te)` with `S_te = [A_te; I_m]` and `C_te = [I_k* −A_te]`.
    pub fn matrices(&self) -> (IntMatrix, IntMatrix, IntMatrix) {
        let a = self.aggregation_matrix();
        let s = IntMatrix::vstack(&[&a, &IntMatrix::identity(self.m)]);
        let c = IntMatrix::hstack(&[&IntMatrix::identity(self.k_star()), &a.neg()]);
        (a, s, c)
    }

    /// Temporal stack of a length-`m` high-frequency block, i.e. `S_te x`.
    pub fn aggregate_block<T: Scalar>(&self, x: &[T]) -> Result<Vec<T>> {
        check_dim("temporal block", self.m, x.len())?;
        Ok(self
            .factors
            .iter()
            .flat_map(|&k| x.chunks(k).map(|c| c.iter().fold(T::zero(), |a, v| a + *v)))
            .collect())
    }
}

/// All structural matrices of a cross-temporal hierarchy.
#[derive(Debug, Clone)]
pub struct CrossTemporalStructure {
    cs: CrossSectionalHierarchy,
    te: TemporalSpec,
    s_cs: IntMatrix,
    c_cs: IntMatrix,
    a_te: IntMatrix,
    s_te: IntMatrix,
    c_te: IntMatrix,
    s_ct: IntMatrix,
    c_ct: IntMatrix,
}

impl CrossTemporalStructure {
    /// `S_ct = S_te ⊗ S_cs`; `C_ct` stacks the cross-sectional constraints of
    /// every temporal slot over the temporal constraints of the bottom series.
    pub fn new(cs: CrossSectionalHierarchy, te: TemporalSpec) -> Self {
        let (s_cs, c_cs) = cs.matrices();
        let (a_te, s_te, c_te) = te.matrices();
        let s_ct = s_te.kron(&s_cs);
        let bottom_select = IntMatrix::hstack(&[&IntMatrix::zeros(cs.n_b(), cs.n_a()), &IntMatrix::identity(cs.n_b())]);
        let c_ct = IntMatrix::vstack(&[
            &IntMatrix::identity(te.m_star()).kron(&c_cs),
            &c_te.kron(&bottom_select),
        ]);
        Self {
            cs,
            te,
            s_cs,
            c_cs,
            a_te,
            s_te,
            c_te,
            s_ct,
            c_ct,
        }
    }

    pub fn cross_sectional(&self) -> &CrossSectionalHierarchy {
        &self.cs
    }

    pub fn temporal(&self) -> &TemporalSpec {
        &self.te
    }

    pub fn n(&self) -> usize {
        self.cs.n()
    }

    pub fn n_a(&self) -> usize {
        self.cs.n_a()
    }

    pub fn n_b(&self) -> usize {
        self.cs.n_b()
    }

    pub fn m(&self) -> usize {
        self.te.m()
    }

    pub fn m_star(&self) -> usize {
        self.te.m_star()
    }

    /// Length of a full stacked vector, `n·m*`.
    pub fn dim(&self) -> usize {
        self.n() * self.m_star()
    }

    /// Length of the high-frequency bottom vector, `n_b·m`.
    pub fn bottom_dim(&self) -> usize {
        self.n_b() * self.m()
    }

    pub fn s_cs(&self) -> &IntMatrix {
        &self.s_cs
    }

    pub fn c_cs(&self) -> &IntMatrix {
        &self.c_cs
    }

    pub fn a_te(&self) -> &IntMatrix {
        &self.a_te
    }

    pub fn s_te(&self) -> &IntMatrix {
        &self.s_te
    }

    pub fn c_te(&self) -> &IntMatrix {
        &self.c_te
    }

    pub fn s_ct(&self) -> &IntMatrix {
        &self.s_ct
    }

    pub fn c_ct(&self) -> &IntMatrix {
        &self.c_ct
    }

    /// Canonical index of `(temporal stack position, series)`.
    #[inline]
    pub fn index(&self, slot: usize, series: usize) -> usize {
        slot * self.n() + series
    }

    /// Canonical indices of one series across its whole temporal stack.
    pub fn series_indices(&self, series: usize) -> Vec<usize> {
        (0..self.m_star()).map(|t| self.index(t, series)).collect()
    }

    /// Canonical indices of the `n` series at one temporal stack position.
    pub fn slot_indices(&self, slot: usize) -> std::ops::Range<usize> {
        slot * self.n()..(slot + 1) * self.n()
    }

    /// `(series label, k, slot within level)` for every canonical index.
    pub fn entry_labels(&self) -> Vec<(String, usize, usize)> {
        let labels = self.cs.labels();
        self.te
            .stack_positions()
            .into_iter()
            .flat_map(|(k, t)| labels.iter().map(move |l| (l.clone(), k, t)))
            .collect()
    }

    /// Extracts `b^[1]` (ordered high-frequency step major, bottom series minor).
    pub fn bottom_hf<T: Scalar>(&self, y: &[T]) -> Result<DVector<T>> {
        check_dim("stacked vector", self.dim(), y.len())?;
        let hf0 = self.te.k_star();
        let (n, n_a, n_b) = (self.n(), self.n_a(), self.n_b());
        Ok(DVector::from_iterator(
            self.bottom_dim(),
            (0..self.m()).flat_map(|tau| (0..n_b).map(move |j| y[(hf0 + tau) * n + n_a + j])),
        ))
    }

    /// `S_ct b`.
    pub fn aggregate<T: Scalar>(&self, b: &[T]) -> Result<DVector<T>> {
        self.s_ct.mul_vec(b)
    }

    /// `‖C_ct y‖∞`.
    pub fn coherence_residual<T: Scalar>(&self, y: &[T]) -> Result<T> {
        check_dim("stacked vector", self.dim(), y.len())?;
        Ok(max_abs(self.c_ct.mul_vec(y)?.as_slice()))
    }

    /// True when `‖C_ct y‖∞ ≤ tol·max(1, ‖y‖∞)`.
    pub fn is_coherent<T: Scalar>(&self, y: &[T]) -> Result<bool> {
        let r = self.coherence_residual(y)?;
        Ok(r <= T::coherence_tol() * T::one().max(max_abs(y)))
    }
}

/// The two-turbine hierarchy `X = W + Z`.
pub fn two_series_example() -> CrossSectionalHierarchy {
    CrossSectionalHierarchy::new(vec!["X".into()], vec!["W".into(), "Z".into()], &[vec![1, 1]]).expect("valid example")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn te(m: usize, k: &[usize]) -> TemporalSpec {
        TemporalSpec::new(m, k.to_vec()).unwrap()
    }

    #[test]
    fn a_te_hourly_example() {
        let (a, s, c) = te(6, &[6, 3, 2, 1]).matrices();
        assert_eq!(
            a.to_rows(),
            vec![
                vec![1, 1, 1, 1, 1, 1],
                vec![1, 1, 1, 0, 0, 0],
                vec![0, 0, 0, 1, 1, 1],
                vec![1, 1, 0, 0, 0, 0],
                vec![0, 0, 1, 1, 0, 0],
                vec![0, 0, 0, 0, 1, 1],
            ]
        );
        assert_eq!((s.nrows(), s.ncols()), (12, 6));
        assert_eq!((c.nrows(), c.ncols()), (6, 12));
        assert!(c.matmul(&s).unwrap().is_zero());
    }

    #[test]
    fn a_te_m4() {
        let (a, _, _) = te(4, &[4, 2, 1]).matrices();
        assert_eq!(a.to_rows(), vec![vec![1, 1, 1, 1], vec![1, 1, 0, 0], vec![0, 0, 1, 1]]);
    }

    #[test]
    fn degenerate_single_level() {
        let t = te(1, &[1]);
        let (a, s, c) = t.matrices();
        assert_eq!((a.nrows(), a.ncols()), (0, 1));
        assert_eq!(s.to_rows(), vec![vec![1]]);
        assert_eq!(c.nrows(), 0);
        assert_eq!(t.k_star(), 0);
    }

    #[test]
    fn invalid_factor_sets() {
        assert!(matches!(
            TemporalSpec::new(6, vec![6, 4, 1]),
            Err(Error::InvalidTemporal(_))
        ));
        assert!(TemporalSpec::new(6, vec![6, 3, 2]).is_err());
        assert!(TemporalSpec::new(6, vec![3, 1]).is_err());
        assert!(TemporalSpec::new(6, vec![6, 2, 3, 1]).is_err());
        assert!(TemporalSpec::new(0, vec![1]).is_err());
    }

    #[test]
    fn presets() {
        let sb = TemporalSpec::statistical();
        assert_eq!(sb.m_star(), 124);
        assert_eq!(sb.k_star(), 76);
        let db = TemporalSpec::decision();
        assert_eq!((db.m_star(), db.k_star()), (12, 6));
        assert!(TemporalSpec::preset("weekly").is_err());
    }

    #[test]
    fn cross_sectional_example() {
        let h = two_series_example();
        let (s, c) = h.matrices();
        assert_eq!(s.to_rows(), vec![vec![1, 1], vec![1, 0], vec![0, 1]]);
        assert_eq!(c.to_rows(), vec![vec![1, -1, -1]]);
    }

    #[test]
    fn single_bottom() {
        let h = CrossSectionalHierarchy::new(vec!["T".into()], vec!["a".into()], &[vec![1]]).unwrap();
        assert_eq!(h.summing_matrix().to_rows(), vec![vec![1], vec![1]]);
    }

    #[test]
    fn zero_row_rejected() {
        let r = CrossSectionalHierarchy::new(
            vec!["T".into(), "G".into()],
            vec!["a".into(), "b".into()],
            &[vec![1, 1], vec![0, 0]],
        );
        assert!(matches!(r, Err(Error::InvalidHierarchy(_))));
        let r = CrossSectionalHierarchy::new(vec!["G".into()], vec!["a".into(), "b".into()], &[vec![1, 0]]);
        assert!(r.is_err(), "first row must be a Total");
    }

    #[test]
    fn cross_temporal_dims() {
        let s = CrossTemporalStructure::new(two_series_example(), te(6, &[6, 3, 2, 1]));
        assert_eq!((s.s_ct().nrows(), s.s_ct().ncols()), (36, 12));
        assert_eq!(s.c_ct().nrows(), 12 + 2 * 6);
        assert!(s.c_ct().matmul(s.s_ct()).unwrap().is_zero());
        let single = CrossTemporalStructure::new(CrossSectionalHierarchy::single("a"), te(1, &[1]));
        assert_eq!(single.s_ct().to_rows(), vec![vec![1]]);
        assert_eq!(single.c_ct().nrows(), 0);
    }

    #[test]
    fn unit_perturbation_imprint() {
        let s = CrossTemporalStructure::new(two_series_example(), te(6, &[6, 3, 2, 1]));
        let b: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 + 1.0).collect();
        let mut y = s.aggregate(&b).unwrap();
        assert_eq!(s.coherence_residual(y.as_slice()).unwrap(), 0.0);
        // e_1 is X at the k=6 slot; it appears only in that slot's cross-sectional row.
        y[0] += 1.0;
        let r = s.c_ct().mul_vec(y.as_slice()).unwrap();
        assert_eq!(r[0], 1.0);
        assert_eq!(r.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(s.coherence_residual(y.as_slice()).unwrap(), 1.0);
        assert!(s.coherence_residual(&[0.0f64; 5]).is_err());
    }

    #[test]
    fn bottom_roundtrip() {
        let s = CrossTemporalStructure::new(two_series_example(), te(4, &[4, 2, 1]));
        let b: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let y = s.aggregate(&b).unwrap();
        assert_eq!(s.bottom_hf(y.as_slice()).unwrap().as_slice(), b.as_slice());
    }

    #[test]
    fn groups_and_ancestors() {
        let bottom: Vec<String> = (1..=4).map(|i| format!("T{i}")).collect();
        let h = CrossSectionalHierarchy::from_groups(
            bottom,
            &[
                ("A".into(), vec!["T1".into(), "T2".into()]),
                ("B".into(), vec!["T3".into(), "T4".into()]),
            ],
        )
        .unwrap();
        assert_eq!(h.n_a(), 3);
        assert_eq!(h.ancestor_counts(), vec![2, 2, 2, 2]);
        assert!(CrossSectionalHierarchy::from_groups(vec!["a".into()], &[("G".into(), vec!["zz".into()])]).is_err());
    }
}
