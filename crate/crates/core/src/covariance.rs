//! Error panels and the structured covariance approximations used to weight
//! reconciliation.
//!
//! Second moments are computed about zero with divisor `N` (forecast errors
//! are not re-centered), so every estimator shares the same small-sample
//! convention. Diagonal entries below `1e-10 × mean diagonal` are floored.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::hierarchy::{CrossTemporalStructure, TemporalSpec};
use crate::linalg::SpdFactor;
use crate::scalar::Scalar;

/// Relative floor applied to degenerate variances.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Where the error observations came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorSource {
    InSample,
    Validation,
}

impl ErrorSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorSource::InSample => "in_sample",
            ErrorSource::Validation => "validation",
        }
    }
}

impl fmt::Display for ErrorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_sample" | "insample" | "in-sample" => Ok(ErrorSource::InSample),
            "validation" => Ok(ErrorSource::Validation),
            other => Err(Error::InvalidInput(format!("unknown error source '{other}'"))),
        }
    }
}

/// Multivariate error observations, one full cross-temporal stack per row.
#[derive(Debug, Clone)]
pub struct ErrorPanel<T: Scalar> {
    source: ErrorSource,
    n: usize,
    temporal: TemporalSpec,
    obs: DMatrix<T>,
}

impl<T: Scalar> ErrorPanel<T> {
    pub fn new(source: ErrorSource, obs: DMatrix<T>, structure: &CrossTemporalStructure) -> Result<Self> {
        check_dim("error panel columns", structure.dim(), obs.ncols())?;
        if obs.nrows() == 0 {
            return Err(Error::InsufficientData("error panel has no observations".into()));
        }
        if let Some(p) = obs.iter().position(|v| !v.is_finite_value()) {
            let (r, c) = (p % obs.nrows(), p / obs.nrows());
            return Err(Error::NonFinite(format!("error panel row {r}, column {c}")));
        }
        Ok(Self {
            source,
            n: structure.n(),
            temporal: structure.temporal().clone(),
            obs,
        })
    }

    pub fn from_rows(source: ErrorSource, rows: &[Vec<T>], structure: &CrossTemporalStructure) -> Result<Self> {
        let dim = structure.dim();
        for r in rows {
            check_dim("error panel row", dim, r.len())?;
        }
        let obs = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(source, obs, structure)
    }

    pub fn source(&self) -> ErrorSource {
        self.source
    }

    pub fn n_obs(&self) -> usize {
        self.obs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.obs.ncols()
    }

    pub fn observations(&self) -> &DMatrix<T> {
        &self.obs
    }

    /// `(N_obs·M_k) × n` errors at temporal level `level_idx`, rows ordered by
    /// observation then slot.
    pub fn per_level_view(&self, level_idx: usize) -> DMatrix<T> {
        let k = self.temporal.factors()[level_idx];
        let slots = self.temporal.slots(k);
        let off = self.temporal.level_offset(level_idx);
        let n = self.n;
        DMatrix::from_fn(self.n_obs() * slots, n, |r, i| {
            let (o, t) = (r / slots, r % slots);
            self.obs[(o, (off + t) * n + i)]
        })
    }

    /// `N_obs × m*` errors of one series across its temporal stack.
    pub fn series_stack(&self, series: usize) -> DMatrix<T> {
        let n = self.n;
        DMatrix::from_fn(self.n_obs(), self.temporal.m_star(), |o, t| {
            self.obs[(o, t * n + series)]
        })
    }

    /// Writes the panel with a header naming `series|k<k>|<slot>` per column.
    pub fn write_csv<W: Write>(&self, w: W, structure: &CrossTemporalStructure) -> Result<()> {
        check_dim("error panel columns", structure.dim(), self.dim())?;
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["obs".to_string()];
        header.extend(column_names(structure));
        wtr.write_record(&header)?;
        for r in 0..self.n_obs() {
            let mut rec = vec![r.to_string()];
            rec.extend((0..self.dim()).map(|c| format!("{:e}", self.obs[(r, c)].as_f64())));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("error panel csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, source: ErrorSource, structure: &CrossTemporalStructure) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let expected = column_names(structure);
        if header.len() != expected.len() + 1 || header.iter().skip(1).zip(&expected).any(|(a, b)| a != b) {
            return Err(Error::Misaligned(
                "error panel header does not match the cross-temporal layout".into(),
            ));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map(T::of)
                        .map_err(|_| Error::InvalidInput(format!("unparseable error value '{s}'")))
                })
                .collect::<Result<Vec<T>>>()?;
            rows.push(row);
        }
        Self::from_rows(source, &rows, structure)
    }
}

fn column_names(structure: &CrossTemporalStructure) -> Vec<String> {
    structure
        .entry_labels()
        .into_iter()
        .map(|(s, k, t)| format!("{s}|k{k}|{t}"))
        .collect()
}

/// Which approximation of the cross-temporal covariance to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovarianceKind {
    Ols,
    Str,
    Wlsv,
    Acov,
    Bdshr,
    /// `n × n` shrunk covariance of high-frequency errors.
    ShrCs,
}

impl CovarianceKind {
    pub const CROSS_TEMPORAL: [CovarianceKind; 5] = [
        CovarianceKind::Ols,
        CovarianceKind::Str,
        CovarianceKind::Wlsv,
        CovarianceKind::Acov,
        CovarianceKind::Bdshr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CovarianceKind::Ols => "ols",
            CovarianceKind::Str => "str",
            CovarianceKind::Wlsv => "wlsv",
            CovarianceKind::Acov => "acov",
            CovarianceKind::Bdshr => "bdshr",
            CovarianceKind::ShrCs => "shr_cs",
        }
    }

    pub fn needs_errors(self) -> bool {
        !matches!(self, CovarianceKind::Ols | CovarianceKind::Str)
    }
}

impl fmt::Display for CovarianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CovarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ols" => CovarianceKind::Ols,
            "str" => CovarianceKind::Str,
            "wlsv" => CovarianceKind::Wlsv,
            "acov" => CovarianceKind::Acov,
            "bdshr" => CovarianceKind::Bdshr,
            "shr_cs" | "shr" => CovarianceKind::ShrCs,
            other => return Err(Error::InvalidInput(format!("unknown covariance kind '{other}'"))),
        })
    }
}

/// A dense block placed on a subset of indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub indices: Vec<usize>,
    pub matrix: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CovStructure<T: Scalar> {
    Identity(usize),
    Diagonal(DVector<T>),
    /// Blocks partition `0..dim`; entries between blocks are zero.
    BlockDiagonal {
        dim: usize,
        blocks: Vec<Block<T>>,
    },
    Full(DMatrix<T>),
}

impl<T: Scalar> CovStructure<T> {
    pub fn dim(&self) -> usize {
        match self {
            CovStructure::Identity(d) => *d,
            CovStructure::Diagonal(v) => v.len(),
            CovStructure::BlockDiagonal { dim, .. } => *dim,
            CovStructure::Full(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        match self {
            CovStructure::Identity(d) => DMatrix::identity(*d, *d),
            CovStructure::Diagonal(v) => DMatrix::from_diagonal(v),
            CovStructure::BlockDiagonal { dim, blocks } => {
                let mut out = DMatrix::zeros(*dim, *dim);
                for b in blocks {
                    for (a, &i) in b.indices.iter().enumerate() {
                        for (c, &j) in b.indices.iter().enumerate() {
                            out[(i, j)] = b.matrix[(a, c)];
                        }
                    }
                }
                out
            }
            CovStructure::Full(m) => m.clone(),
        }
    }

    pub fn diagonal(&self) -> DVector<T> {
        match self {
            CovStructure::Identity(d) => DVector::from_element(*d, T::one()),
            CovStructure::Diagonal(v) => v.clone(),
            CovStructure::BlockDiagonal { dim, blocks } => {
                let mut out = DVector::zeros(*dim);
                for b in blocks {
                    for (a, &i) in b.indices.iter().enumerate() {
                        out[i] = b.matrix[(a, a)];
                    }
                }
                out
            }
            CovStructure::Full(m) => m.diagonal(),
        }
    }

    /// `Ω x`.
    pub fn mul_vec(&self, x: &DVector<T>) -> DVector<T> {
        match self {
            CovStructure::Identity(_) => x.clone(),
            CovStructure::Diagonal(v) => v.component_mul(x),
            CovStructure::BlockDiagonal { dim, blocks } => {
                let mut out = DVector::zeros(*dim);
                for b in blocks {
                    let xb = DVector::from_iterator(b.indices.len(), b.indices.iter().map(|&i| x[i]));
                    let yb = &b.matrix * xb;
                    for (a, &i) in b.indices.iter().enumerate() {
                        out[i] = yb[a];
                    }
                }
                out
            }
            CovStructure::Full(m) => m * x,
        }
    }

    /// `Ω X`.
    pub fn mul_mat(&self, x: &DMatrix<T>) -> DMatrix<T> {
        match self {
            CovStructure::Identity(_) => x.clone(),
            CovStructure::Diagonal(v) => {
                let mut out = x.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= v[i];
                }
                out
            }
            CovStructure::BlockDiagonal { dim, blocks } => {
                let mut out = DMatrix::zeros(*dim, x.ncols());
                for b in blocks {
                    let xb = x.select_rows(b.indices.iter());
                    let yb = &b.matrix * xb;
                    for (a, &i) in b.indices.iter().enumerate() {
                        out.set_row(i, &yb.row(a));
                    }
                }
                out
            }
            CovStructure::Full(m) => m * x,
        }
    }

    /// Factorizes block by block so that `Ω⁻¹` can be applied.
    pub fn factorize(&self) -> Result<OmegaFactor<T>> {
        let inner = match self {
            CovStructure::Identity(d) => FactorInner::Identity(*d),
            CovStructure::Diagonal(v) => {
                if let Some(i) = v.iter().position(|x| *x <= T::zero() || !x.is_finite_value()) {
                    return Err(Error::NotPositiveDefinite {
                        what: format!("diagonal covariance (entry {i} = {})", v[i]),
                        condition: f64::INFINITY,
                    });
                }
                FactorInner::Diagonal(v.map(|x| T::one() / x))
            }
            CovStructure::BlockDiagonal { dim, blocks } => FactorInner::Blocks {
                dim: *dim,
                blocks: blocks
                    .iter()
                    .map(|b| Ok((b.indices.clone(), SpdFactor::new(b.matrix.clone(), "covariance block")?)))
                    .collect::<Result<_>>()?,
            },
            CovStructure::Full(m) => FactorInner::Full(SpdFactor::new(m.clone(), "covariance matrix")?),
        };
        Ok(OmegaFactor { inner })
    }
}

/// Ready-to-apply `Ω⁻¹`.
#[derive(Debug, Clone)]
pub struct OmegaFactor<T: Scalar> {
    inner: FactorInner<T>,
}

#[derive(Debug, Clone)]
enum FactorInner<T: Scalar> {
    Identity(usize),
    Diagonal(DVector<T>),
    Blocks {
        dim: usize,
        blocks: Vec<(Vec<usize>, SpdFactor<T>)>,
    },
    Full(SpdFactor<T>),
}

impl<T: Scalar> OmegaFactor<T> {
    pub fn dim(&self) -> usize {
        match &self.inner {
            FactorInner::Identity(d) => *d,
            FactorInner::Diagonal(v) => v.len(),
            FactorInner::Blocks { dim, .. } => *dim,
            FactorInner::Full(f) => f.dim(),
        }
    }

    /// `Ω⁻¹ x`.
    pub fn solve_vec(&self, x: &DVector<T>) -> DVector<T> {
        match &self.inner {
            FactorInner::Identity(_) => x.clone(),
            FactorInner::Diagonal(inv) => inv.component_mul(x),
            FactorInner::Blocks { dim, blocks } => {
                let mut out = DVector::zeros(*dim);
                for (idx, f) in blocks {
                    let xb = DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i]));
                    let yb = f.solve_vec(&xb);
                    for (a, &i) in idx.iter().enumerate() {
                        out[i] = yb[a];
                    }
                }
                out
            }
            FactorInner::Full(f) => f.solve_vec(x),
        }
    }

    /// `Ω⁻¹ X`.
    pub fn solve_mat(&self, x: &DMatrix<T>) -> DMatrix<T> {
        match &self.inner {
            FactorInner::Identity(_) => x.clone(),
            FactorInner::Diagonal(inv) => {
                let mut out = x.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= inv[i];
                }
                out
            }
            FactorInner::Blocks { dim, blocks } => {
                let mut out = DMatrix::zeros(*dim, x.ncols());
                for (idx, f) in blocks {
                    let xb = x.select_rows(idx.iter());
                    let yb = f.solve_mat(&xb);
                    for (a, &i) in idx.iter().enumerate() {
                        out.set_row(i, &yb.row(a));
                    }
                }
                out
            }
            FactorInner::Full(f) => f.solve_mat(x),
        }
    }
}

/// A covariance approximation together with how it was obtained.
#[derive(Debug, Clone)]
pub struct CovarianceModel<T: Scalar> {
    pub kind: CovarianceKind,
    pub structure: CovStructure<T>,
    /// Shrinkage intensities, one per shrunk block (empty when none applied).
    pub lambdas: Vec<T>,
    pub source: Option<ErrorSource>,
    /// Number of diagonal entries raised to the variance floor.
    pub floored: usize,
}

impl<T: Scalar> CovarianceModel<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: CovarianceKind::Ols,
            structure: CovStructure::Identity(dim),
            lambdas: Vec::new(),
            source: None,
            floored: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.structure.dim()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        self.structure.to_dense()
    }

    /// Mean shrinkage intensity across shrunk blocks.
    pub fn shrink_lambda(&self) -> Option<T> {
        if self.lambdas.is_empty() {
            None
        } else {
            Some(self.lambdas.iter().fold(T::zero(), |a, l| a + *l) / T::from_count(self.lambdas.len()))
        }
    }

    /// Successful Cholesky factorization of every block, without jitter.
    pub fn is_positive_definite(&self) -> bool {
        match &self.structure {
            CovStructure::Identity(_) => true,
            CovStructure::Diagonal(v) => v.iter().all(|x| *x > T::zero()),
            CovStructure::BlockDiagonal { blocks, .. } => {
                blocks.iter().all(|b| crate::linalg::is_positive_definite(&b.matrix))
            }
            CovStructure::Full(m) => crate::linalg::is_positive_definite(m),
        }
    }
}

/// Knobs for [`estimate_with`].
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions<T: Scalar> {
    /// Overrides the data-driven shrinkage intensity for `bdshr` and `shr_cs`.
    pub force_lambda: Option<T>,
}

impl<T: Scalar> Default for EstimateOptions<T> {
    fn default() -> Self {
        Self { force_lambda: None }
    }
}

pub fn estimate<T: Scalar>(
    kind: CovarianceKind,
    panel: &ErrorPanel<T>,
    structure: &CrossTemporalStructure,
) -> Result<CovarianceModel<T>> {
    estimate_with(kind, panel, structure, &EstimateOptions::default())
}

pub fn estimate_with<T: Scalar>(
    kind: CovarianceKind,
    panel: &ErrorPanel<T>,
    structure: &CrossTemporalStructure,
    opts: &EstimateOptions<T>,
) -> Result<CovarianceModel<T>> {
    check_dim("error panel columns", structure.dim(), panel.dim())?;
    if let Some(l) = opts.force_lambda {
        if !(l >= T::zero() && l <= T::one()) {
            return Err(Error::InvalidInput(format!("forced shrinkage {l} outside [0, 1]")));
        }
    }
    let dim = structure.dim();
    let source = Some(panel.source());
    if kind.needs_errors() && panel.n_obs() < 2 {
        return Err(Error::InsufficientData(format!(
            "{kind} needs at least 2 error observations, got {}",
            panel.n_obs()
        )));
    }
    let model = |structure, lambdas, floored| CovarianceModel {
        kind,
        structure,
        lambdas,
        source,
        floored,
    };
    match kind {
        CovarianceKind::Ols => Ok(model(CovStructure::Identity(dim), Vec::new(), 0)),
        CovarianceKind::Str => {
            let d = DVector::from_iterator(dim, structure.s_ct().row_sums().into_iter().map(T::from_int));
            Ok(model(CovStructure::Diagonal(d), Vec::new(), 0))
        }
        CovarianceKind::Wlsv => {
            let lv = LevelVariances::new(panel, structure);
            let d = DVector::from_iterator(
                dim,
                structure
                    .temporal()
                    .slot_levels()
                    .into_iter()
                    .flat_map(|l| lv.var[l].clone()),
            );
            Ok(model(CovStructure::Diagonal(d), Vec::new(), lv.floored))
        }
        CovarianceKind::Acov => estimate_acov(panel, structure, source),
        CovarianceKind::Bdshr => estimate_bdshr(panel, structure, opts, source),
        CovarianceKind::ShrCs => {
            let floor = LevelVariances::new(panel, structure).floor;
            let last = structure.temporal().p() - 1;
            let view = panel.per_level_view(last);
            let sh = shrink_regularized(&view, floor, opts.force_lambda)?;
            Ok(model(CovStructure::Full(sh.cov), vec![sh.lambda], sh.floored))
        }
    }
}

/// Pooled second moments per `(level, series)` and the panel-wide floor.
struct LevelVariances<T: Scalar> {
    var: Vec<Vec<T>>,
    floor: T,
    floored: usize,
}

impl<T: Scalar> LevelVariances<T> {
    fn new(panel: &ErrorPanel<T>, structure: &CrossTemporalStructure) -> Self {
        let te = structure.temporal();
        let n = structure.n();
        let mut var: Vec<Vec<T>> = (0..te.p())
            .map(|l| {
                let v = panel.per_level_view(l);
                let rows = T::from_count(v.nrows());
                (0..n).map(|i| v.column(i).norm_squared() / rows).collect()
            })
            .collect();
        let total = te.factors().iter().zip(&var).fold(T::zero(), |acc, (k, vs)| {
            acc + vs.iter().fold(T::zero(), |a, v| a + *v) * T::from_count(te.slots(*k))
        });
        let floor = variance_floor(total / T::from_count(structure.dim()));
        let mut floored = 0;
        for vs in &mut var {
            for v in vs.iter_mut() {
                if *v < floor {
                    *v = floor;
                    floored += 1;
                }
            }
        }
        if floored > 0 {
            warn!("{floored} degenerate (series, level) variances floored at {floor}");
        }
        Self { var, floor, floored }
    }
}

fn variance_floor<T: Scalar>(mean_diag: T) -> T {
    let f = T::of(VARIANCE_FLOOR) * mean_diag;
    if f > T::zero() {
        f
    } else {
        T::of(VARIANCE_FLOOR)
    }
}

fn estimate_acov<T: Scalar>(
    panel: &ErrorPanel<T>,
    structure: &CrossTemporalStructure,
    source: Option<ErrorSource>,
) -> Result<CovarianceModel<T>> {
    let lv = LevelVariances::new(panel, structure);
    let te = structure.temporal();
    let level_of = te.slot_levels();
    let m_star = te.m_star();
    let must_shrink = panel.n_obs() <= m_star;
    if must_shrink {
        warn!(
            "acov: {} observations for {m_star}-dimensional blocks; shrinking auto-correlations",
            panel.n_obs()
        );
    }
    let mut blocks = Vec::with_capacity(structure.n());
    let mut lambdas = Vec::new();
    for i in 0..structure.n() {
        let x = panel.series_stack(i);
        let mut mom = second_moment(&x);
        floor_diagonal(&mut mom, lv.floor);
        let corr = to_correlation(&mom);
        let lambda = if must_shrink {
            shrinkage_intensity(&x, &mom)
        } else {
            T::zero()
        };
        let (corr, lambda) = regularize_correlation(&corr, lambda, "acov block")?;
        if must_shrink || lambda > T::zero() {
            lambdas.push(lambda);
        }
        let sd: Vec<T> = level_of.iter().map(|&l| lv.var[l][i].sqrt()).collect();
        let block = DMatrix::from_fn(m_star, m_star, |a, b| sd[a] * corr[(a, b)] * sd[b]);
        blocks.push(Block {
            indices: structure.series_indices(i),
            matrix: block,
        });
    }
    Ok(CovarianceModel {
        kind: CovarianceKind::Acov,
        structure: CovStructure::BlockDiagonal {
            dim: structure.dim(),
            blocks,
        },
        lambdas,
        source,
        floored: lv.floored,
    })
}

fn estimate_bdshr<T: Scalar>(
    panel: &ErrorPanel<T>,
    structure: &CrossTemporalStructure,
    opts: &EstimateOptions<T>,
    source: Option<ErrorSource>,
) -> Result<CovarianceModel<T>> {
    let lv = LevelVariances::new(panel, structure);
    let te = structure.temporal();
    let mut blocks = Vec::new();
    let mut lambdas = Vec::with_capacity(te.p());
    let mut floored = 0;
    for (l, &k) in te.factors().iter().enumerate() {
        let view = panel.per_level_view(l);
        let sh = shrink_regularized(&view, lv.floor, opts.force_lambda)?;
        floored += sh.floored * te.slots(k);
        lambdas.push(sh.lambda);
        let off = te.level_offset(l);
        for t in 0..te.slots(k) {
            blocks.push(Block {
                indices: structure.slot_indices(off + t).collect(),
                matrix: sh.cov.clone(),
            });
        }
    }
    Ok(CovarianceModel {
        kind: CovarianceKind::Bdshr,
        structure: CovStructure::BlockDiagonal {
            dim: structure.dim(),
            blocks,
        },
        lambdas,
        source,
        floored,
    })
}

/// Result of shrinking a sample covariance toward its diagonal.
#[derive(Debug, Clone)]
pub struct Shrunk<T: Scalar> {
    pub cov: DMatrix<T>,
    pub lambda: T,
    pub floored: usize,
}

/// `Xᵀ X / N`.
pub fn second_moment<T: Scalar>(x: &DMatrix<T>) -> DMatrix<T> {
    x.tr_mul(x) / T::from_count(x.nrows().max(1))
}

/// `λ·diag(S) + (1−λ)·S`.
pub fn shrink_toward_diagonal<T: Scalar>(cov: &DMatrix<T>, lambda: T) -> DMatrix<T> {
    let keep = T::one() - lambda;
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        if i == j {
            cov[(i, j)]
        } else {
            keep * cov[(i, j)]
        }
    })
}

/// Optimal intensity for shrinking `cov` (the second moment of `x`) toward
/// its diagonal, computed on standardized errors and clipped to `[0, 1]`.
///
/// `λ = Σ_{i≠j} Var(r_ij) / Σ_{i≠j} r_ij²`. A matrix with no off-diagonal
/// mass returns 1.
pub fn shrinkage_intensity<T: Scalar>(x: &DMatrix<T>, cov: &DMatrix<T>) -> T {
    let (nobs, d) = x.shape();
    if d < 2 || nobs < 2 {
        return T::one();
    }
    let sd: Vec<T> = (0..d).map(|j| cov[(j, j)].sqrt()).collect();
    let xs = DMatrix::from_fn(nobs, d, |r, c| x[(r, c)] / sd[c]);
    let xs2 = xs.map(|v| v * v);
    let nf = T::from_count(nobs);
    let cross = xs.tr_mul(&xs);
    let cross2 = xs2.tr_mul(&xs2);
    let scale = T::one() / (nf * (nf - T::one()));
    let mut num = T::zero();
    let mut den = T::zero();
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            let v = scale * (cross2[(i, j)] - cross[(i, j)] * cross[(i, j)] / nf);
            num += v;
            let r = cov[(i, j)] / (sd[i] * sd[j]);
            den += r * r;
        }
    }
    if den <= T::zero() || !den.is_finite_value() {
        return T::one();
    }
    (num / den).max(T::zero()).min(T::one())
}

/// Shrinks the second moment of `x` toward its diagonal.
///
/// Variances below `1e-10 × mean variance` are floored first.
pub fn shrink<T: Scalar>(x: &DMatrix<T>) -> Result<Shrunk<T>> {
    if x.nrows() < 2 {
        return Err(Error::InsufficientData(format!(
            "shrinkage needs at least 2 observations, got {}",
            x.nrows()
        )));
    }
    let mom = second_moment(x);
    let mean = mom.diagonal().sum() / T::from_count(mom.nrows().max(1));
    shrink_regularized(x, variance_floor(mean), None)
}

/// Floors, shrinks, and then raises `λ` until the result factorizes.
fn shrink_regularized<T: Scalar>(x: &DMatrix<T>, floor: T, force: Option<T>) -> Result<Shrunk<T>> {
    if x.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("shrinkage input".into()));
    }
    let mut mom = second_moment(x);
    let floored = floor_diagonal(&mut mom, floor);
    if let Some(l) = force {
        return Ok(Shrunk {
            cov: shrink_toward_diagonal(&mom, l),
            lambda: l,
            floored,
        });
    }
    let lambda = shrinkage_intensity(x, &mom);
    let corr = to_correlation(&mom);
    let (_, lambda) = regularize_correlation(&corr, lambda, "shrunk covariance")?;
    Ok(Shrunk {
        cov: shrink_toward_diagonal(&mom, lambda),
        lambda,
        floored,
    })
}

fn floor_diagonal<T: Scalar>(m: &mut DMatrix<T>, floor: T) -> usize {
    let mut count = 0;
    for i in 0..m.nrows() {
        if m[(i, i)] < floor {
            m[(i, i)] = floor;
            count += 1;
        }
    }
    count
}

fn to_correlation<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let sd: Vec<T> = (0..m.nrows()).map(|i| m[(i, i)].sqrt()).collect();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i == j {
            T::one()
        } else {
            m[(i, j)] / (sd[i] * sd[j])
        }
    })
}

/// Shrinks a correlation matrix toward the identity by `λ`, doubling `λ`
/// (from at least `1e-8`) until a Cholesky factorization succeeds.
fn regularize_correlation<T: Scalar>(corr: &DMatrix<T>, lambda: T, what: &str) -> Result<(DMatrix<T>, T)> {
    let mut lambda = lambda;
    loop {
        let c = shrink_toward_diagonal(corr, lambda);
        if crate::linalg::is_positive_definite(&c) {
            return Ok((c, lambda));
        }
        if lambda >= T::one() {
            return Err(Error::NotPositiveDefinite {
                what: what.to_string(),
                condition: crate::linalg::condition_estimate(corr),
            });
        }
        let next = (lambda * T::of(2.0)).max(T::of(1e-8)).min(T::one());
        debug!("{what}: raising shrinkage from {lambda} to {next} for positive definiteness");
        lambda = next;
    }
}

/// In-sample one-step residuals (fitted minus actual) stacked per cycle.
///
/// `fitted[i][l]` and `actuals[i][l]` hold level `l` of series `i` over the
/// same `T/k` steps. Rows cover the longest run of complete cycles where
/// every model has a fitted value, so the panel has at most `T/m` rows.
pub fn collect_insample_residuals<T: Scalar>(
    fitted: &[Vec<Vec<Option<T>>>],
    actuals: &[Vec<Vec<T>>],
    structure: &CrossTemporalStructure,
) -> Result<ErrorPanel<T>> {
    let te = structure.temporal();
    let n = structure.n();
    check_dim("fitted series", n, fitted.len())?;
    check_dim("actual series", n, actuals.len())?;
    let labels = structure.cross_sectional().labels();
    let mut cycles = usize::MAX;
    for i in 0..n {
        check_dim("fitted levels", te.p(), fitted[i].len())?;
        check_dim("actual levels", te.p(), actuals[i].len())?;
        for (l, &k) in te.factors().iter().enumerate() {
            if fitted[i][l].len() != actuals[i][l].len() {
                return Err(Error::Misaligned(format!(
                    "series '{}' level k={k}: {} fitted values for {} actuals",
                    labels[i],
                    fitted[i][l].len(),
                    actuals[i][l].len()
                )));
            }
            cycles = cycles.min(actuals[i][l].len() / te.slots(k));
        }
    }
    let complete = |c: usize| {
        (0..n).all(|i| {
            te.factors().iter().enumerate().all(|(l, &k)| {
                let s = te.slots(k);
                fitted[i][l][c * s..(c + 1) * s].iter().all(Option::is_some)
            })
        })
    };
    let first = (0..cycles).find(|&c| complete(c)).unwrap_or(cycles);
    let mut rows = Vec::new();
    for c in first..cycles {
        if !complete(c) {
            return Err(Error::Misaligned(format!(
                "fitted values missing inside the common span at cycle {c}"
            )));
        }
        let mut row = vec![T::zero(); structure.dim()];
        for (l, &k) in te.factors().iter().enumerate() {
            let s = te.slots(k);
            let off = te.level_offset(l);
            for i in 0..n {
                for t in 0..s {
                    let f = fitted[i][l][c * s + t].expect("checked complete");
                    row[(off + t) * n + i] = f - actuals[i][l][c * s + t];
                }
            }
        }
        rows.push(row);
    }
    if first > 0 {
        debug!("in-sample residuals: skipped {first} warm-up cycles");
    }
    ErrorPanel::from_rows(ErrorSource::InSample, &rows, structure)
}
