//! Accuracy metrics, rank-based significance tests and decision-cost indices.

use std::io::Write;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF, Normal};

use crate::error::{check_dim, Error, Result};
use crate::forecast::ForecastSet;
use crate::scalar::Scalar;

/// Fixed-precision rendering used by every metric CSV.
pub fn format_metric(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.10e}")
    } else {
        String::new()
    }
}

/// Mean squared error over paired values.
pub fn mse<T: Scalar>(forecast: &[T], actual: &[T]) -> Result<T> {
    check_dim("actuals", forecast.len(), actual.len())?;
    if forecast.is_empty() {
        return Err(Error::InsufficientData("mse over an empty span".into()));
    }
    let mut acc = T::zero();
    for (f, a) in forecast.iter().zip(actual) {
        let d = *f - *a;
        acc += d * d;
    }
    Ok(acc / T::from_count(forecast.len()))
}

/// Geometric mean of positive values; `None` for an empty slice.
pub fn geometric_mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let s = values.iter().fold(T::zero(), |acc, v| acc + v.ln());
    Some((s / T::from_count(values.len())).exp())
}

/// Geometric mean of `mse[i] / benchmark[i]`.
///
/// Entries with a zero benchmark MSE are skipped with a warning; the count of
/// skipped entries is returned alongside the value.
pub fn avg_rel_mse<T: Scalar>(mse: &[T], benchmark: &[T]) -> Result<(T, usize)> {
    check_dim("benchmark MSEs", mse.len(), benchmark.len())?;
    let mut ratios = Vec::with_capacity(mse.len());
    let mut excluded = 0;
    for (m, b) in mse.iter().zip(benchmark) {
        if *b > T::zero() {
            ratios.push(*m / *b);
        } else {
            excluded += 1;
        }
    }
    if excluded > 0 {
        warn!("AvgRelMSE: {excluded} series with zero benchmark MSE excluded");
    }
    let g = geometric_mean(&ratios)
        .ok_or_else(|| Error::InsufficientData("no series with a positive benchmark MSE".into()))?;
    Ok((g, excluded))
}

/// Per-approach MSE and AvgRelMSE by temporal level, plus an "All" column.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub benchmark: String,
    pub approaches: Vec<String>,
    pub series: Vec<String>,
    /// Aggregation orders, in factor order.
    pub levels: Vec<usize>,
    pub level_minutes: Vec<i64>,
    /// `mse[approach][series][level]`.
    pub mse: Vec<Vec<Vec<f64>>>,
    /// `avg_rel[approach][level]`; the last column is "All".
    pub avg_rel: Vec<Vec<f64>>,
    /// `(series, level)` pairs dropped for a zero benchmark MSE.
    pub excluded: usize,
}

impl AccuracyTable {
    pub fn avg_rel_mse(&self, approach: &str, level: Option<usize>) -> Option<f64> {
        let a = self.approaches.iter().position(|x| x == approach)?;
        let col = match level {
            Some(k) => self.levels.iter().position(|x| *x == k)?,
            None => self.levels.len(),
        };
        Some(self.avg_rel[a][col])
    }

    /// Rows = approaches, columns = levels in minutes then `All`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["approach".to_string()];
        header.extend(self.level_minutes.iter().map(|m| m.to_string()));
        header.push("All".into());
        wtr.write_record(&header)?;
        for (a, name) in self.approaches.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.avg_rel[a].iter().map(|v| format_metric(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("accuracy csv", e))?;
        Ok(())
    }

    /// Long format `approach,series_id,level_k,mse`.
    pub fn write_mse_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["approach", "series_id", "level_k", "mse"])?;
        for (a, name) in self.approaches.iter().enumerate() {
            for (i, s) in self.series.iter().enumerate() {
                for (l, k) in self.levels.iter().enumerate() {
                    wtr.write_record([name.as_str(), s, &k.to_string(), &format_metric(self.mse[a][i][l])])?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("mse csv", e))?;
        Ok(())
    }
}

fn check_aligned(f: &ForecastSet, actuals: &ForecastSet) -> Result<()> {
    if f.origins != actuals.origins
        || f.series != actuals.series
        || f.horizon != actuals.horizon
        || f.temporal != actuals.temporal
    {
        return Err(Error::Misaligned(format!(
            "forecast set '{}' does not match the actuals",
            f.model
        )));
    }
    if !actuals.is_complete() {
        return Err(Error::MissingData("test actuals are incomplete".into()));
    }
    Ok(())
}

/// Scores every approach against the actuals, relative to `benchmark`.
pub fn accuracy_table(
    approaches: &[(String, &ForecastSet)],
    actuals: &ForecastSet,
    benchmark: &str,
    base_step_minutes: i64,
) -> Result<AccuracyTable> {
    let b = approaches
        .iter()
        .position(|(n, _)| n == benchmark)
        .ok_or_else(|| Error::InvalidInput(format!("benchmark '{benchmark}' not among the approaches")))?;
    if actuals.origins.is_empty() {
        return Err(Error::InsufficientData("empty test span".into()));
    }
    let te = &actuals.temporal;
    let (n, p) = (actuals.series.len(), te.p());
    let mse_all: Vec<Vec<Vec<f64>>> = approaches
        .par_iter()
        .map(|(_, f)| {
            check_aligned(f, actuals)?;
            (0..n)
                .map(|i| {
                    (0..p)
                        .map(|l| {
                            let mut fv = Vec::new();
                            let mut av = Vec::new();
                            for o in 0..actuals.origins.len() {
                                fv.extend_from_slice(f.values(o, i, l));
                                av.extend_from_slice(actuals.values(o, i, l));
                            }
                            mse(&fv, &av)
                        })
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut excluded = 0;
    let mut avg_rel = Vec::with_capacity(approaches.len());
    for mses in &mse_all {
        let mut row = Vec::with_capacity(p + 1);
        for l in 0..p {
            let m: Vec<f64> = (0..n).map(|i| mses[i][l]).collect();
            let bm: Vec<f64> = (0..n).map(|i| mse_all[b][i][l]).collect();
            row.push(avg_rel_mse(&m, &bm)?.0);
        }
        let m: Vec<f64> = mses.iter().flatten().copied().collect();
        let bm: Vec<f64> = mse_all[b].iter().flatten().copied().collect();
        let (all, ex) = avg_rel_mse(&m, &bm)?;
        excluded = ex;
        row.push(all);
        avg_rel.push(row);
    }
    Ok(AccuracyTable {
        benchmark: benchmark.to_string(),
        approaches: approaches.iter().map(|(n, _)| n.clone()).collect(),
        series: actuals.series.clone(),
        levels: te.factors().to_vec(),
        level_minutes: te.factors().iter().map(|k| *k as i64 * base_step_minutes).collect(),
        mse: mse_all,
        avg_rel,
        excluded,
    })
}

/// Mean squared error per block for each approach: blocks are
/// `(origin, series)` at one level, or `(origin, series, level)` when
/// `level` is `None`.
pub fn squared_error_blocks(
    approaches: &[(String, &ForecastSet)],
    actuals: &ForecastSet,
    level: Option<usize>,
) -> Result<DMatrix<f64>> {
    let levels: Vec<usize> = match level {
        Some(l) => vec![l],
        None => (0..actuals.temporal.p()).collect(),
    };
    let n = actuals.series.len();
    let blocks = actuals.origins.len() * n * levels.len();
    let mut out = DMatrix::zeros(blocks, approaches.len());
    for (j, (_, f)) in approaches.iter().enumerate() {
        check_aligned(f, actuals)?;
        let mut r = 0;
        for o in 0..actuals.origins.len() {
            for i in 0..n {
                for &l in &levels {
                    out[(r, j)] = mse(f.values(o, i, l), actuals.values(o, i, l))?;
                    r += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Friedman test with multiple comparisons against the best (Nemenyi).
#[derive(Debug, Clone, PartialEq)]
pub struct FriedmanMcb {
    pub approaches: Vec<String>,
    pub blocks: usize,
    pub mean_ranks: Vec<f64>,
    pub statistic: f64,
    pub p_value: f64,
    /// Nemenyi critical difference; intervals are mean rank ± cd/2.
    pub critical_difference: f64,
    pub best: usize,
    pub worse_than_best: Vec<bool>,
}

impl FriedmanMcb {
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let h = 0.5 * self.critical_difference;
        (self.mean_ranks[j] - h, self.mean_ranks[j] + h)
    }
}

pub const MIN_BLOCKS: usize = 10;

/// Ranks within one block, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && values[idx[e]] == values[idx[s]] {
            e += 1;
        }
        let r = (s + e + 1) as f64 / 2.0;
        for &i in &idx[s..e] {
            ranks[i] = r;
        }
        s = e;
    }
    ranks
}

/// `errors` is blocks × approaches (lower is better).
pub fn friedman_mcb(errors: &DMatrix<f64>, approaches: &[String], alpha: f64) -> Result<FriedmanMcb> {
    let (nb, k) = errors.shape();
    check_dim("approach names", k, approaches.len())?;
    if k < 2 {
        return Err(Error::InvalidInput(
            "Friedman test needs at least two approaches".into(),
        ));
    }
    if nb < MIN_BLOCKS {
        return Err(Error::InsufficientData(format!(
            "Friedman test needs at least {MIN_BLOCKS} blocks, got {nb}"
        )));
    }
    if errors.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Friedman input".into()));
    }
    let mut rank_sums = vec![0.0; k];
    let mut tie_sum = 0.0;
    for r in 0..nb {
        let row: Vec<f64> = errors.row(r).iter().copied().collect();
        let ranks = average_ranks(&row);
        for (s, v) in rank_sums.iter_mut().zip(&ranks) {
            *s += v;
        }
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        let mut s = 0;
        while s < k {
            let mut e = s + 1;
            while e < k && sorted[e] == sorted[s] {
                e += 1;
            }
            let t = (e - s) as f64;
            tie_sum += t * t * t - t;
            s = e;
        }
    }
    let (nbf, kf) = (nb as f64, k as f64);
    let mean_ranks: Vec<f64> = rank_sums.iter().map(|s| s / nbf).collect();
    let ss: f64 = rank_sums.iter().map(|r| r * r).sum();
    let raw = 12.0 / (nbf * kf * (kf + 1.0)) * ss - 3.0 * nbf * (kf + 1.0);
    let denom = 1.0 - tie_sum / (nbf * (kf * kf * kf - kf));
    let (statistic, p_value) = if denom <= 0.0 {
        (0.0, 1.0)
    } else {
        let stat = (raw / denom).max(0.0);
        let chi = ChiSquared::new(kf - 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
        (stat, 1.0 - chi.cdf(stat))
    };
    let q = studentized_range_quantile(k, alpha);
    let cd = q / std::f64::consts::SQRT_2 * (kf * (kf + 1.0) / (6.0 * nbf)).sqrt();
    let best = (0..k)
        .min_by(|&a, &b| mean_ranks[a].total_cmp(&mean_ranks[b]))
        .expect("k >= 2");
    let worse_than_best = mean_ranks.iter().map(|r| r - mean_ranks[best] > cd).collect();
    Ok(FriedmanMcb {
        approaches: approaches.to_vec(),
        blocks: nb,
        mean_ranks,
        statistic,
        p_value,
        critical_difference: cd,
        best,
        worse_than_best,
    })
}

/// Upper `alpha` quantile of the studentized range of `k` standard normals
/// (infinite degrees of freedom).
pub fn studentized_range_quantile(k: usize, alpha: f64) -> f64 {
    let target = 1.0 - alpha;
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if studentized_range_cdf(mid, k) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `P(range ≤ q) = k ∫ φ(z) [Φ(z) − Φ(z − q)]^{k−1} dz`, Simpson's rule.
pub fn studentized_range_cdf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let norm = Normal::standard();
    let (a, b) = (-9.0, 9.0 + q);
    let steps = 4000;
    let h = (b - a) / steps as f64;
    let f = |z: f64| norm.pdf(z) * (norm.cdf(z) - norm.cdf(z - q)).powi(k as i32 - 1);
    let mut s = f(a) + f(b);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    (k as f64 * s * h / 3.0).min(1.0)
}

/// Outcome of comparing one first-step forecast with the realized value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Under,
    Over,
    Within,
}

/// `y < (1−Δ)ȳ` is underproduction, `y > (1+Δ)ȳ` overproduction.
pub fn classify<T: Scalar>(forecast: T, actual: T, delta: T) -> Event {
    if actual < (T::one() - delta) * forecast {
        Event::Under
    } else if actual > (T::one() + delta) * forecast {
        Event::Over
    } else {
        Event::Within
    }
}

/// Fines-and-penalties and revenue-loss indices with event counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionCost<T> {
    pub delta: T,
    /// Geometric mean of `(ȳ − y)/y` over underproduction events.
    pub delta_minus: Option<T>,
    /// Geometric mean of `(y − ȳ)/ȳ` over overproduction events.
    pub delta_plus: Option<T>,
    pub n_under: usize,
    pub n_over: usize,
    pub n_within: usize,
    /// Origins with a non-positive actual or forecast.
    pub excluded: usize,
}

impl<T: Scalar> DecisionCost<T> {
    pub fn included(&self) -> usize {
        self.n_under + self.n_over + self.n_within
    }

    fn share(&self, c: usize) -> f64 {
        match self.included() {
            0 => 0.0,
            n => 100.0 * c as f64 / n as f64,
        }
    }

    pub fn under_share(&self) -> f64 {
        self.share(self.n_under)
    }

    pub fn over_share(&self) -> f64 {
        self.share(self.n_over)
    }

    pub fn within_share(&self) -> f64 {
        self.share(self.n_within)
    }
}

/// Decision-cost indices over paired first-step forecasts and actuals.
pub fn decision_costs<T: Scalar>(forecasts: &[T], actuals: &[T], delta: T) -> Result<DecisionCost<T>> {
    check_dim("actuals", forecasts.len(), actuals.len())?;
    if delta < T::zero() || delta >= T::one() {
        return Err(Error::InvalidInput(format!("threshold {delta} outside [0, 1)")));
    }
    let mut under = Vec::new();
    let mut over = Vec::new();
    let mut n_within = 0;
    let mut excluded = 0;
    for (&f, &y) in forecasts.iter().zip(actuals) {
        if !(y > T::zero() && f > T::zero()) {
            excluded += 1;
            continue;
        }
        match classify(f, y, delta) {
            Event::Under => under.push((f - y) / y),
            Event::Over => over.push((y - f) / f),
            Event::Within => n_within += 1,
        }
    }
    Ok(DecisionCost {
        delta,
        delta_minus: geometric_mean(&under),
        delta_plus: geometric_mean(&over),
        n_under: under.len(),
        n_over: over.len(),
        n_within,
        excluded,
    })
}

/// [`decision_costs`] for each threshold.
pub fn sweep_delta<T: Scalar>(forecasts: &[T], actuals: &[T], deltas: &[T]) -> Result<Vec<DecisionCost<T>>> {
    deltas.iter().map(|&d| decision_costs(forecasts, actuals, d)).collect()
}

/// True when under and over counts never grow as the threshold widens.
pub fn is_monotone<T: Scalar>(sweep: &[DecisionCost<T>]) -> bool {
    let mut v: Vec<&DecisionCost<T>> = sweep.iter().collect();
    v.sort_by(|a, b| a.delta.partial_cmp(&b.delta).expect("finite thresholds"));
    v.windows(2)
        .all(|w| w[1].n_under <= w[0].n_under && w[1].n_over <= w[0].n_over)
}

/// Sampling intervals (minutes) scored by the decision-cost report.
pub const DECISION_MINUTES: [i64; 3] = [10, 60, 480];

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionCostRow {
    pub approach: String,
    pub level_k: usize,
    pub minutes: i64,
    pub cost: DecisionCost<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionCostReport {
    pub series: String,
    pub rows: Vec<DecisionCostRow>,
}

impl DecisionCostReport {
    /// `approach,level_k,minutes,delta,delta_minus,delta_plus,under_pct,over_pct,within_pct,n_under,n_over,excluded`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "approach",
            "level_k",
            "minutes",
            "delta",
            "delta_minus",
            "delta_plus",
            "under_pct",
            "over_pct",
            "within_pct",
            "n_under",
            "n_over",
            "excluded",
        ])?;
        for r in &self.rows {
            let c = &r.cost;
            let opt = |v: Option<f64>| v.map(format_metric).unwrap_or_default();
            wtr.write_record([
                r.approach.clone(),
                r.level_k.to_string(),
                r.minutes.to_string(),
                format!("{}", c.delta),
                opt(c.delta_minus),
                opt(c.delta_plus),
                format_metric(c.under_share()),
                format_metric(c.over_share()),
                format_metric(c.within_share()),
                c.n_under.to_string(),
                c.n_over.to_string(),
                c.excluded.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("decision cost csv", e))?;
        Ok(())
    }

    /// Every `(approach, level)` sweep is monotone in the threshold.
    pub fn is_monotone(&self) -> bool {
        let mut groups: std::collections::BTreeMap<(&str, usize), Vec<DecisionCost<f64>>> = Default::default();
        for r in &self.rows {
            groups.entry((&r.approach, r.level_k)).or_default().push(r.cost);
        }
        groups.values().all(|g| is_monotone(g))
    }
}

/// First-step decision costs of `series` at the 10-minute, hourly and
/// 8-hour levels present in the factor set, for every threshold.
pub fn decision_cost_report(
    approaches: &[(String, &ForecastSet)],
    actuals: &ForecastSet,
    series: &str,
    deltas: &[f64],
    base_step_minutes: i64,
) -> Result<DecisionCostReport> {
    let i = actuals
        .series
        .iter()
        .position(|s| s == series)
        .ok_or_else(|| Error::InvalidInput(format!("series '{series}' not in forecasts")))?;
    let te = &actuals.temporal;
    let mut rows = Vec::new();
    for (name, f) in approaches {
        check_aligned(f, actuals)?;
        for (l, &k) in te.factors().iter().enumerate() {
            let minutes = k as i64 * base_step_minutes;
            if !DECISION_MINUTES.contains(&minutes) {
                continue;
            }
            let fv: Vec<f64> = (0..f.origins.len()).map(|o| f.get(o, i, l, 0)).collect();
            let av: Vec<f64> = (0..f.origins.len()).map(|o| actuals.get(o, i, l, 0)).collect();
            for cost in sweep_delta(&fv, &av, deltas)? {
                rows.push(DecisionCostRow {
                    approach: name.clone(),
                    level_k: k,
                    minutes,
                    cost,
                });
            }
        }
    }
    Ok(DecisionCostReport {
        series: series.to_string(),
        rows,
    })
}
