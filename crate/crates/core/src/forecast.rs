//! Panels, temporal aggregation, regression features, base forecasters and
//! rolling-origin forecast generation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::{ErrorPanel, ErrorSource};
use crate::error::{check_dim, Error, Result};
use crate::hierarchy::{CrossSectionalHierarchy, CrossTemporalStructure, TemporalSpec};

/// Grid step of the raw data.
pub const BASE_STEP_MINUTES: i64 = 10;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

/// Parses ISO-8601 UTC timestamps with or without a trailing `Z`/offset.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Ok(dt.naive_utc());
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s.trim_end_matches('Z'), fmt) {
            return Ok(dt);
        }
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight"));
    }
    Err(Error::InvalidInput(format!("unparseable timestamp '{s}'")))
}

/// Aligned observations of power and wind speed on a regular grid.
///
/// Rows of `power`/`speed` are series, columns are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    pub start: NaiveDateTime,
    /// Minutes between consecutive observations.
    pub step_minutes: i64,
    pub series: Vec<String>,
    pub power: Vec<Vec<f64>>,
    pub speed: Vec<Vec<f64>>,
}

/// Per-series range summary produced by [`preprocess`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub series: String,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub clamped_power: usize,
    pub clamped_speed: usize,
}

impl SeriesPanel {
    pub fn new(
        start: NaiveDateTime,
        step_minutes: i64,
        series: Vec<String>,
        power: Vec<Vec<f64>>,
        speed: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dim("power rows", series.len(), power.len())?;
        check_dim("speed rows", series.len(), speed.len())?;
        let len = power.first().map_or(0, Vec::len);
        for (s, (p, w)) in series.iter().zip(power.iter().zip(&speed)) {
            if p.len() != len || w.len() != len {
                return Err(Error::Misaligned(format!("series '{s}' has a different length")));
            }
        }
        if step_minutes <= 0 {
            return Err(Error::InvalidInput("step must be positive".into()));
        }
        Ok(Self {
            start,
            step_minutes,
            series,
            power,
            speed,
        })
    }

    pub fn len(&self) -> usize {
        self.power.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.step_minutes * t as i64)
    }

    pub fn index_of(&self, series: &str) -> Option<usize> {
        self.series.iter().position(|s| s == series)
    }

    /// Index of timestamp `ts` on the grid, if it falls on it.
    pub fn index_at(&self, ts: NaiveDateTime) -> Option<usize> {
        let d = (ts - self.start).num_minutes();
        if d < 0 || d % self.step_minutes != 0 {
            return None;
        }
        let i = (d / self.step_minutes) as usize;
        (i <= self.len()).then_some(i)
    }

    /// Columns `range` of every series.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SeriesPanel {
        SeriesPanel {
            start: self.timestamp(range.start),
            step_minutes: self.step_minutes,
            series: self.series.clone(),
            power: self.power.iter().map(|p| p[range.clone()].to_vec()).collect(),
            speed: self.speed.iter().map(|p| p[range.clone()].to_vec()).collect(),
        }
    }

    /// Multiplies every power value by `c` (unit conversion).
    pub fn scale_power(&mut self, c: f64) {
        for p in &mut self.power {
            p.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Panel over every series of `h` in hierarchy order: upper power is the
    /// sum of member power, upper wind speed the mean of member speeds.
    pub fn with_hierarchy(&self, h: &CrossSectionalHierarchy) -> Result<SeriesPanel> {
        let pos: Vec<usize> = h
            .labels_bottom()
            .iter()
            .map(|l| {
                self.index_of(l)
                    .ok_or_else(|| Error::InvalidInput(format!("series '{l}' missing from data")))
            })
            .collect::<Result<_>>()?;
        let len = self.len();
        let mut power = Vec::with_capacity(h.n());
        let mut speed = Vec::with_capacity(h.n());
        for r in 0..h.n_a() {
            let mem: Vec<usize> = h.members(r).into_iter().map(|j| pos[j]).collect();
            let inv = 1.0 / mem.len() as f64;
            power.push((0..len).map(|t| mem.iter().map(|&j| self.power[j][t]).sum()).collect());
            speed.push(
                (0..len)
                    .map(|t| mem.iter().map(|&j| self.speed[j][t]).sum::<f64>() * inv)
                    .collect(),
            );
        }
        for &j in &pos {
            power.push(self.power[j].clone());
            speed.push(self.speed[j].clone());
        }
        SeriesPanel::new(self.start, self.step_minutes, h.labels(), power, speed)
    }
}

/// Clamps negative power and speed to zero and verifies the grid has no gaps.
///
/// `timestamps` are the raw observation instants; any missing grid point is
/// an error (nothing is imputed).
pub fn preprocess(mut raw: SeriesPanel) -> Result<(SeriesPanel, Vec<SeriesSummary>)> {
    let mut summaries = Vec::with_capacity(raw.n_series());
    for i in 0..raw.n_series() {
        if let Some(t) = raw.power[i].iter().chain(&raw.speed[i]).position(|v| !v.is_finite()) {
            let t = t % raw.len().max(1);
            return Err(Error::MissingData(format!(
                "series '{}' has a missing value at {}",
                raw.series[i],
                format_timestamp(&raw.timestamp(t))
            )));
        }
        let clamped_power = clamp_count(&mut raw.power[i]);
        let clamped_speed = clamp_count(&mut raw.speed[i]);
        if clamped_power + clamped_speed > 0 {
            info!(
                "{}: clamped {clamped_power} negative power and {clamped_speed} negative speed values to 0",
                raw.series[i]
            );
        }
        let mut sorted = raw.power[i].clone();
        sorted.sort_by(f64::total_cmp);
        let s = SeriesSummary {
            series: raw.series[i].clone(),
            min: sorted.first().copied().unwrap_or(f64::NAN),
            median: median_sorted(&sorted),
            max: sorted.last().copied().unwrap_or(f64::NAN),
            clamped_power,
            clamped_speed,
        };
        debug!("{}: power min {} median {} max {}", s.series, s.min, s.median, s.max);
        summaries.push(s);
    }
    Ok((raw, summaries))
}

fn clamp_count(v: &mut [f64]) -> usize {
    let mut c = 0;
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
            c += 1;
        }
    }
    c
}

fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Non-overlapping blocks of `k` steps: power summed, wind speed averaged.
/// A trailing partial block is dropped.
pub fn aggregate_panel(p: &SeriesPanel, k: usize) -> Result<SeriesPanel> {
    if k == 0 {
        return Err(Error::InvalidInput("aggregation order must be positive".into()));
    }
    let blocks = p.len() / k;
    if !p.len().is_multiple_of(k) {
        warn!(
            "aggregation order {k}: dropping trailing partial block of {} steps",
            p.len() % k
        );
    }
    let inv = 1.0 / k as f64;
    let agg = |v: &Vec<f64>, mean: bool| -> Vec<f64> {
        (0..blocks)
            .map(|b| {
                let s: f64 = v[b * k..(b + 1) * k].iter().sum();
                if mean {
                    s * inv
                } else {
                    s
                }
            })
            .collect()
    };
    SeriesPanel::new(
        p.start,
        p.step_minutes * k as i64,
        p.series.clone(),
        p.power.iter().map(|v| agg(v, false)).collect(),
        p.speed.iter().map(|v| agg(v, true)).collect(),
    )
}

/// Regressor layout for one sampling frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureSpec {
    /// Lags of power and of wind speed; also the moving-window length.
    pub lags: usize,
    /// Time-of-day dummies; the day is split into `tod_dummies + 1` equal bins
    /// and the first bin is dropped.
    pub tod_dummies: usize,
}

/// Lag and time-of-day dummy counts by sampling interval in minutes.
pub const TABLE_FEATURES: [(i64, usize, usize); 10] = [
    (10, 48, 23),
    (20, 24, 23),
    (30, 16, 23),
    (40, 12, 23),
    (60, 8, 23),
    (80, 6, 19),
    (120, 4, 11),
    (160, 3, 9),
    (240, 3, 3),
    (480, 3, 2),
];

pub const QUARTER_DUMMIES: usize = 3;

impl FeatureSpec {
    /// Defaults for a sampling interval; intervals outside the table get
    /// `max(3, 480/minutes)` lags and one dummy per within-day slot.
    pub fn for_minutes(minutes: i64) -> Self {
        if let Some((_, lags, tod)) = TABLE_FEATURES.iter().find(|(m, _, _)| *m == minutes) {
            return Self {
                lags: *lags,
                tod_dummies: *tod,
            };
        }
        let per_day = (1440 / minutes.max(1)).max(1) as usize;
        Self {
            lags: ((480 / minutes.max(1)) as usize).max(3),
            tod_dummies: per_day.saturating_sub(1).min(23),
        }
    }

    /// Regressors excluding the intercept.
    pub fn n_features(&self) -> usize {
        2 * self.lags + 4 + QUARTER_DUMMIES + self.tod_dummies
    }

    /// Power lags, speed lags, power MA/std, speed MA/std, quarter and
    /// time-of-day dummies for a target at `when`. `power` and `speed` hold
    /// at least `lags` values strictly before the target, oldest first.
    pub fn row(&self, power: &[f64], speed: &[f64], when: NaiveDateTime) -> Vec<f64> {
        let l = self.lags;
        let p = &power[power.len() - l..];
        let w = &speed[speed.len() - l..];
        let mut row = Vec::with_capacity(self.n_features());
        row.extend(p.iter().rev());
        row.extend(w.iter().rev());
        let (pm, ps) = mean_std(p);
        let (wm, ws) = mean_std(w);
        row.extend([pm, ps, wm, ws]);
        let q = when.month0() / 3;
        row.extend((1..=QUARTER_DUMMIES as u32).map(|j| if q == j { 1.0 } else { 0.0 }));
        let minute = (when.hour() * 60 + when.minute()) as usize;
        let bin = minute * (self.tod_dummies + 1) / 1440;
        row.extend((1..=self.tod_dummies).map(|j| if bin == j { 1.0 } else { 0.0 }));
        row
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.max(0.0).sqrt())
}

/// Design rows and targets for series `series` of a level panel, over
/// target indices `targets`. Targets without `lags` steps of history are
/// skipped and counted.
pub fn build_features(
    p: &SeriesPanel,
    series: usize,
    spec: &FeatureSpec,
    targets: std::ops::Range<usize>,
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>, usize) {
    let first = targets.start.max(spec.lags);
    let skipped = first - targets.start.min(first);
    let idx: Vec<usize> = (first..targets.end.min(p.len())).collect();
    let mut x = DMatrix::zeros(idx.len(), spec.n_features());
    let mut y = DVector::zeros(idx.len());
    for (r, &t) in idx.iter().enumerate() {
        let row = spec.row(&p.power[series][..t], &p.speed[series][..t], p.timestamp(t));
        x.row_mut(r).copy_from_slice(&row);
        y[r] = p.power[series][t];
    }
    if skipped > 0 {
        debug!("{}: skipped {skipped} rows without enough history", p.series[series]);
    }
    (x, y, idx, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseModelKind {
    Naive,
    LinReg,
}

impl BaseModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseModelKind::Naive => "naive",
            BaseModelKind::LinReg => "linreg",
        }
    }
}

impl fmt::Display for BaseModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaseModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(BaseModelKind::Naive),
            "linreg" | "lr" => Ok(BaseModelKind::LinReg),
            other => Err(Error::InvalidInput(format!("unknown base model '{other}'"))),
        }
    }
}

/// Persistence forecast: the last observed value for every step.
pub fn forecast_naive(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *history
        .last()
        .ok_or_else(|| Error::InsufficientData("naive forecast needs at least one observation".into()))?;
    Ok(vec![last; horizon])
}

/// Relative ridge added to the normal equations.
pub const RIDGE: f64 = 1e-8;

/// Least-squares fit on standardized regressors with an intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct LinRegModel {
    pub spec: FeatureSpec,
    intercept: f64,
    coef: DVector<f64>,
    center: DVector<f64>,
    scale: DVector<f64>,
    pub ridge: f64,
}

impl LinRegModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut acc = self.intercept;
        for (j, v) in row.iter().enumerate() {
            acc += self.coef[j] * (v - self.center[j]) / self.scale[j];
        }
        acc
    }

    /// Recursive multi-step forecast from the end of `power`/`speed`.
    ///
    /// Predicted power is fed back into the lag and moving-window features;
    /// future wind speed is the last observed speed.
    pub fn forecast(
        &self,
        power: &[f64],
        speed: &[f64],
        first_target: NaiveDateTime,
        step_minutes: i64,
        horizon: usize,
    ) -> Result<Vec<f64>> {
        let l = self.spec.lags;
        if power.len() < l || speed.len() < l {
            return Err(Error::InsufficientData(format!(
                "linear regression forecast needs {l} past values, got {}",
                power.len().min(speed.len())
            )));
        }
        let mut p = power[power.len() - l..].to_vec();
        let mut w = speed[speed.len() - l..].to_vec();
        let last_speed = *w.last().expect("lags >= 1");
        let mut out = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let when = first_target + Duration::minutes(step_minutes * h as i64);
            let v = self.predict_row(&self.spec.row(&p, &w, when));
            out.push(v);
            p.push(v);
            w.push(last_speed);
            p.remove(0);
            w.remove(0);
        }
        Ok(out)
    }
}

/// Ordinary least squares with a `1e-8·trace/p` ridge on standardized columns.
///
/// If the normal equations still do not factorize the ridge is grown by
/// factors of 1000 and the fallback is logged.
pub fn fit_linreg(spec: FeatureSpec, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinRegModel> {
    let (rows, p) = x.shape();
    check_dim("regression targets", rows, y.len())?;
    if rows == 0 {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    let center = DVector::from_fn(p, |j, _| x.column(j).mean());
    let scale = DVector::from_fn(p, |j, _| {
        let c = center[j];
        let s = (x.column(j).iter().map(|v| (v - c) * (v - c)).sum::<f64>() / rows as f64).sqrt();
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    let z = DMatrix::from_fn(rows, p, |r, j| (x[(r, j)] - center[j]) / scale[j]);
    let ymean = y.mean();
    let yc = y.map(|v| v - ymean);
    let xtx = z.tr_mul(&z);
    let xty = z.tr_mul(&yc);
    let trace = xtx.trace().max(1.0);
    let mut ridge = RIDGE * trace / p.max(1) as f64;
    for attempt in 0..6 {
        let mut a = xtx.clone();
        for i in 0..p {
            a[(i, i)] += ridge;
        }
        if let Some(ch) = nalgebra::Cholesky::new(a) {
            if attempt > 0 {
                warn!("rank-deficient design: ridge raised to {ridge:e}");
            }
            return Ok(LinRegModel {
                spec,
                intercept: ymean,
                coef: ch.solve(&xty),
                center,
                scale,
                ridge,
            });
        }
        ridge *= 1e3;
    }
    Err(Error::NotPositiveDefinite {
        what: "regression normal equations".into(),
        condition: crate::linalg::condition_estimate(&xtx),
    })
}

/// A fitted base model for one `(series, level)`.
#[derive(Debug, Clone, PartialEq)]
pub enum BaseModel {
    Naive,
    LinReg(LinRegModel),
}

impl BaseModel {
    pub fn forecast(&self, level: &SeriesPanel, series: usize, origin: usize, horizon: usize) -> Result<Vec<f64>> {
        match self {
            BaseModel::Naive => forecast_naive(&level.power[series][..origin], horizon),
            BaseModel::LinReg(m) => m.forecast(
                &level.power[series][..origin],
                &level.speed[series][..origin],
                level.timestamp(origin),
                level.step_minutes,
                horizon,
            ),
        }
    }

    /// One-step-ahead fitted values for indices `range` (None without history).
    pub fn fitted(&self, level: &SeriesPanel, series: usize, range: std::ops::Range<usize>) -> Vec<Option<f64>> {
        match self {
            BaseModel::Naive => range.map(|t| (t >= 1).then(|| level.power[series][t - 1])).collect(),
            BaseModel::LinReg(m) => range
                .map(|t| {
                    (t >= m.spec.lags).then(|| {
                        m.predict_row(&m.spec.row(
                            &level.power[series][..t],
                            &level.speed[series][..t],
                            level.timestamp(t),
                        ))
                    })
                })
                .collect(),
        }
    }
}

/// Per-level aggregated panels of every hierarchy series.
#[derive(Debug, Clone)]
pub struct LevelPanels {
    pub temporal: TemporalSpec,
    /// One panel per factor, in factor order.
    pub levels: Vec<SeriesPanel>,
}

impl LevelPanels {
    /// `full` must already contain every hierarchy series at the base step.
    pub fn new(full: &SeriesPanel, temporal: &TemporalSpec) -> Result<Self> {
        let levels = temporal
            .factors()
            .iter()
            .map(|&k| aggregate_panel(full, k))
            .collect::<Result<_>>()?;
        Ok(Self {
            temporal: temporal.clone(),
            levels,
        })
    }

    pub fn base(&self) -> &SeriesPanel {
        self.levels.last().expect("factor 1 present")
    }

    pub fn n_series(&self) -> usize {
        self.base().n_series()
    }
}

/// Overrides for the per-frequency feature defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureOverrides {
    /// Interval in minutes → layout.
    pub by_minutes: BTreeMap<i64, FeatureSpec>,
}

impl FeatureOverrides {
    pub fn spec(&self, minutes: i64) -> FeatureSpec {
        self.by_minutes
            .get(&minutes)
            .copied()
            .unwrap_or_else(|| FeatureSpec::for_minutes(minutes))
    }
}

/// One model per `(series, level)`; `models[i][l]`.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub kind: BaseModelKind,
    pub models: Vec<Vec<BaseModel>>,
}

impl FittedModels {
    pub fn count(&self) -> usize {
        self.models.iter().map(Vec::len).sum()
    }
}

/// Fits every `(series, level)` model on base-step indices `[0, train_end)`.
pub fn fit_models(
    panels: &LevelPanels,
    kind: BaseModelKind,
    train_end: usize,
    features: &FeatureOverrides,
) -> Result<FittedModels> {
    let te = &panels.temporal;
    let n = panels.n_series();
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..te.p()).map(move |l| (i, l))).collect();
    let fitted: Vec<BaseModel> = jobs
        .par_iter()
        .map(|&(i, l)| {
            let k = te.factors()[l];
            let level = &panels.levels[l];
            match kind {
                BaseModelKind::Naive => Ok(BaseModel::Naive),
                BaseModelKind::LinReg => {
                    let spec = features.spec(level.step_minutes);
                    let end = (train_end / k).min(level.len());
                    let (x, y, _, _) = build_features(level, i, &spec, 0..end);
                    if x.nrows() <= spec.n_features() {
                        return Err(Error::InsufficientData(format!(
                            "training span too short for '{}' at k={k}: {} rows for {} regressors (need at least {} level-{k} steps)",
                            level.series[i],
                            x.nrows(),
                            spec.n_features() + 1,
                            spec.lags + spec.n_features() + 1
                        )));
                    }
                    fit_linreg(spec, &x, &y).map(BaseModel::LinReg)
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut models = vec![Vec::with_capacity(te.p()); n];
    for ((i, _), m) in jobs.into_iter().zip(fitted) {
        models[i].push(m);
    }
    Ok(FittedModels { kind, models })
}

/// Forecasts or actuals indexed by `(origin, series, level, step)`.
///
/// Each origin holds `horizon / k` steps for every level `k`, all covering the
/// same `horizon` base steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub model: String,
    pub series: Vec<String>,
    pub temporal: TemporalSpec,
    /// Horizon in base steps; a multiple of `m`.
    pub horizon: usize,
    pub origins: Vec<NaiveDateTime>,
    values: Vec<f64>,
}

impl ForecastSet {
    pub fn new(
        model: impl Into<String>,
        series: Vec<String>,
        temporal: TemporalSpec,
        horizon: usize,
        origins: Vec<NaiveDateTime>,
    ) -> Result<Self> {
        if horizon == 0 || !horizon.is_multiple_of(temporal.m()) {
            return Err(Error::InvalidInput(format!(
                "horizon {horizon} must be a positive multiple of m = {}",
                temporal.m()
            )));
        }
        let per_series: usize = temporal.factors().iter().map(|k| horizon / k).sum();
        let len = origins.len() * series.len() * per_series;
        Ok(Self {
            model: model.into(),
            series,
            temporal,
            horizon,
            origins,
            values: vec![f64::NAN; len],
        })
    }

    fn per_series(&self) -> usize {
        self.temporal.factors().iter().map(|k| self.horizon / k).sum()
    }

    fn level_start(&self, level: usize) -> usize {
        self.temporal.factors()[..level].iter().map(|k| self.horizon / k).sum()
    }

    /// `H_k` for level index `level`.
    pub fn steps(&self, level: usize) -> usize {
        self.horizon / self.temporal.factors()[level]
    }

    /// Low-frequency cycles covered by one origin.
    pub fn cycles(&self) -> usize {
        self.horizon / self.temporal.m()
    }

    #[inline]
    fn offset(&self, origin: usize, series: usize, level: usize) -> usize {
        (origin * self.series.len() + series) * self.per_series() + self.level_start(level)
    }

    pub fn values(&self, origin: usize, series: usize, level: usize) -> &[f64] {
        let o = self.offset(origin, series, level);
        &self.values[o..o + self.steps(level)]
    }

    pub fn values_mut(&mut self, origin: usize, series: usize, level: usize) -> &mut [f64] {
        let o = self.offset(origin, series, level);
        let s = self.steps(level);
        &mut self.values[o..o + s]
    }

    pub fn get(&self, origin: usize, series: usize, level: usize, h: usize) -> f64 {
        self.values(origin, series, level)[h]
    }

    pub fn all_values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `max(0, ·)` on every value.
    pub fn clamp_nonneg(&mut self) {
        crate::reconcile::clamp_nonneg(&mut self.values);
    }

    pub fn level_index(&self, k: usize) -> Option<usize> {
        self.temporal.factors().iter().position(|f| *f == k)
    }

    /// Canonical cross-temporal stack for cycle `cycle` of origin `origin`.
    pub fn stack(&self, origin: usize, cycle: usize, structure: &CrossTemporalStructure) -> Result<Vec<f64>> {
        check_dim("forecast series", structure.n(), self.series.len())?;
        if structure.temporal() != &self.temporal {
            return Err(Error::Misaligned(
                "forecast set and structure use different factor sets".into(),
            ));
        }
        let n = self.series.len();
        let mut y = vec![0.0; structure.dim()];
        for (l, &k) in self.temporal.factors().iter().enumerate() {
            let slots = self.temporal.slots(k);
            let off = self.temporal.level_offset(l);
            for i in 0..n {
                let v = self.values(origin, i, l);
                for t in 0..slots {
                    y[(off + t) * n + i] = v[cycle * slots + t];
                }
            }
        }
        Ok(y)
    }

    /// Writes a stack back into cycle `cycle` of origin `origin`.
    pub fn set_stack(&mut self, origin: usize, cycle: usize, y: &[f64]) -> Result<()> {
        let n = self.series.len();
        check_dim("stack length", n * self.temporal.m_star(), y.len())?;
        let te = self.temporal.clone();
        for (l, &k) in te.factors().iter().enumerate() {
            let slots = te.slots(k);
            let off = te.level_offset(l);
            for i in 0..n {
                let v = self.values_mut(origin, i, l);
                for t in 0..slots {
                    v[cycle * slots + t] = y[(off + t) * n + i];
                }
            }
        }
        Ok(())
    }

    /// Every `(origin, cycle)` stack, origin-major.
    pub fn stacks(&self, structure: &CrossTemporalStructure) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.origins.len() * self.cycles());
        for o in 0..self.origins.len() {
            for c in 0..self.cycles() {
                out.push(self.stack(o, c, structure)?);
            }
        }
        Ok(out)
    }

    /// Same index set, values replaced by `stacks` (as produced by [`Self::stacks`]).
    pub fn with_stacks(&self, model: impl Into<String>, stacks: &[Vec<f64>]) -> Result<ForecastSet> {
        check_dim("stack count", self.origins.len() * self.cycles(), stacks.len())?;
        let mut out = self.clone();
        out.model = model.into();
        let cycles = self.cycles();
        for (j, y) in stacks.iter().enumerate() {
            out.set_stack(j / cycles, j % cycles, y)?;
        }
        Ok(out)
    }

    /// Keeps only origins for which `keep` is true.
    pub fn filter_origins(&self, keep: &[bool]) -> ForecastSet {
        let per_origin = self.series.len() * self.per_series();
        let mut out = self.clone();
        out.origins = Vec::new();
        out.values = Vec::new();
        for (o, k) in keep.iter().enumerate() {
            if *k {
                out.origins.push(self.origins[o]);
                out.values
                    .extend_from_slice(&self.values[o * per_origin..(o + 1) * per_origin]);
            }
        }
        out
    }

    /// Rows `origin,series_id,level_k,h,value,model[,method]`.
    pub fn write_csv<W: Write>(&self, w: W, method: Option<&str>) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["origin", "series_id", "level_k", "h", "value", "model"];
        if method.is_some() {
            header.push("method");
        }
        wtr.write_record(&header)?;
        for (o, origin) in self.origins.iter().enumerate() {
            let ts = format_timestamp(origin);
            for (i, s) in self.series.iter().enumerate() {
                for (l, k) in self.temporal.factors().iter().enumerate() {
                    for (h, v) in self.values(o, i, l).iter().enumerate() {
                        let mut rec = vec![
                            ts.clone(),
                            s.clone(),
                            k.to_string(),
                            (h + 1).to_string(),
                            format!("{v:?}"),
                            self.model.clone(),
                        ];
                        if let Some(m) = method {
                            rec.push(m.to_string());
                        }
                        wtr.write_record(&rec)?;
                    }
                }
            }
        }
        wtr.flush().map_err(|e| Error::io("forecast csv", e))?;
        Ok(())
    }

    /// Reads forecast CSV rows, grouping by the `model` (and `method`, when
    /// present) column. Every group must be complete.
    pub fn read_csv<R: Read>(
        r: R,
        series: &[String],
        temporal: &TemporalSpec,
        horizon: usize,
    ) -> Result<BTreeMap<String, ForecastSet>> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::InvalidInput(format!("forecast CSV lacks column '{name}'")))
        };
        let (c_origin, c_series, c_k, c_h, c_val, c_model) = (
            col("origin")?,
            col("series_id")?,
            col("level_k")?,
            col("h")?,
            col("value")?,
            col("model")?,
        );
        let c_method = headers.iter().position(|h| h == "method");
        let series_pos: HashMap<&str, usize> = series.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        type Entry = (NaiveDateTime, usize, usize, usize, f64);
        let mut groups: BTreeMap<(String, String), Vec<Entry>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let origin = parse_timestamp(&rec[c_origin])?;
            let i = *series_pos
                .get(&rec[c_series])
                .ok_or_else(|| Error::InvalidInput(format!("unknown series '{}'", &rec[c_series])))?;
            let k: usize = parse_field(&rec[c_k], "level_k")?;
            let l = temporal
                .factors()
                .iter()
                .position(|f| *f == k)
                .ok_or_else(|| Error::InvalidInput(format!("level {k} not in factor set")))?;
            let h: usize = parse_field(&rec[c_h], "h")?;
            let v: f64 = parse_field(&rec[c_val], "value")?;
            let method = c_method.map(|c| rec[c].to_string()).unwrap_or_default();
            groups
                .entry((rec[c_model].to_string(), method))
                .or_default()
                .push((origin, i, l, h, v));
        }
        let mut out = BTreeMap::new();
        for ((model, method), entries) in groups {
            let mut origins: Vec<NaiveDateTime> = entries.iter().map(|e| e.0).collect();
            origins.sort();
            origins.dedup();
            let pos: HashMap<NaiveDateTime, usize> = origins.iter().enumerate().map(|(i, o)| (*o, i)).collect();
            let mut fs = ForecastSet::new(model.clone(), series.to_vec(), temporal.clone(), horizon, origins)?;
            for (o, i, l, h, v) in entries {
                if h == 0 || h > fs.steps(l) {
                    return Err(Error::InvalidInput(format!("step {h} out of range at level index {l}")));
                }
                fs.values_mut(pos[&o], i, l)[h - 1] = v;
            }
            if !fs.is_complete() {
                return Err(Error::Misaligned(format!("forecast group '{model}' has ragged stacks")));
            }
            let key = if method.is_empty() { model } else { method };
            out.insert(key, fs);
        }
        Ok(out)
    }
}

fn parse_field<F: FromStr>(s: &str, what: &str) -> Result<F> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidInput(format!("unparseable {what} '{s}'")))
}

/// Actual values laid out like a forecast set; entries past the end of the
/// data are NaN.
pub fn actuals_at(panels: &LevelPanels, origins: &[usize], horizon: usize) -> Result<ForecastSet> {
    let base = panels.base();
    let te = &panels.temporal;
    let mut fs = ForecastSet::new(
        "actual",
        base.series.clone(),
        te.clone(),
        horizon,
        origins.iter().map(|&o| base.timestamp(o)).collect(),
    )?;
    for (oi, &o) in origins.iter().enumerate() {
        for (l, &k) in te.factors().iter().enumerate() {
            let level = &panels.levels[l];
            for i in 0..base.n_series() {
                let start = o / k;
                let v = fs.values_mut(oi, i, l);
                for (h, slot) in v.iter_mut().enumerate() {
                    if let Some(x) = level.power[i].get(start + h) {
                        *slot = *x;
                    }
                }
            }
        }
    }
    Ok(fs)
}

/// Base forecasts for every series, level and origin (base-step indices,
/// each a multiple of `m`).
pub fn forecast_origins(
    panels: &LevelPanels,
    models: &FittedModels,
    origins: &[usize],
    horizon: usize,
) -> Result<ForecastSet> {
    let te = &panels.temporal;
    let base = panels.base();
    for &o in origins {
        if o % te.m() != 0 {
            return Err(Error::InvalidInput(format!(
                "origin index {o} is not a multiple of m = {}",
                te.m()
            )));
        }
    }
    let mut fs = ForecastSet::new(
        models.kind.as_str(),
        base.series.clone(),
        te.clone(),
        horizon,
        origins.iter().map(|&o| base.timestamp(o)).collect(),
    )?;
    let n = base.n_series();
    let cells: Vec<Vec<Vec<f64>>> = origins
        .par_iter()
        .map(|&o| {
            let mut per = Vec::with_capacity(n * te.p());
            for i in 0..n {
                for (l, &k) in te.factors().iter().enumerate() {
                    per.push(models.models[i][l].forecast(&panels.levels[l], i, o / k, horizon / k)?);
                }
            }
            Ok(per)
        })
        .collect::<Result<_>>()?;
    for (oi, per) in cells.into_iter().enumerate() {
        for (j, v) in per.into_iter().enumerate() {
            fs.values_mut(oi, j / te.p(), j % te.p()).copy_from_slice(&v);
        }
    }
    Ok(fs)
}

/// Base-step index ranges of the three chronological spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spans {
    pub train: (usize, usize),
    pub validation: (usize, usize),
    pub test: (usize, usize),
}

impl Spans {
    pub fn validate(&self, len: usize) -> Result<()> {
        let ok = self.train.0 < self.train.1
            && self.train.1 <= self.validation.0
            && self.validation.0 <= self.validation.1
            && self.validation.1 <= self.test.0
            && self.test.0 < self.test.1
            && self.test.1 <= len;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "spans must be chronological, disjoint and within the data: {self:?}"
            )))
        }
    }
}

/// Origins in `[start, end)` spaced by `stride` whose whole horizon fits.
pub fn origins_in(span: (usize, usize), m: usize, stride: usize, horizon: usize) -> Vec<usize> {
    let first = span.0.div_ceil(m) * m;
    (first..span.1)
        .step_by(stride.max(1))
        .filter(|o| o + horizon <= span.1)
        .collect()
}

/// Everything produced by one rolling-origin run.
#[derive(Debug, Clone)]
pub struct RollingOutput {
    pub models: FittedModels,
    pub validation: ForecastSet,
    pub validation_actuals: ForecastSet,
    pub test: ForecastSet,
    pub test_actuals: ForecastSet,
    /// One-step fitted values over the training span, `[series][level][t]`.
    pub fitted: Vec<Vec<Vec<Option<f64>>>>,
}

/// Fits on the training span and forecasts every origin of the validation
/// and test spans.
pub fn rolling_origin(
    panels: &LevelPanels,
    kind: BaseModelKind,
    spans: &Spans,
    horizon: usize,
    stride: usize,
    features: &FeatureOverrides,
) -> Result<RollingOutput> {
    let te = &panels.temporal;
    spans.validate(panels.base().len())?;
    let models = fit_models(panels, kind, spans.train.1, features)?;
    let val_origins = origins_in(spans.validation, te.m(), stride, horizon);
    let test_origins = origins_in(spans.test, te.m(), stride, horizon);
    if test_origins.is_empty() {
        return Err(Error::InsufficientData(
            "test span holds no complete forecast origin".into(),
        ));
    }
    info!(
        "{kind}: {} models, {} validation origins, {} test origins",
        models.count(),
        val_origins.len(),
        test_origins.len()
    );
    let fitted = (0..panels.n_series())
        .map(|i| {
            te.factors()
                .iter()
                .enumerate()
                .map(|(l, &k)| models.models[i][l].fitted(&panels.levels[l], i, 0..spans.train.1 / k))
                .collect()
        })
        .collect();
    Ok(RollingOutput {
        validation: forecast_origins(panels, &models, &val_origins, horizon)?,
        validation_actuals: actuals_at(panels, &val_origins, horizon)?,
        test: forecast_origins(panels, &models, &test_origins, horizon)?,
        test_actuals: actuals_at(panels, &test_origins, horizon)?,
        fitted,
        models,
    })
}

/// Level-k actual series `[series][level][t]` over base-step indices `[0, end)`.
pub fn level_actuals(panels: &LevelPanels, end: usize) -> Vec<Vec<Vec<f64>>> {
    let te = &panels.temporal;
    (0..panels.n_series())
        .map(|i| {
            te.factors()
                .iter()
                .enumerate()
                .map(|(l, &k)| panels.levels[l].power[i][..(end / k).min(panels.levels[l].len())].to_vec())
                .collect()
        })
        .collect()
}

/// Validation errors (forecast minus actual), one row per `(origin, cycle)`.
///
/// Origins whose actuals are incomplete are dropped and counted in the log.
pub fn collect_validation_errors(
    forecasts: &ForecastSet,
    actuals: &ForecastSet,
    structure: &CrossTemporalStructure,
) -> Result<ErrorPanel<f64>> {
    if forecasts.origins != actuals.origins
        || forecasts.horizon != actuals.horizon
        || forecasts.series != actuals.series
    {
        return Err(Error::Misaligned(
            "validation forecasts and actuals cover different index sets".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut dropped = 0;
    for o in 0..forecasts.origins.len() {
        let mut per_origin = Vec::with_capacity(forecasts.cycles());
        for c in 0..forecasts.cycles() {
            let f = forecasts.stack(o, c, structure)?;
            let a = actuals.stack(o, c, structure)?;
            per_origin.push(f.iter().zip(&a).map(|(f, a)| f - a).collect::<Vec<f64>>());
        }
        if per_origin.iter().flatten().all(|v| v.is_finite()) {
            rows.extend(per_origin);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        warn!("validation errors: dropped {dropped} origins with incomplete actuals");
    }
    ErrorPanel::from_rows(ErrorSource::Validation, &rows, structure)
}
