//! Experiment configuration, data ingestion, synthetic fixtures and the
//! end-to-end run that writes every artifact.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use chrono::{Duration, NaiveDateTime};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariance::{collect_insample_residuals, estimate, CovarianceKind, ErrorPanel, ErrorSource};
use crate::error::{Error, Result};
use crate::evaluate::{self, format_metric, AccuracyTable, DecisionCostReport, FriedmanMcb};
use crate::forecast::{
    self, collect_validation_errors, format_timestamp, parse_timestamp, BaseModelKind, FeatureOverrides, FeatureSpec,
    ForecastSet, LevelPanels, SeriesPanel, Spans, BASE_STEP_MINUTES,
};
use crate::hierarchy::{CrossSectionalHierarchy, CrossTemporalStructure, TemporalSpec};
use crate::reconcile::{
    IterativeReconciler, NonNeg, PartlyBottomUp, ProjectionReconciler, Reconciler, ITE_MAX_ITER, ITE_TOL,
};

/// Approaches in the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PipelineMethod {
    Base,
    Pbu,
    CtStr,
    CtWlsv,
    CtBdshr,
    CtAcov,
    Ite,
    CtBu,
}

impl PipelineMethod {
    pub const ALL: [PipelineMethod; 8] = [
        PipelineMethod::Base,
        PipelineMethod::Pbu,
        PipelineMethod::CtStr,
        PipelineMethod::CtWlsv,
        PipelineMethod::CtBdshr,
        PipelineMethod::CtAcov,
        PipelineMethod::Ite,
        PipelineMethod::CtBu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMethod::Base => "base",
            PipelineMethod::Pbu => "pbu",
            PipelineMethod::CtStr => "ct_str",
            PipelineMethod::CtWlsv => "ct_wlsv",
            PipelineMethod::CtBdshr => "ct_bdshr",
            PipelineMethod::CtAcov => "ct_acov",
            PipelineMethod::Ite => "ite",
            PipelineMethod::CtBu => "ct_bu",
        }
    }

    /// Whether the method needs an error panel.
    pub fn needs_errors(self) -> bool {
        matches!(
            self,
            PipelineMethod::Pbu
                | PipelineMethod::CtWlsv
                | PipelineMethod::CtBdshr
                | PipelineMethod::CtAcov
                | PipelineMethod::Ite
        )
    }
}

impl std::fmt::Display for PipelineMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PipelineMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Noise added to the synthetic diurnal signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Standard deviation of the stationary AR noise, as a fraction of capacity.
    pub sd: f64,
    /// Share of the noise variance common to all turbines.
    pub shared: f64,
    /// AR(1) coefficient of both noise components.
    pub ar: f64,
    /// First day with scaled noise variance.
    pub shift_day: Option<usize>,
    /// Variance multiplier applied from `shift_day` on.
    pub shift_variance: f64,
    /// Independent measurement noise on wind speed (m/s).
    pub speed_sd: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sd: 0.08,
            shared: 0.5,
            ar: 0.95,
            shift_day: None,
            shift_variance: 1.0,
            speed_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_bottom: usize,
    pub days: usize,
    pub start: String,
    /// Nameplate capacity per turbine (kW).
    pub capacity: f64,
    pub noise: NoiseSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bottom: 2,
            days: 60,
            start: "2020-01-01T00:00:00Z".into(),
            capacity: 2000.0,
            noise: NoiseSpec::default(),
        }
    }
}

/// Synthetic turbines: a diurnal sinusoid per turbine plus shared and
/// idiosyncratic AR(1) noise, clamped at zero, on the 10-minute grid.
pub fn synth_data(cfg: &SynthConfig, seed: u64) -> Result<SeriesPanel> {
    if cfg.n_bottom == 0 || cfg.days == 0 || cfg.capacity <= 0.0 {
        return Err(Error::Config(
            "synthetic panel needs positive n_bottom, days and capacity".into(),
        ));
    }
    let nz = &cfg.noise;
    if !(0.0..=1.0).contains(&nz.shared)
        || !(nz.ar.abs() < 1.0)
        || nz.sd < 0.0
        || nz.shift_variance < 0.0
        || nz.speed_sd < 0.0
    {
        return Err(Error::Config("noise spec out of range".into()));
    }
    let start = parse_timestamp(&cfg.start)?;
    let per_day = (1440 / BASE_STEP_MINUTES) as usize;
    let len = cfg.days * per_day;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let innov = (1.0 - nz.ar * nz.ar).sqrt();
    let shift_at = nz.shift_day.map(|d| d * per_day).unwrap_or(usize::MAX);
    let omega = 2.0 * std::f64::consts::PI / per_day as f64;
    let n = cfg.n_bottom;
    let phases: Vec<f64> = (0..n).map(|i| 0.4 * i as f64).collect();
    let caps: Vec<f64> = (0..n)
        .map(|i| cfg.capacity * (1.0 - 0.1 * i as f64 / n as f64))
        .collect();
    let mut shared = 0.0;
    let mut idio = vec![0.0; n];
    let mut power = vec![Vec::with_capacity(len); n];
    let mut speed = vec![Vec::with_capacity(len); n];
    for t in 0..len {
        let scale = if t >= shift_at { nz.shift_variance.sqrt() } else { 1.0 };
        shared = nz.ar * shared + innov * std_normal.sample(&mut rng);
        for i in 0..n {
            idio[i] = nz.ar * idio[i] + innov * std_normal.sample(&mut rng);
            let wave = (omega * t as f64 + phases[i]).sin();
            let noise = nz.sd * scale * (nz.shared.sqrt() * shared + (1.0 - nz.shared).sqrt() * idio[i]);
            let p = caps[i] * (0.5 + 0.35 * wave + noise);
            power[i].push(p.max(0.0));
            let gust = nz.speed_sd * std_normal.sample(&mut rng);
            speed[i].push((7.0 + 3.0 * wave + 10.0 * noise + gust).max(0.0));
        }
    }
    let series = (0..n).map(|i| format!("T{:02}", i + 1)).collect();
    SeriesPanel::new(start, BASE_STEP_MINUTES, series, power, speed)
}

/// Writes a panel in the ingestion schema `timestamp,series_id,power_kw,wind_speed_ms`.
pub fn write_panel_csv<W: std::io::Write>(p: &SeriesPanel, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["timestamp", "series_id", "power_kw", "wind_speed_ms"])?;
    for t in 0..p.len() {
        let ts = format_timestamp(&p.timestamp(t));
        for (i, s) in p.series.iter().enumerate() {
            wtr.write_record([
                ts.as_str(),
                s,
                &format!("{:?}", p.power[i][t]),
                &format!("{:?}", p.speed[i][t]),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("panel csv", e))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct InputRow {
    timestamp: String,
    series_id: String,
    power_kw: f64,
    wind_speed_ms: f64,
}

/// Reads the input CSV onto the 10-minute grid and preprocesses it.
///
/// `expected` restricts the accepted series ids; an id outside it is an
/// error. Missing grid points are reported by timestamp.
pub fn ingest_reader<R: std::io::Read>(r: R, expected: Option<&[String]>) -> Result<SeriesPanel> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows: BTreeMap<String, BTreeMap<NaiveDateTime, (f64, f64)>> = BTreeMap::new();
    for (line, rec) in rdr.deserialize::<InputRow>().enumerate() {
        let rec = rec?;
        let ts = parse_timestamp(&rec.timestamp)?;
        if let Some(exp) = expected {
            if !exp.contains(&rec.series_id) {
                return Err(Error::InvalidInput(format!(
                    "unknown series '{}' on data row {}",
                    rec.series_id,
                    line + 1
                )));
            }
        }
        let entry = rows.entry(rec.series_id.clone()).or_default();
        if entry.insert(ts, (rec.power_kw, rec.wind_speed_ms)).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate timestamp {} for series '{}'",
                format_timestamp(&ts),
                rec.series_id
            )));
        }
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("input has no rows".into()));
    }
    let series: Vec<String> = match expected {
        Some(exp) => {
            if let Some(missing) = exp.iter().find(|s| !rows.contains_key(*s)) {
                return Err(Error::InvalidInput(format!("series '{missing}' has no rows")));
            }
            exp.to_vec()
        }
        None => rows.keys().cloned().collect(),
    };
    let first = rows
        .values()
        .filter_map(|m| m.keys().next())
        .min()
        .copied()
        .expect("non-empty");
    let last = rows
        .values()
        .filter_map(|m| m.keys().next_back())
        .max()
        .copied()
        .expect("non-empty");
    let step = BASE_STEP_MINUTES;
    let span = (last - first).num_minutes();
    let len = (span / step + 1) as usize;
    let mut power = Vec::with_capacity(series.len());
    let mut speed = Vec::with_capacity(series.len());
    for s in &series {
        let mut p = vec![f64::NAN; len];
        let mut w = vec![f64::NAN; len];
        for (ts, (pv, wv)) in &rows[s] {
            let d = (*ts - first).num_minutes();
            if d % step != 0 {
                return Err(Error::InvalidInput(format!(
                    "timestamp {} of '{s}' is off the {step}-minute grid",
                    format_timestamp(ts)
                )));
            }
            p[(d / step) as usize] = *pv;
            w[(d / step) as usize] = *wv;
        }
        power.push(p);
        speed.push(w);
    }
    let panel = SeriesPanel::new(first, step, series, power, speed)?;
    let (panel, summaries) = forecast::preprocess(panel)?;
    for s in &summaries {
        info!("{}: min {:.3} median {:.3} max {:.3}", s.series, s.min, s.median, s.max);
    }
    Ok(panel)
}

pub fn ingest(path: &Path, expected: Option<&[String]>) -> Result<SeriesPanel> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(f), expected)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// Multiplier applied to power after ingestion (e.g. 0.001 for MW).
    pub power_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    /// Bottom series; defaults to every series in the data.
    pub bottom: Option<Vec<String>>,
    pub groups: Vec<GroupConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    /// `statistical` or `decision`; ignored when `factors` is given.
    pub preset: Option<String>,
    pub m: Option<usize>,
    pub factors: Option<Vec<usize>>,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            preset: Some("statistical".into()),
            m: None,
            factors: None,
        }
    }
}

impl TemporalConfig {
    pub fn resolve(&self) -> Result<TemporalSpec> {
        match (&self.factors, &self.preset) {
            (Some(f), _) => {
                let m = self.m.or_else(|| f.iter().copied().max()).unwrap_or(1);
                TemporalSpec::new(m, f.clone())
            }
            (None, Some(p)) => TemporalSpec::preset(p),
            (None, None) => match self.m {
                Some(m) => TemporalSpec::all_divisors(m),
                None => Err(Error::Config("temporal section needs a preset, factors or m".into())),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpansConfig {
    /// End of training (exclusive); defaults to 2020-10-01 unless `train_days` is set.
    pub train_end: Option<String>,
    pub train_days: Option<usize>,
    pub validation_days: usize,
    /// End of test (exclusive); defaults to the end of the data.
    pub test_end: Option<String>,
}

impl Default for SpansConfig {
    fn default() -> Self {
        Self {
            train_end: None,
            train_days: None,
            validation_days: 92,
            test_end: None,
        }
    }
}

impl SpansConfig {
    pub fn resolve(&self, panel: &SeriesPanel) -> Result<Spans> {
        let per_day = (1440 / panel.step_minutes) as usize;
        let idx = |s: &str| -> Result<usize> {
            let ts = parse_timestamp(s)?;
            panel
                .index_at(ts)
                .ok_or_else(|| Error::Config(format!("span boundary {s} is outside the data or off-grid")))
        };
        let train_end = match (&self.train_end, self.train_days) {
            (Some(_), Some(_)) => return Err(Error::Config("set either train_end or train_days".into())),
            (Some(s), None) => idx(s)?,
            (None, Some(d)) => d * per_day,
            (None, None) => idx("2020-10-01T00:00:00Z")?,
        };
        let val_end = train_end + self.validation_days * per_day;
        let test_end = match &self.test_end {
            Some(s) => idx(s)?,
            None => panel.len(),
        };
        let spans = Spans {
            train: (0, train_end),
            validation: (train_end, val_end),
            test: (val_end, test_end),
        };
        spans.validate(panel.len()).map_err(|e| Error::Config(e.to_string()))?;
        Ok(spans)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub minutes: i64,
    pub lags: usize,
    pub tod_dummies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Horizon in base steps (8 hours by default).
    pub horizon: usize,
    /// Base steps between consecutive origins.
    pub stride: usize,
    pub features: Vec<FeatureConfig>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            horizon: 48,
            stride: 48,
            features: Vec::new(),
        }
    }
}

impl ForecastConfig {
    pub fn overrides(&self) -> FeatureOverrides {
        FeatureOverrides {
            by_minutes: self
                .features
                .iter()
                .map(|f| {
                    (
                        f.minutes,
                        FeatureSpec {
                            lags: f.lags,
                            tod_dummies: f.tod_dummies,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconcileConfig {
    pub ite_tol: f64,
    pub ite_max_iter: usize,
    /// Set negative reconciled bottom values to zero and re-aggregate.
    pub sntz: bool,
}

impl Default for ReconcileConfig {
    fn default() -> Self {
        Self {
            ite_tol: ITE_TOL,
            ite_max_iter: ITE_MAX_ITER,
            sntz: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub deltas: Vec<f64>,
    pub alpha: f64,
    pub benchmark: String,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.0, 0.01, 0.025],
            alpha: 0.05,
            benchmark: "naive".into(),
        }
    }
}

/// Everything a run needs; every field has a documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Base models, `naive` and/or `linreg`.
    pub models: Vec<String>,
    pub methods: Vec<String>,
    pub errors: String,
    pub data: DataConfig,
    pub hierarchy: HierarchyConfig,
    pub temporal: TemporalConfig,
    pub spans: SpansConfig,
    pub forecast: ForecastConfig,
    pub reconcile: ReconcileConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            models: vec!["linreg".into()],
            methods: PipelineMethod::ALL.iter().map(|m| m.as_str().to_string()).collect(),
            errors: ErrorSource::Validation.as_str().into(),
            data: DataConfig::default(),
            hierarchy: HierarchyConfig::default(),
            temporal: TemporalConfig::default(),
            spans: SpansConfig::default(),
            forecast: ForecastConfig::default(),
            reconcile: ReconcileConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML config; a relative data path is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn methods(&self) -> Result<Vec<PipelineMethod>> {
        let mut out: Vec<PipelineMethod> = self.methods.iter().map(|m| m.parse()).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        Ok(out)
    }

    pub fn models(&self) -> Result<Vec<BaseModelKind>> {
        let mut out: Vec<BaseModelKind> = self.models.iter().map(|m| m.parse()).collect::<Result<_>>()?;
        out.dedup();
        if out.is_empty() {
            return Err(Error::Config("at least one base model is required".into()));
        }
        Ok(out)
    }

    pub fn error_source(&self) -> Result<ErrorSource> {
        self.errors
            .parse()
            .map_err(|_| Error::Config(format!("unknown error source '{}'", self.errors)))
    }

    pub fn validate(&self) -> Result<()> {
        self.methods()?;
        self.models()?;
        self.error_source()?;
        self.temporal.resolve()?;
        if self.data.path.is_some() == self.data.synth.is_some() {
            return Err(Error::Config("set exactly one of data.path and data.synth".into()));
        }
        if self.evaluation.deltas.iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(Error::Config("thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Bottom panel, hierarchy, aggregated levels and resolved spans.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub structure: CrossTemporalStructure,
    pub panels: LevelPanels,
    pub spans: Spans,
}

pub fn load_bottom_panel(cfg: &ExperimentConfig) -> Result<SeriesPanel> {
    let mut p = match (&cfg.data.path, &cfg.data.synth) {
        (Some(path), None) => ingest(path, cfg.hierarchy.bottom.as_deref())?,
        (None, Some(s)) => synth_data(s, cfg.seed)?,
        _ => return Err(Error::Config("set exactly one of data.path and data.synth".into())),
    };
    if let Some(c) = cfg.data.power_scale {
        p.scale_power(c);
    }
    Ok(p)
}

pub fn build_hierarchy(cfg: &ExperimentConfig, bottom: &SeriesPanel) -> Result<CrossSectionalHierarchy> {
    let labels = cfg.hierarchy.bottom.clone().unwrap_or_else(|| bottom.series.clone());
    let groups: Vec<(String, Vec<String>)> = cfg
        .hierarchy
        .groups
        .iter()
        .map(|g| (g.name.clone(), g.members.clone()))
        .collect();
    CrossSectionalHierarchy::from_groups(labels, &groups)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let bottom = load_bottom_panel(cfg).map_err(|e| e.at_stage("ingest"))?;
    let (structure, panels) = (|| {
        let h = build_hierarchy(cfg, &bottom)?;
        let te = cfg.temporal.resolve()?;
        let full = bottom.with_hierarchy(&h)?;
        let panels = LevelPanels::new(&full, &te)?;
        Ok((CrossTemporalStructure::new(h, te), panels))
    })()
    .map_err(|e: Error| e.at_stage("aggregate"))?;
    let spans = cfg.spans.resolve(panels.base()).map_err(|e| e.at_stage("config"))?;
    Ok(Prepared {
        structure,
        panels,
        spans,
    })
}

/// Base forecasts and covariance inputs for one model.
#[derive(Debug, Clone)]
pub struct ModelForecasts {
    pub kind: BaseModelKind,
    /// Test-span base forecasts, clamped at zero.
    pub test: ForecastSet,
    pub errors: ErrorPanel<f64>,
}

#[derive(Debug, Clone)]
pub struct ForecastStage {
    pub test_actuals: ForecastSet,
    pub benchmark: ForecastSet,
    pub models: Vec<ModelForecasts>,
}

/// Fits, forecasts and collects the error panel for every configured model.
pub fn run_forecasts(cfg: &ExperimentConfig, prep: &Prepared, source: ErrorSource) -> Result<ForecastStage> {
    let overrides = cfg.forecast.overrides();
    let roll = |kind| {
        forecast::rolling_origin(
            &prep.panels,
            kind,
            &prep.spans,
            cfg.forecast.horizon,
            cfg.forecast.stride,
            &overrides,
        )
    };
    let naive = roll(BaseModelKind::Naive)?;
    let mut models = Vec::new();
    for kind in cfg.models()? {
        let out = if kind == BaseModelKind::Naive {
            naive.clone()
        } else {
            roll(kind)?
        };
        let mut test = out.test.clone();
        test.clamp_nonneg();
        let errors = match source {
            ErrorSource::Validation => {
                let mut val = out.validation.clone();
                val.clamp_nonneg();
                collect_validation_errors(&val, &out.validation_actuals, &prep.structure)?
            }
            ErrorSource::InSample => {
                let actuals = forecast::level_actuals(&prep.panels, prep.spans.train.1);
                collect_insample_residuals(&out.fitted, &actuals, &prep.structure)?
            }
        };
        info!("{kind}: {} error observations from {source} errors", errors.n_obs());
        models.push(ModelForecasts { kind, test, errors });
    }
    Ok(ForecastStage {
        test_actuals: naive.test_actuals.clone(),
        benchmark: naive.test,
        models,
    })
}

/// Builds the reconciler for `method` from the error panel.
pub fn build_reconciler(
    method: PipelineMethod,
    structure: &CrossTemporalStructure,
    errors: &ErrorPanel<f64>,
    cfg: &ReconcileConfig,
) -> Result<Option<Reconciler<f64>>> {
    let projection = |kind| -> Result<Option<Reconciler<f64>>> {
        let model = estimate(kind, errors, structure)?;
        Ok(Some(Reconciler::Projection(ProjectionReconciler::new(
            structure, &model,
        )?)))
    };
    match method {
        PipelineMethod::Base => Ok(None),
        PipelineMethod::CtBu => Ok(Some(Reconciler::BottomUp(structure.clone()))),
        PipelineMethod::CtStr => projection(CovarianceKind::Str),
        PipelineMethod::CtWlsv => projection(CovarianceKind::Wlsv),
        PipelineMethod::CtBdshr => projection(CovarianceKind::Bdshr),
        PipelineMethod::CtAcov => projection(CovarianceKind::Acov),
        PipelineMethod::Pbu => {
            let w = estimate(CovarianceKind::ShrCs, errors, structure)?;
            Ok(Some(Reconciler::PartlyBottomUp(PartlyBottomUp::new(structure, &w)?)))
        }
        PipelineMethod::Ite => {
            let acov = estimate(CovarianceKind::Acov, errors, structure)?;
            let shr = estimate(CovarianceKind::ShrCs, errors, structure)?;
            Ok(Some(Reconciler::Iterative(IterativeReconciler::from_models(
                structure,
                &acov,
                &shr,
                cfg.ite_tol,
                cfg.ite_max_iter,
            )?)))
        }
    }
}

/// Per-method reconciliation diagnostics over all test stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodDiagnostics {
    pub model: String,
    pub method: PipelineMethod,
    pub stacks: usize,
    pub max_coherence_residual: f64,
    pub max_iterations: usize,
    pub all_converged: bool,
    pub cleanups: usize,
    pub negatives_clamped: usize,
}

/// Reconciled test forecasts of one model, keyed by method.
pub fn run_reconciliation(
    cfg: &ExperimentConfig,
    structure: &CrossTemporalStructure,
    model: &ModelForecasts,
    methods: &[PipelineMethod],
) -> Result<(Vec<(PipelineMethod, ForecastSet)>, Vec<MethodDiagnostics>)> {
    let stacks = model.test.stacks(structure)?;
    let nonneg = if cfg.reconcile.sntz { NonNeg::Sntz } else { NonNeg::None };
    let mut sets = Vec::new();
    let mut diags = Vec::new();
    for &method in methods {
        let Some(rec) = build_reconciler(method, structure, &model.errors, &cfg.reconcile)? else {
            continue;
        };
        let results = rec.reconcile_batch(&stacks, nonneg)?;
        let ys: Vec<Vec<f64>> = results.iter().map(|r| r.y.as_slice().to_vec()).collect();
        diags.push(MethodDiagnostics {
            model: model.kind.to_string(),
            method,
            stacks: results.len(),
            max_coherence_residual: results
                .iter()
                .map(|r| r.diagnostics.coherence_residual)
                .fold(0.0, f64::max),
            max_iterations: results
                .iter()
                .filter_map(|r| r.diagnostics.iterations)
                .max()
                .unwrap_or(0),
            all_converged: results.iter().all(|r| r.diagnostics.converged != Some(false)),
            cleanups: results.iter().filter(|r| r.diagnostics.cleanup_applied).count(),
            negatives_clamped: results.iter().map(|r| r.diagnostics.negatives_clamped).sum(),
        });
        sets.push((method, model.test.with_stacks(model.kind.as_str(), &ys)?));
    }
    Ok((sets, diags))
}

/// Approach label used in metric tables.
pub fn approach_name(model: BaseModelKind, method: PipelineMethod) -> String {
    format!("{model}_{method}")
}

/// Metric tables for one run.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: AccuracyTable,
    /// One entry per level (minutes) plus `None` for all levels pooled.
    pub mcb: Vec<(Option<i64>, FriedmanMcb)>,
    pub decision: DecisionCostReport,
}

pub fn run_evaluation(
    cfg: &EvaluationConfig,
    approaches: &[(String, &ForecastSet)],
    actuals: &ForecastSet,
    total: &str,
) -> Result<Evaluation> {
    let accuracy = evaluate::accuracy_table(approaches, actuals, &cfg.benchmark, BASE_STEP_MINUTES)?;
    let names: Vec<String> = approaches.iter().map(|(n, _)| n.clone()).collect();
    let mut mcb = Vec::new();
    if approaches.len() >= 2 {
        let te = &actuals.temporal;
        let mut levels: Vec<Option<usize>> = (0..te.p()).map(Some).collect();
        levels.push(None);
        for l in levels {
            let blocks = evaluate::squared_error_blocks(approaches, actuals, l)?;
            if blocks.nrows() < evaluate::MIN_BLOCKS {
                log::warn!("skipping MCB test: only {} blocks", blocks.nrows());
                continue;
            }
            let minutes = l.map(|l| te.factors()[l] as i64 * BASE_STEP_MINUTES);
            mcb.push((minutes, evaluate::friedman_mcb(&blocks, &names, cfg.alpha)?));
        }
    }
    let decision = evaluate::decision_cost_report(approaches, actuals, total, &cfg.deltas, BASE_STEP_MINUTES)?;
    if !decision.is_monotone() {
        return Err(Error::InvalidInput(
            "decision-cost event counts grow with the threshold".into(),
        ));
    }
    Ok(Evaluation {
        accuracy,
        mcb,
        decision,
    })
}

pub fn write_mcb_csv<W: std::io::Write>(mcb: &[(Option<i64>, FriedmanMcb)], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "level",
        "approach",
        "mean_rank",
        "lower",
        "upper",
        "worse_than_best",
        "friedman_stat",
        "p_value",
        "blocks",
    ])?;
    for (minutes, f) in mcb {
        let level = minutes.map_or_else(|| "All".to_string(), |m| m.to_string());
        for (j, name) in f.approaches.iter().enumerate() {
            let (lo, hi) = f.interval(j);
            wtr.write_record([
                level.clone(),
                name.clone(),
                format_metric(f.mean_ranks[j]),
                format_metric(lo),
                format_metric(hi),
                f.worse_than_best[j].to_string(),
                format_metric(f.statistic),
                format_metric(f.p_value),
                f.blocks.to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io("mcb csv", e))?;
    Ok(())
}

pub fn write_diagnostics_csv<W: std::io::Write>(d: &[MethodDiagnostics], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "model",
        "method",
        "stacks",
        "max_coherence_residual",
        "max_iterations",
        "all_converged",
        "cleanups",
        "negatives_clamped",
    ])?;
    for r in d {
        wtr.write_record([
            r.model.clone(),
            r.method.to_string(),
            r.stacks.to_string(),
            format!("{:.3e}", r.max_coherence_residual),
            r.max_iterations.to_string(),
            r.all_converged.to_string(),
            r.cleanups.to_string(),
            r.negatives_clamped.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("diagnostics csv", e))?;
    Ok(())
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Relative artifact paths.
pub mod paths {
    pub const CONFIG: &str = "config.toml";
    pub const MANIFEST: &str = "manifest.toml";
    pub const LEVELS: &str = "levels.csv";
    pub const ACTUALS: &str = "forecasts/actual_test.csv";
    pub const ACCURACY: &str = "metrics/accuracy.csv";
    pub const MSE: &str = "metrics/mse.csv";
    pub const MCB: &str = "metrics/mcb.csv";
    pub const DECISION: &str = "metrics/decision_costs.csv";
    pub const DIAGNOSTICS: &str = "metrics/diagnostics.csv";
    pub const METRICS: [&str; 5] = [ACCURACY, MSE, MCB, DECISION, DIAGNOSTICS];

    pub fn base(model: &str) -> String {
        format!("forecasts/base_{model}.csv")
    }

    pub fn reconciled(model: &str) -> String {
        format!("forecasts/reconciled_{model}.csv")
    }

    pub fn errors(model: &str, source: &str) -> String {
        format!("errors/{model}_{source}.csv")
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    config_sha256: String,
    crate_version: String,
    seed: u64,
    error_source: String,
    temporal_factors: Vec<usize>,
    series: Vec<String>,
    test_origins: usize,
    artifacts: Vec<String>,
    timings_ms: BTreeMap<String, u128>,
}

/// In-memory artifact tree, flushed to disk in one step.
#[derive(Debug, Default)]
struct Artifacts {
    files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn put(&mut self, rel: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(rel.into(), bytes);
    }

    /// Writes into a staging directory next to `out` and renames it into
    /// place; nothing is left behind on failure.
    fn commit(&self, out: &Path) -> Result<()> {
        let parent = match out.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
        let write_all = || -> Result<()> {
            if staging.exists() {
                fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
            }
            for (rel, bytes) in &self.files {
                let p = staging.join(rel);
                if let Some(d) = p.parent() {
                    fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            }
            if out.exists() {
                fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
            }
            fs::rename(&staging, out).map_err(|e| Error::io(out, e))
        };
        let r = write_all();
        if r.is_err() && staging.exists() {
            let _ = fs::remove_dir_all(&staging);
        }
        r
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub config_sha256: String,
    pub accuracy: AccuracyTable,
    pub diagnostics: Vec<MethodDiagnostics>,
}

/// Full experiment: ingest, aggregate, forecast, reconcile, evaluate and
/// write every artifact atomically under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let mut timings = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut BTreeMap<String, u128>| {
        timings.insert(name.to_string(), clock.elapsed().as_millis());
        clock = Instant::now();
    };
    let prep = prepare(cfg)?;
    lap("prepare", &mut timings);
    let source = cfg.error_source()?;
    let methods = cfg.methods()?;
    let fc = run_forecasts(cfg, &prep, source).map_err(|e| e.at_stage("forecast"))?;
    lap("forecast", &mut timings);

    let mut art = Artifacts::default();
    art.put(paths::ACTUALS, csv_bytes(|b| fc.test_actuals.write_csv(b, None))?);
    art.put(paths::base("naive"), csv_bytes(|b| fc.benchmark.write_csv(b, None))?);
    let mut reconciled = Vec::new();
    let mut diagnostics = Vec::new();
    for m in &fc.models {
        art.put(paths::base(m.kind.as_str()), csv_bytes(|b| m.test.write_csv(b, None))?);
        art.put(
            paths::errors(m.kind.as_str(), source.as_str()),
            csv_bytes(|b| m.errors.write_csv(b, &prep.structure))?,
        );
        let (sets, diags) =
            run_reconciliation(cfg, &prep.structure, m, &methods).map_err(|e| e.at_stage("reconcile"))?;
        if !sets.is_empty() {
            let mut buf = Vec::new();
            for (i, (method, set)) in sets.iter().enumerate() {
                let mut one = Vec::new();
                set.write_csv(&mut one, Some(method.as_str()))?;
                let skip = if i == 0 {
                    0
                } else {
                    one.iter().position(|b| *b == b'\n').map_or(0, |p| p + 1)
                };
                buf.extend_from_slice(&one[skip..]);
            }
            art.put(paths::reconciled(m.kind.as_str()), buf);
        }
        diagnostics.extend(diags);
        reconciled.push((m, sets));
    }
    lap("reconcile", &mut timings);

    let mut approaches: Vec<(String, &ForecastSet)> = vec![(cfg.evaluation.benchmark.clone(), &fc.benchmark)];
    for (m, sets) in &reconciled {
        if methods.contains(&PipelineMethod::Base) {
            approaches.push((approach_name(m.kind, PipelineMethod::Base), &m.test));
        }
        for (method, set) in sets {
            approaches.push((approach_name(m.kind, *method), set));
        }
    }
    let total = prep.structure.cross_sectional().labels()[0].clone();
    let ev =
        run_evaluation(&cfg.evaluation, &approaches, &fc.test_actuals, &total).map_err(|e| e.at_stage("evaluate"))?;
    art.put(paths::ACCURACY, csv_bytes(|b| ev.accuracy.write_csv(b))?);
    art.put(paths::MSE, csv_bytes(|b| ev.accuracy.write_mse_csv(b))?);
    art.put(paths::MCB, csv_bytes(|b| write_mcb_csv(&ev.mcb, b))?);
    art.put(paths::DECISION, csv_bytes(|b| ev.decision.write_csv(b))?);
    art.put(
        paths::DIAGNOSTICS,
        csv_bytes(|b| write_diagnostics_csv(&diagnostics, b))?,
    );
    lap("evaluate", &mut timings);

    let config_text = cfg.to_toml()?;
    let config_sha256 = sha256_hex(config_text.as_bytes());
    art.put(paths::CONFIG, config_text.into_bytes());
    let manifest = Manifest {
        config_sha256: config_sha256.clone(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        error_source: source.to_string(),
        temporal_factors: prep.structure.temporal().factors().to_vec(),
        series: prep.structure.cross_sectional().labels(),
        test_origins: fc.test_actuals.origins.len(),
        artifacts: art.files.keys().cloned().collect(),
        timings_ms: timings,
    };
    let manifest = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    art.put(paths::MANIFEST, manifest.into_bytes());
    art.commit(&cfg.out_dir).map_err(|e| e.at_stage("write"))?;
    info!("artifacts written to {}", cfg.out_dir.display());
    Ok(RunSummary {
        out_dir: cfg.out_dir.clone(),
        config_sha256,
        accuracy: ev.accuracy,
        diagnostics,
    })
}

/// `aggregate` stage: level panels in long format.
pub fn aggregate_stage(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let prep = prepare(cfg)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["timestamp", "series_id", "level_k", "power_kw", "wind_speed_ms"])?;
    for (l, &k) in prep.panels.temporal.factors().iter().enumerate() {
        let p = &prep.panels.levels[l];
        for t in 0..p.len() {
            let ts = format_timestamp(&p.timestamp(t));
            for (i, s) in p.series.iter().enumerate() {
                wtr.write_record([
                    ts.as_str(),
                    s,
                    &k.to_string(),
                    &format!("{:?}", p.power[i][t]),
                    &format!("{:?}", p.speed[i][t]),
                ])?;
            }
        }
    }
    let bytes = wtr.into_inner().map_err(|e| Error::io(paths::LEVELS, e.into_error()))?;
    let path = cfg.out_dir.join(paths::LEVELS);
    write_atomic(&path, &bytes).map_err(|e| e.at_stage("write"))?;
    Ok(path)
}

/// `forecast` stage: base forecasts, test actuals and error panels.
pub fn forecast_stage(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let prep = prepare(cfg)?;
    let source = cfg.error_source()?;
    let fc = run_forecasts(cfg, &prep, source).map_err(|e| e.at_stage("forecast"))?;
    let mut files = vec![
        (
            paths::ACTUALS.to_string(),
            csv_bytes(|b| fc.test_actuals.write_csv(b, None))?,
        ),
        (paths::base("naive"), csv_bytes(|b| fc.benchmark.write_csv(b, None))?),
    ];
    for m in &fc.models {
        files.push((paths::base(m.kind.as_str()), csv_bytes(|b| m.test.write_csv(b, None))?));
        files.push((
            paths::errors(m.kind.as_str(), source.as_str()),
            csv_bytes(|b| m.errors.write_csv(b, &prep.structure))?,
        ));
    }
    write_files(&cfg.out_dir, files)
}

fn write_files(out: &Path, files: Vec<(String, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (rel, bytes) in files {
        let p = out.join(rel);
        write_atomic(&p, &bytes).map_err(|e| e.at_stage("write"))?;
        written.push(p);
    }
    Ok(written)
}

/// Structure and horizon a stage needs to read artifacts back, without
/// re-reading the data.
fn structure_from_artifacts(cfg: &ExperimentConfig) -> Result<CrossTemporalStructure> {
    let te = cfg.temporal.resolve()?;
    let bottom = match &cfg.hierarchy.bottom {
        Some(b) => b.clone(),
        None => load_bottom_panel(cfg)?.series,
    };
    let groups: Vec<(String, Vec<String>)> = cfg
        .hierarchy
        .groups
        .iter()
        .map(|g| (g.name.clone(), g.members.clone()))
        .collect();
    Ok(CrossTemporalStructure::new(
        CrossSectionalHierarchy::from_groups(bottom, &groups)?,
        te,
    ))
}

fn read_set(path: &Path, structure: &CrossTemporalStructure, horizon: usize) -> Result<BTreeMap<String, ForecastSet>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ForecastSet::read_csv(
        std::io::BufReader::new(f),
        &structure.cross_sectional().labels(),
        structure.temporal(),
        horizon,
    )
}

fn read_single(path: &Path, structure: &CrossTemporalStructure, horizon: usize) -> Result<ForecastSet> {
    let mut sets = read_set(path, structure, horizon)?;
    let n = sets.len();
    match (sets.pop_first(), n) {
        (Some((_, s)), 1) => Ok(s),
        _ => Err(Error::InvalidInput(format!(
            "{} should hold exactly one forecast set",
            path.display()
        ))),
    }
}

/// `reconcile` stage: reads base forecasts and error panels, writes reconciled forecasts.
pub fn reconcile_stage(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let structure = structure_from_artifacts(cfg).map_err(|e| e.at_stage("config"))?;
    let source = cfg.error_source()?;
    let methods = cfg.methods()?;
    let mut files = Vec::new();
    let mut diagnostics = Vec::new();
    for kind in cfg.models()? {
        let (test, errors) = (|| {
            let test = read_single(
                &cfg.out_dir.join(paths::base(kind.as_str())),
                &structure,
                cfg.forecast.horizon,
            )?;
            let p = cfg.out_dir.join(paths::errors(kind.as_str(), source.as_str()));
            let f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
            let errors = ErrorPanel::read_csv(std::io::BufReader::new(f), source, &structure)?;
            Ok((test, errors))
        })()
        .map_err(|e: Error| e.at_stage("read"))?;
        let m = ModelForecasts { kind, test, errors };
        let (sets, diags) = run_reconciliation(cfg, &structure, &m, &methods).map_err(|e| e.at_stage("reconcile"))?;
        let mut buf = Vec::new();
        for (i, (method, set)) in sets.iter().enumerate() {
            let mut one = Vec::new();
            set.write_csv(&mut one, Some(method.as_str()))?;
            let skip = if i == 0 {
                0
            } else {
                one.iter().position(|b| *b == b'\n').map_or(0, |p| p + 1)
            };
            buf.extend_from_slice(&one[skip..]);
        }
        if !sets.is_empty() {
            files.push((paths::reconciled(kind.as_str()), buf));
        }
        diagnostics.extend(diags);
    }
    files.push((
        paths::DIAGNOSTICS.to_string(),
        csv_bytes(|b| write_diagnostics_csv(&diagnostics, b))?,
    ));
    write_files(&cfg.out_dir, files)
}

/// `evaluate` stage: reads forecast artifacts and writes the metric tables.
pub fn evaluate_stage(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let structure = structure_from_artifacts(cfg).map_err(|e| e.at_stage("config"))?;
    let h = cfg.forecast.horizon;
    let methods = cfg.methods()?;
    let (actuals, owned) = (|| {
        let actuals = read_single(&cfg.out_dir.join(paths::ACTUALS), &structure, h)?;
        let mut owned: Vec<(String, ForecastSet)> = vec![(
            cfg.evaluation.benchmark.clone(),
            read_single(&cfg.out_dir.join(paths::base("naive")), &structure, h)?,
        )];
        for kind in cfg.models()? {
            if methods.contains(&PipelineMethod::Base) {
                let base = read_single(&cfg.out_dir.join(paths::base(kind.as_str())), &structure, h)?;
                owned.push((approach_name(kind, PipelineMethod::Base), base));
            }
            let rp = cfg.out_dir.join(paths::reconciled(kind.as_str()));
            if rp.exists() {
                let sets: HashMap<String, ForecastSet> = read_set(&rp, &structure, h)?.into_iter().collect();
                for &m in &methods {
                    if let Some(s) = sets.get(m.as_str()) {
                        owned.push((approach_name(kind, m), s.clone()));
                    }
                }
            }
        }
        Ok((actuals, owned))
    })()
    .map_err(|e: Error| e.at_stage("read"))?;
    let approaches: Vec<(String, &ForecastSet)> = owned.iter().map(|(n, s)| (n.clone(), s)).collect();
    let total = structure.cross_sectional().labels()[0].clone();
    let ev = run_evaluation(&cfg.evaluation, &approaches, &actuals, &total).map_err(|e| e.at_stage("evaluate"))?;
    write_files(
        &cfg.out_dir,
        vec![
            (paths::ACCURACY.into(), csv_bytes(|b| ev.accuracy.write_csv(b))?),
            (paths::MSE.into(), csv_bytes(|b| ev.accuracy.write_mse_csv(b))?),
            (paths::MCB.into(), csv_bytes(|b| write_mcb_csv(&ev.mcb, b))?),
            (paths::DECISION.into(), csv_bytes(|b| ev.decision.write_csv(b))?),
        ],
    )
}

/// `synth` stage: writes a synthetic panel in the ingestion schema.
pub fn synth_stage(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<()> {
    let p = synth_data(cfg, seed)?;
    let bytes = csv_bytes(|b| write_panel_csv(&p, b))?;
    write_atomic(out, &bytes)
}

/// Timestamp `days` days after `start`.
pub fn days_after(start: &str, days: usize) -> Result<String> {
    Ok(format_timestamp(
        &(parse_timestamp(start)? + Duration::days(days as i64)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_seeded_and_nonnegative() {
        let cfg = SynthConfig {
            days: 3,
            ..SynthConfig::default()
        };
        let a = synth_data(&cfg, 7).unwrap();
        assert_eq!(a, synth_data(&cfg, 7).unwrap());
        assert_ne!(a, synth_data(&cfg, 8).unwrap());
        assert_eq!(a.len(), 3 * 144);
        assert!(a.power.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn noiseless_synth_is_a_sinusoid() {
        let mut cfg = SynthConfig {
            days: 2,
            n_bottom: 1,
            ..SynthConfig::default()
        };
        cfg.noise.sd = 0.0;
        let p = synth_data(&cfg, 1).unwrap();
        // one day apart the values repeat
        assert!((p.power[0][10] - p.power[0][154]).abs() < 1e-9);
    }

    #[test]
    fn ingest_roundtrip_and_errors() {
        let cfg = SynthConfig {
            days: 1,
            ..SynthConfig::default()
        };
        let p = synth_data(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&p, &mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), None).unwrap();
        assert_eq!(back, p);

        let dup =
            "timestamp,series_id,power_kw,wind_speed_ms\n2020-01-01T00:00:00Z,a,1,2\n2020-01-01T00:00:00Z,a,1,2\n";
        assert!(matches!(ingest_reader(dup.as_bytes(), None), Err(Error::InvalidInput(m)) if m.contains("duplicate")));
        let unknown = "timestamp,series_id,power_kw,wind_speed_ms\n2020-01-01T00:00:00Z,zz,1,2\n";
        let exp = vec!["a".to_string()];
        assert!(
            matches!(ingest_reader(unknown.as_bytes(), Some(&exp)), Err(Error::InvalidInput(m)) if m.contains("unknown"))
        );
        let gap =
            "timestamp,series_id,power_kw,wind_speed_ms\n2020-01-01T00:00:00Z,a,1,2\n2020-01-01T00:20:00Z,a,1,2\n";
        assert!(matches!(ingest_reader(gap.as_bytes(), None), Err(Error::MissingData(m)) if m.contains("00:10:00")));
        let neg = "timestamp,series_id,power_kw,wind_speed_ms\n2020-01-01T00:00:00Z,a,-4,2\n";
        assert_eq!(ingest_reader(neg.as_bytes(), None).unwrap().power[0][0], 0.0);
    }

    #[test]
    fn config_defaults_roundtrip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.methods().unwrap().len(), 8);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let bad = ExperimentConfig {
            methods: vec!["nope".into()],
            ..ExperimentConfig::default()
        };
        assert!(bad.methods().is_err());
    }
}
