use ctrecon::forecast::{
    actuals_at, fit_models, forecast_naive, forecast_origins, origins_in, rolling_origin, BaseModelKind,
    FeatureOverrides, FeatureSpec, LevelPanels, SeriesPanel, Spans,
};
use ctrecon::hierarchy::{CrossSectionalHierarchy, CrossTemporalStructure, TemporalSpec};
use ctrecon::pipeline::{synth_data, SynthConfig};

const DAY: usize = 144;

fn setup(days: usize, temporal: TemporalSpec) -> (CrossTemporalStructure, SeriesPanel, LevelPanels) {
    let cfg = SynthConfig {
        days,
        ..SynthConfig::default()
    };
    let bottom = synth_data(&cfg, 7).unwrap();
    let h = CrossSectionalHierarchy::from_groups(bottom.series.clone(), &[]).unwrap();
    let full = bottom.with_hierarchy(&h).unwrap();
    let panels = LevelPanels::new(&full, &temporal).unwrap();
    (CrossTemporalStructure::new(h, temporal), full, panels)
}

#[test]
fn forecasts_ignore_data_after_the_origin() {
    let te = TemporalSpec::decision();
    let (_, full, panels) = setup(20, te.clone());
    let train_end = 12 * DAY;
    let models = fit_models(&panels, BaseModelKind::LinReg, train_end, &FeatureOverrides::default()).unwrap();
    let origin = 15 * DAY;
    let before = forecast_origins(&panels, &models, &[origin], 48).unwrap();

    let mut future = full.clone();
    for i in 0..future.n_series() {
        for t in origin..future.len() {
            future.power[i][t] = 1e6 + t as f64;
            future.speed[i][t] = 99.0;
        }
    }
    let tampered = LevelPanels::new(&future, &te).unwrap();
    let after = forecast_origins(&tampered, &models, &[origin], 48).unwrap();
    assert_eq!(before, after);

    // refitting on tampered data leaves the model unchanged when the tampering is past train_end
    let refit = fit_models(
        &tampered,
        BaseModelKind::LinReg,
        train_end,
        &FeatureOverrides::default(),
    )
    .unwrap();
    assert_eq!(refit.models, models.models);
}

#[test]
fn moving_average_matches_direct_window() {
    let (_, _, panels) = setup(10, TemporalSpec::statistical());
    let twenty = panels.levels.iter().find(|p| p.step_minutes == 20).unwrap();
    let spec = FeatureSpec::for_minutes(20);
    assert_eq!(spec.lags, 24);
    for t in [24, 100, 300] {
        let row = spec.row(&twenty.power[1][..t], &twenty.speed[1][..t], twenty.timestamp(t));
        let window = &twenty.power[1][t - 24..t];
        let mean = window.iter().sum::<f64>() / 24.0;
        assert!((row[2 * spec.lags] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        assert_eq!(row[0], twenty.power[1][t - 1]);
        assert_eq!(row[spec.lags], twenty.speed[1][t - 1]);
    }
}

#[test]
fn one_model_per_series_and_level() {
    let (s, _, panels) = setup(30, TemporalSpec::statistical());
    let models = fit_models(&panels, BaseModelKind::LinReg, 25 * DAY, &FeatureOverrides::default()).unwrap();
    assert_eq!(models.count(), s.n() * s.temporal().p());
    assert_eq!(models.count(), 30);
}

#[test]
fn naive_forecast_repeats_last_value() {
    assert_eq!(forecast_naive(&[1.0, 2.0, 7.5], 4).unwrap(), vec![7.5; 4]);
    assert!(forecast_naive(&[], 4).is_err());
}

#[test]
fn ninety_two_day_span_has_276_origins() {
    assert_eq!(origins_in((0, 92 * DAY), 48, 48, 48).len(), 276);
    assert_eq!(origins_in((0, 92 * DAY), 6, 48, 48).len(), 276);
}

#[test]
fn horizon_steps_per_level() {
    let te = TemporalSpec::statistical();
    let (_, _, panels) = setup(4, te.clone());
    let a = actuals_at(&panels, &[0, 48], 48).unwrap();
    for (l, &k) in te.factors().iter().enumerate() {
        assert_eq!(a.steps(l), 48 / k);
    }
    assert_eq!(a.cycles(), 1);
    let d = actuals_at(
        &LevelPanels::new(&panels.levels[te.p() - 1], &TemporalSpec::decision()).unwrap(),
        &[0],
        48,
    )
    .unwrap();
    assert_eq!(d.cycles(), 8);
}

#[test]
fn base_forecasts_are_incoherent() {
    let te = TemporalSpec::statistical();
    let (s, _, panels) = setup(40, te);
    let spans = Spans {
        train: (0, 28 * DAY),
        validation: (28 * DAY, 34 * DAY),
        test: (34 * DAY, 40 * DAY),
    };
    let out = rolling_origin(
        &panels,
        BaseModelKind::LinReg,
        &spans,
        48,
        48,
        &FeatureOverrides::default(),
    )
    .unwrap();
    assert_eq!(out.test.origins.len(), 18);
    let worst = out
        .test
        .stacks(&s)
        .unwrap()
        .iter()
        .map(|y| s.coherence_residual(y).unwrap())
        .fold(0.0, f64::max);
    assert!(worst > 0.0);
    // actual stacks are coherent by construction
    for y in out.test_actuals.stacks(&s).unwrap() {
        assert!(s.coherence_residual(&y).unwrap() <= 1e-9 * y.iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }
}
