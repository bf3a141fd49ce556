use astroseq_core::neuroglia::{build_geometry, run_stp_cycles, DriveSpec};
use astroseq_core::retention::{retention_schedule, uniform_schedule, MacroModel, RetentionSchedule, ScheduleCache, ScheduleSource};
use astroseq_core::Error;
use proptest::prelude::*;

/// Boundary differences of the synapse-averaged LTP trace, straight from
/// the sampled matrices.
fn oracle_factors(model: &MacroModel, n_segments: usize) -> Vec<f64> {
    let g = build_geometry(model.n_neurons, model.spacing).unwrap();
    let trace = run_stp_cycles(&model.params, &g, model.scale, n_segments, model.cycle_seconds, &model.drive).unwrap();
    let mut previous = 0.0;
    let mut increments = Vec::new();
    for &k in &trace.cycle_boundaries {
        let m = &trace.p_l_series[k];
        let mean = m.data().iter().sum::<f64>() / m.len() as f64;
        increments.push(mean - previous);
        previous = mean;
    }
    let total: f64 = increments.iter().sum();
    increments.iter().map(|d| d / total).collect()
}

#[test]
fn derived_schedules_match_the_trace() {
    let model = MacroModel::default();
    for t in [2, 4, 6, 8] {
        let schedule = retention_schedule(t, &model).unwrap();
        let expected = oracle_factors(&model, t);
        for (a, b) in schedule.factors.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "T = {t}: {:?} vs {expected:?}", schedule.factors);
        }
        assert!((schedule.factors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(schedule.factors.windows(2).all(|w| w[1] <= w[0]), "T = {t}: {:?}", schedule.factors);
        assert!(schedule.factors.iter().all(|f| *f > 0.0 && *f <= 1.0));
    }
}

#[test]
fn schedules_for_different_lengths_share_ratios() {
    let model = MacroModel::default();
    let short = retention_schedule(4, &model).unwrap().factors;
    let long = retention_schedule(8, &model).unwrap().factors;
    for k in 1..4 {
        let (a, b) = (short[k] / short[0], long[k] / long[0]);
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
    }
}

#[test]
fn silent_drive_is_degenerate() {
    let model = MacroModel { drive: DriveSpec::silent(), ..MacroModel::default() };
    assert!(matches!(retention_schedule(3, &model), Err(Error::DegenerateSchedule(_))));
}

#[test]
fn uniform_factors_are_one() {
    let s = uniform_schedule(5).unwrap();
    assert_eq!(s.factors, vec![1.0; 5]);
    assert!(s.is_uniform());
}

#[test]
fn cache_hits_return_identical_schedules() {
    let dir = tempfile::tempdir().unwrap();
    let cache = ScheduleCache::new(dir.path());
    let model = MacroModel { cycle_seconds: 10.0, ..MacroModel::default() };
    let (first, hit) = cache.get_or_compute(3, &model).unwrap();
    assert!(!hit);
    let (second, hit) = cache.get_or_compute(3, &model).unwrap();
    assert!(hit);
    assert_eq!(first, second);
    let changed = MacroModel { scale: 3.0, ..model.clone() };
    assert_ne!(ScheduleCache::key(3, &model), ScheduleCache::key(3, &changed));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn increments_normalize_to_one(increments in prop::collection::vec(1e-6f64..10.0, 1..16)) {
        let s = RetentionSchedule::from_increments(&increments, ScheduleSource::Manual).unwrap();
        prop_assert!((s.factors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.factors.iter().all(|f| *f > 0.0 && *f <= 1.0));
    }

    #[test]
    fn factors_ignore_the_scale_of_increments(
        increments in prop::collection::vec(1e-6f64..10.0, 1..16),
        scale in 1e-3f64..1e3,
    ) {
        let a = RetentionSchedule::from_increments(&increments, ScheduleSource::Manual).unwrap();
        let scaled: Vec<f64> = increments.iter().map(|v| v * scale).collect();
        let b = RetentionSchedule::from_increments(&scaled, ScheduleSource::Manual).unwrap();
        for (x, y) in a.factors.iter().zip(&b.factors) {
            prop_assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn non_positive_increment_is_rejected(
        mut increments in prop::collection::vec(1e-6f64..10.0, 1..16),
        at in 0usize..16,
        bad in -5.0f64..=0.0,
    ) {
        let at = at % increments.len();
        increments[at] = bad;
        let result = RetentionSchedule::from_increments(&increments, ScheduleSource::Manual);
        prop_assert!(matches!(result, Err(Error::DegenerateSchedule(_))));
    }
}
