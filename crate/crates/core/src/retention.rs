//! Per-segment memory retention factors distilled from the long-term
//! astrocyte process: each segment's share of the total LTP growth over a
//! run of `T` STP cycles.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neuroglia::{build_geometry, run_stp_cycles, DriveSpec, SimParams, SimTrace};

/// The simulated network whose LTP growth defines the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacroModel {
    pub params: SimParams,
    pub drive: DriveSpec,
    pub n_neurons: usize,
    pub spacing: f64,
    pub scale: f64,
    pub cycle_seconds: f64,
}

impl Default for MacroModel {
    fn default() -> Self {
        Self {
            params: SimParams::default(),
            drive: DriveSpec::default(),
            n_neurons: 3,
            spacing: 1.0,
            scale: 2.0,
            cycle_seconds: 50.0,
        }
    }
}

impl MacroModel {
    /// Hex sha256 of the canonical JSON encoding.
    pub fn params_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("macro model serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn simulate(&self, n_cycles: usize) -> Result<SimTrace> {
        let geometry = build_geometry(self.n_neurons, self.spacing)?;
        run_stp_cycles(&self.params, &geometry, self.scale, n_cycles, self.cycle_seconds, &self.drive)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleSource {
    Uniform,
    Ltp { params_hash: String, model: MacroModel },
    /// Factors supplied directly (tests and experiments).
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionSchedule {
    pub n_segments: usize,
    pub factors: Vec<f64>,
    pub source: ScheduleSource,
}

impl RetentionSchedule {
    /// Normalize positive increments into factors summing to one.
    pub fn from_increments(increments: &[f64], source: ScheduleSource) -> Result<Self> {
        if increments.is_empty() {
            return Err(Error::InvalidArgument("at least one segment is required".into()));
        }
        if let Some((t, v)) = increments.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateSchedule(format!("increment for segment {} is {v}", t + 1)));
        }
        let total: f64 = increments.iter().sum();
        let factors = increments.iter().map(|d| d / total).collect();
        Ok(Self { n_segments: increments.len(), factors, source })
    }

    /// Explicit factors, each in `(0, 1]`. No normalization is applied.
    pub fn manual(factors: Vec<f64>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("at least one segment is required".into()));
        }
        if factors.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::InvalidArgument(format!("factors must lie in (0, 1]: {factors:?}")));
        }
        Ok(Self { n_segments: factors.len(), factors, source: ScheduleSource::Manual })
    }

    /// Factor applied after segment `t` (1-based).
    pub fn factor(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.n_segments {
            return Err(Error::InvalidArgument(format!("segment {t} outside 1..={}", self.n_segments)));
        }
        Ok(self.factors[t - 1])
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.source, ScheduleSource::Uniform)
    }
}

/// Growth of the synapse-averaged `p^l` over each of the first `n_segments` cycles.
pub fn ltp_increments(trace: &SimTrace, n_segments: usize) -> Result<Vec<f64>> {
    if n_segments == 0 {
        return Err(Error::InvalidArgument("n_segments must be at least 1".into()));
    }
    if trace.cycle_boundaries.len() < n_segments {
        return Err(Error::InvalidArgument(format!(
            "trace has {} cycle boundaries, {n_segments} needed",
            trace.cycle_boundaries.len()
        )));
    }
    let means = trace.boundary_mean_p_l();
    Ok(means.windows(2).take(n_segments).map(|w| w[1] - w[0]).collect())
}

pub fn retention_schedule(n_segments: usize, model: &MacroModel) -> Result<RetentionSchedule> {
    if n_segments == 0 {
        return Err(Error::InvalidArgument("n_segments must be at least 1".into()));
    }
    let trace = model.simulate(n_segments)?;
    let increments = ltp_increments(&trace, n_segments)?;
    let source = ScheduleSource::Ltp { params_hash: model.params_hash(), model: model.clone() };
    RetentionSchedule::from_increments(&increments, source)
}

/// All factors 1: memory passes between segments unscaled.
pub fn uniform_schedule(n_segments: usize) -> Result<RetentionSchedule> {
    if n_segments == 0 {
        return Err(Error::InvalidArgument("n_segments must be at least 1".into()));
    }
    Ok(RetentionSchedule { n_segments, factors: vec![1.0; n_segments], source: ScheduleSource::Uniform })
}

/// Directory of precomputed schedules, one JSON file per (macro model, T).
#[derive(Clone, Debug)]
pub struct ScheduleCache {
    dir: PathBuf,
}

impl ScheduleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(n_segments: usize, model: &MacroModel) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(model).expect("macro model serializes"));
        hasher.update(b"/");
        hasher.update(n_segments.to_le_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn path_for(&self, n_segments: usize, model: &MacroModel) -> PathBuf {
        self.dir.join(format!("schedule-{}.json", &Self::key(n_segments, model)[..16]))
    }

    /// Load a cached schedule or simulate, store and return it. The boolean
    /// is true on a cache hit.
    pub fn get_or_compute(&self, n_segments: usize, model: &MacroModel) -> Result<(RetentionSchedule, bool)> {
        let path = self.path_for(n_segments, model);
        if path.exists() {
            let schedule: RetentionSchedule = serde_json::from_slice(&fs::read(&path)?)?;
            let matches = schedule.n_segments == n_segments
                && matches!(&schedule.source, ScheduleSource::Ltp { model: m, .. } if m == model);
            if matches {
                return Ok((schedule, true));
            }
        }
        let schedule = retention_schedule(n_segments, model)?;
        fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&schedule)?)?;
        fs::rename(&tmp, &path)?;
        Ok((schedule, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn flat_trace(boundary_values: &[f64]) -> SimTrace {
        let p_l: Vec<Matrix> = boundary_values.iter().map(|&v| Matrix::filled(2, 2, v)).collect();
        SimTrace {
            times: (0..p_l.len()).map(|k| k as f64).collect(),
            s_series: vec![Matrix::zeros(2, 2); p_l.len()],
            p_s_series: vec![Matrix::zeros(2, 2); p_l.len()],
            p_l_series: p_l,
            cycle_boundaries: (1..boundary_values.len()).collect(),
        }
    }

    #[test]
    fn increments_are_boundary_differences() {
        let inc = ltp_increments(&flat_trace(&[0.0, 0.4, 0.6, 0.7]), 3).unwrap();
        let expected = [0.4, 0.2, 0.1];
        for (a, b) in inc.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(ltp_increments(&flat_trace(&[0.3; 4]), 3).unwrap(), vec![0.0; 3]);
        assert!(ltp_increments(&flat_trace(&[0.0, 0.1]), 2).is_err());
    }

    #[test]
    fn normalization_examples() {
        let s = RetentionSchedule::from_increments(&[0.4, 0.2, 0.1, 0.1], ScheduleSource::Manual).unwrap();
        assert_eq!(s.factors, vec![0.5, 0.25, 0.125, 0.125]);
        let s = RetentionSchedule::from_increments(&[0.7], ScheduleSource::Manual).unwrap();
        assert_eq!(s.factors, vec![1.0]);
    }

    #[test]
    fn zero_increments_are_degenerate() {
        let err = RetentionSchedule::from_increments(&[0.0, 0.0], ScheduleSource::Manual).unwrap_err();
        assert!(matches!(err, Error::DegenerateSchedule(_)));
        let silent = MacroModel { drive: DriveSpec::silent(), ..MacroModel::default() };
        assert!(matches!(retention_schedule(3, &silent), Err(Error::DegenerateSchedule(_))));
    }

    #[test]
    fn uniform_is_all_ones() {
        assert_eq!(uniform_schedule(3).unwrap().factors, vec![1.0; 3]);
        assert_eq!(uniform_schedule(1).unwrap().factors, vec![1.0]);
        assert!(uniform_schedule(0).is_err());
    }

    #[test]
    fn factor_lookup_is_one_based() {
        let s = uniform_schedule(2).unwrap();
        assert!(s.factor(0).is_err());
        assert!(s.factor(3).is_err());
        assert_eq!(s.factor(2).unwrap(), 1.0);
    }

    #[test]
    fn single_segment_schedule() {
        let s = retention_schedule(1, &MacroModel::default()).unwrap();
        assert_eq!(s.factors, vec![1.0]);
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScheduleCache::new(dir.path());
        let model = MacroModel::default();
        let (first, hit) = cache.get_or_compute(4, &model).unwrap();
        assert!(!hit);
        let (second, hit) = cache.get_or_compute(4, &model).unwrap();
        assert!(hit);
        assert_eq!(first, second);
        assert_eq!(
            first.factors.iter().map(|f| f.to_bits()).collect::<Vec<_>>(),
            second.factors.iter().map(|f| f.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(ScheduleCache::key(4, &model), ScheduleCache::key(5, &model));
    }
}
