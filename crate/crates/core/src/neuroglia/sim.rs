use serde::{Deserialize, Serialize};

use super::geometry::{coupling_tensor, CouplingTensor, SynapseGeometry};
use super::params::{DriveSpec, SimParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// State of the tripartite-synapse network at one instant.
///
/// `rate` is an exponential moving average of each neuron's emitted spike
/// train (time constant `tau_n`); neuronal activity is `tanh(rate)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub v: Vec<f64>,
    pub rate: Vec<f64>,
    pub s: Matrix,
    pub p_s: Matrix,
    pub p_l: Matrix,
    pub t: f64,
    /// Neurons that emitted a spike during the last step.
    pub spiked: Vec<bool>,
}

impl SimState {
    pub fn initial(n_neurons: usize, params: &SimParams) -> Self {
        Self {
            v: vec![params.v_reset; n_neurons],
            rate: vec![0.0; n_neurons],
            s: Matrix::zeros(n_neurons, n_neurons),
            p_s: Matrix::filled(n_neurons, n_neurons, params.p_s_init),
            p_l: Matrix::zeros(n_neurons, n_neurons),
            t: 0.0,
            spiked: vec![false; n_neurons],
        }
    }

    pub fn n_neurons(&self) -> usize {
        self.v.len()
    }

    pub fn activity(&self) -> Vec<f64> {
        self.rate.iter().map(|r| r.tanh()).collect()
    }

    /// Reset the short-term variables, keeping `p_l` and the clock.
    pub fn reset_short_term(&mut self, params: &SimParams) {
        let n = self.n_neurons();
        self.v = vec![params.v_reset; n];
        self.rate = vec![0.0; n];
        self.s = Matrix::zeros(n, n);
        self.p_s = Matrix::filled(n, n, params.p_s_init);
        self.spiked = vec![false; n];
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.rate).all(|x| x.is_finite())
            && self.s.is_finite()
            && self.p_s.is_finite()
            && self.p_l.is_finite()
    }
}

fn check_finite(values: &[f64], variable: &'static str, time: f64) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalOverflow { variable, time })
    }
}

/// One explicit Euler step of the membrane, facilitation, STP and LTP
/// equations.
///
/// `spikes_in[j]` is the presynaptic spike train `S_j` for this step; a
/// spike is a delta of unit area, so it contributes `g(s_ij) / tau_n` to
/// `V_i`. A neuron emits a spike when it is driven or crosses `v_th`.
pub fn step(state: &SimState, params: &SimParams, coupling: &CouplingTensor, spikes_in: &[bool]) -> Result<SimState> {
    let n = state.n_neurons();
    if spikes_in.len() != n {
        return Err(Error::InvalidArgument(format!("{} spike indicators for {n} neurons", spikes_in.len())));
    }
    if coupling.n_synapses() != n * n {
        return Err(Error::InvalidArgument(format!(
            "coupling covers {} synapses, network has {}",
            coupling.n_synapses(),
            n * n
        )));
    }
    let dt = params.dt;
    let t_next = state.t + dt;
    let x: Vec<f64> = state.activity();
    let theta_x: Vec<f64> = x.iter().map(|&v| params.theta.apply(v)).collect();

    let mut v = state.v.clone();
    for i in 0..n {
        let mut current = params.b * dt;
        for j in 0..n {
            if spikes_in[j] {
                current += params.g.apply(state.s.get(i, j));
            }
        }
        v[i] += (-params.lambda * (state.v[i] - params.v_reset) * dt + current) / params.tau_n;
    }
    check_finite(&v, "V", t_next)?;

    let psi_ps: Vec<f64> = state.p_s.data().iter().map(|&p| params.psi.apply(p)).collect();

    let mut s = state.s.clone();
    let mut p_s = state.p_s.clone();
    let mut p_l = state.p_l.clone();
    for i in 0..n {
        for j in 0..n {
            let a = i * n + j;
            let s_ij = state.s.get(i, j);
            let ds = -params.beta * s_ij + theta_x[i] * theta_x[j] + psi_ps[a] + params.c;
            s.set(i, j, s_ij + dt * ds / params.tau_s);

            let flux: f64 = coupling.values.row(a).iter().zip(&psi_ps).map(|(t, p)| t * p).sum();
            let ps_ij = state.p_s.get(i, j);
            let dps = -params.gamma_s * ps_ij + flux + params.d;
            p_s.set(i, j, ps_ij + dt * dps / params.tau_p_s);

            let pl_ij = state.p_l.get(i, j);
            let dpl = -params.gamma_l * pl_ij + params.kappa.apply(s_ij);
            p_l.set(i, j, pl_ij + dt * dpl / params.tau_p_l);
        }
    }
    check_finite(s.data(), "s", t_next)?;
    check_finite(p_s.data(), "p_s", t_next)?;
    check_finite(p_l.data(), "p_l", t_next)?;

    let mut spiked = spikes_in.to_vec();
    for i in 0..n {
        if v[i] >= params.v_th {
            v[i] = params.v_reset;
            spiked[i] = true;
        }
    }
    let rate: Vec<f64> = state
        .rate
        .iter()
        .zip(&spiked)
        .map(|(&r, &sp)| r + (-r * dt + if sp { 1.0 } else { 0.0 }) / params.tau_n)
        .collect();
    check_finite(&rate, "rate", t_next)?;

    Ok(SimState { v, rate, s, p_s, p_l, t: t_next, spiked })
}

/// Sampled time series from a multi-cycle run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub times: Vec<f64>,
    pub s_series: Vec<Matrix>,
    pub p_s_series: Vec<Matrix>,
    pub p_l_series: Vec<Matrix>,
    /// Sample index of the state at the end of each cycle (before the reset).
    pub cycle_boundaries: Vec<usize>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_neurons(&self) -> usize {
        self.s_series.first().map_or(0, Matrix::rows)
    }

    fn record(&mut self, state: &SimState) {
        self.times.push(state.t);
        self.s_series.push(state.s.clone());
        self.p_s_series.push(state.p_s.clone());
        self.p_l_series.push(state.p_l.clone());
    }

    /// Peak of `p_s[i][j]` over the whole trace.
    pub fn peak_p_s(&self, i: usize, j: usize) -> f64 {
        self.p_s_series.iter().map(|m| m.get(i, j)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean `p_l` over all synapses at each cycle boundary, starting with the
    /// initial sample.
    pub fn boundary_mean_p_l(&self) -> Vec<f64> {
        std::iter::once(0).chain(self.cycle_boundaries.iter().copied()).map(|k| self.p_l_series[k].mean()).collect()
    }

    /// One row per sample: `time`, then every `s_i_j`, `ps_i_j` and `pl_i_j`
    /// in row-major order.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let n = self.n_neurons();
        let mut out = String::from("time");
        for prefix in ["s", "ps", "pl"] {
            for i in 0..n {
                for j in 0..n {
                    let _ = write!(out, ",{prefix}_{i}_{j}");
                }
            }
        }
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{}", self.times[k]);
            for series in [&self.s_series, &self.p_s_series, &self.p_l_series] {
                for v in series[k].data() {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// How often [`run_stp_cycles`] records a sample.
#[derive(Clone, Copy, Debug)]
pub struct RecordOptions {
    /// Record every `stride`-th step; cycle ends are always recorded.
    pub stride: usize,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

pub fn steps_per_cycle(cycle_duration: f64, dt: f64) -> Result<usize> {
    if !(cycle_duration > 0.0) {
        return Err(Error::InvalidArgument(format!("cycle duration must be positive, got {cycle_duration}")));
    }
    let steps = (cycle_duration / dt).round();
    if steps < 1.0 || (steps * dt - cycle_duration).abs() > 1e-9 * cycle_duration.max(1.0) {
        return Err(Error::InvalidArgument(format!("cycle duration {cycle_duration} s is not a multiple of dt = {dt} s")));
    }
    Ok(steps as usize)
}

/// Run `n_cycles` STP cycles. At each cycle boundary `V`, `s`, `p^s` and the
/// activity estimate are reset while `p^l` carries over.
pub fn run_stp_cycles(
    params: &SimParams,
    geometry: &SynapseGeometry,
    scale: f64,
    n_cycles: usize,
    cycle_duration: f64,
    drive: &DriveSpec,
) -> Result<SimTrace> {
    run_stp_cycles_with(params, geometry, scale, n_cycles, cycle_duration, drive, RecordOptions::default())
}

pub fn run_stp_cycles_with(
    params: &SimParams,
    geometry: &SynapseGeometry,
    scale: f64,
    n_cycles: usize,
    cycle_duration: f64,
    drive: &DriveSpec,
    record: RecordOptions,
) -> Result<SimTrace> {
    params.validate()?;
    if n_cycles == 0 {
        return Err(Error::InvalidArgument("n_cycles must be at least 1".into()));
    }
    let steps = steps_per_cycle(cycle_duration, params.dt)?;
    let coupling = coupling_tensor(geometry, scale)?;
    let n = geometry.n_neurons();
    let stride = record.stride.max(1);

    let mut trace = SimTrace {
        times: Vec::new(),
        s_series: Vec::new(),
        p_s_series: Vec::new(),
        p_l_series: Vec::new(),
        cycle_boundaries: Vec::with_capacity(n_cycles),
    };
    let mut state = SimState::initial(n, params);
    trace.record(&state);
    let mut spikes = vec![false; n];
    for cycle in 0..n_cycles {
        for k in 0..steps {
            spikes.fill(drive.spikes_at(k, params.dt));
            state = step(&state, params, &coupling, &spikes)?;
            // Recompute the clock from the step count so sample times stay exact.
            state.t = ((cycle * steps + k + 1) as f64) * params.dt;
            if k + 1 == steps || (k + 1) % stride == 0 {
                trace.record(&state);
            }
        }
        trace.cycle_boundaries.push(trace.len() - 1);
        state.reset_short_term(params);
    }
    Ok(trace)
}
