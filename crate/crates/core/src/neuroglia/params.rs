use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar nonlinearity selector.
///
/// Every selector is applied zero-centred, `f(x) - f(0)`, so a quiescent
/// network stays quiescent. This only changes `sigmoid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Sigmoid,
    Linear,
}

impl Nonlinearity {
    #[inline]
    pub fn raw(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Nonlinearity::Linear => x,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        self.raw(x) - self.raw(0.0)
    }
}

/// Neuron-astrocyte model constants. Defaults are the reference values used
/// for the LTP macro model (3 neurons, 50 s cycles, dt = 0.04 s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub tau_n: f64,
    pub tau_s: f64,
    pub tau_p_s: f64,
    pub tau_p_l: f64,
    pub lambda: f64,
    pub beta: f64,
    pub gamma_s: f64,
    pub gamma_l: f64,
    pub v_th: f64,
    pub v_reset: f64,
    /// Intrinsic neuron bias `b_i`, shared by all neurons.
    pub b: f64,
    /// Synaptic facilitation bias `c_ij`.
    pub c: f64,
    /// Astrocyte STP bias `d_ij`.
    pub d: f64,
    pub dt: f64,
    /// Neuronal activity nonlinearity used in the co-activation term.
    pub theta: Nonlinearity,
    pub psi: Nonlinearity,
    pub kappa: Nonlinearity,
    /// Effective synaptic weight `g(s)`.
    pub g: Nonlinearity,
    /// Initial (and per-cycle reset) value of every `p^s` entry.
    pub p_s_init: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            tau_n: 0.5,
            tau_s: 0.75,
            tau_p_s: 1.0,
            tau_p_l: 6.0,
            lambda: 0.2,
            beta: 0.25,
            gamma_s: 0.2,
            gamma_l: 0.1,
            v_th: 1.0,
            v_reset: -1.0,
            b: 0.0,
            c: 0.0,
            d: 0.0,
            dt: 0.04,
            theta: Nonlinearity::Tanh,
            psi: Nonlinearity::Tanh,
            kappa: Nonlinearity::Sigmoid,
            g: Nonlinearity::Linear,
            p_s_init: 0.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let taus = [("tau_n", self.tau_n), ("tau_s", self.tau_s), ("tau_p_s", self.tau_p_s), ("tau_p_l", self.tau_p_l)];
        for (name, v) in taus {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        let min_tau = taus.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
        if self.dt >= min_tau {
            return Err(Error::InvalidArgument(format!("dt {} must be below the smallest time constant {min_tau}", self.dt)));
        }
        if self.tau_p_l <= self.tau_p_s {
            return Err(Error::InvalidArgument("tau_p_l must exceed tau_p_s".into()));
        }
        if self.v_th <= self.v_reset {
            return Err(Error::InvalidArgument("v_th must exceed v_reset".into()));
        }
        let rest = [self.lambda, self.beta, self.gamma_s, self.gamma_l, self.b, self.c, self.d, self.p_s_init];
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model constant".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` parameter file. Keys not present keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let params: SimParams = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("flat struct always serializes")
    }
}

/// Regular presynaptic spiking applied to every neuron.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveSpec {
    pub rate_hz: f64,
}

impl Default for DriveSpec {
    fn default() -> Self {
        Self { rate_hz: 10.0 }
    }
}

impl DriveSpec {
    pub fn silent() -> Self {
        Self { rate_hz: 0.0 }
    }

    /// True when a spike falls in step `k` (counted from the start of a cycle).
    pub fn spikes_at(&self, k: usize, dt: f64) -> bool {
        if self.rate_hz <= 0.0 {
            return false;
        }
        let before = (k as f64 * dt * self.rate_hz + 1e-9).floor();
        let after = ((k + 1) as f64 * dt * self.rate_hz + 1e-9).floor();
        after > before
    }
}
