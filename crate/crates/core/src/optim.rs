//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelParams, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("eps must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)]) -> Result<Self> {
        config.validate()?;
        let zeros = |&(r, c): &(usize, usize)| Matrix::zeros(r, c);
        Ok(Self { config, step: 0, first: shapes.iter().map(zeros).collect(), second: shapes.iter().map(zeros).collect() })
    }

    pub fn for_model(config: AdamWConfig, params: &ModelParams) -> Result<Self> {
        let shapes: Vec<_> = params.named().iter().map(|(_, m)| m.shape()).collect();
        Self::new(config, &shapes)
    }

    /// Update `params` in place. Weight decay applies to tensors with more
    /// than one row; bias and normalization vectors are left undecayed.
    pub fn update(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], names: &[String]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            p.expect_same_shape("adamw", g)?;
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                let name = names.get(i).map_or("?", String::as_str);
                return Err(Error::TrainingAbort(format!(
                    "{bad} non-finite gradient entries in `{name}` at step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let decay = if p.rows() > 1 { c.weight_decay } else { 0.0 };
            let (pd, gd) = (p.data_mut(), g.data());
            for k in 0..pd.len() {
                let gk = gd[k];
                let mk = &mut m.data_mut()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * gk;
                let mhat = *mk / bias1;
                let vk = &mut v.data_mut()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * gk * gk;
                let vhat = *vk / bias2;
                pd[k] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + decay * pd[k]);
            }
        }
        Ok(())
    }

    pub fn step_model(&mut self, params: &mut ModelParams, grads: &ParamGrads) -> Result<()> {
        let slots: Vec<&mut Matrix> = params.named_mut().into_iter().map(|(_, m)| m).collect();
        self.update(slots, &grads.grads, &grads.names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[(2, 2)]).unwrap();
        let mut p = Matrix::from_fn(2, 2, |r, c| (r + c) as f64);
        let before = p.clone();
        opt.update(vec![&mut p], &[Matrix::zeros(2, 2)], &[]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn descends_on_quadratic() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[(1, 1)]).unwrap();
        let mut x = Matrix::filled(1, 1, 1.0);
        let grad = x.clone();
        opt.update(vec![&mut x], &[grad], &[]).unwrap();
        assert!(x.get(0, 0).abs() < 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[(1, 2)]).unwrap();
        let mut x = Matrix::zeros(1, 2);
        let err = opt.update(vec![&mut x], &[Matrix::row_vector(&[1.0, f64::NAN])], &["w".into()]).unwrap_err();
        assert!(matches!(err, Error::TrainingAbort(ref msg) if msg.contains("`w`")));
        assert_eq!(opt.step, 0);
    }
}
