use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::attention::{AttentionParams, AttentionVars};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let (d, f) = (config.d, config.ffn_dim);
        Ok(Self {
            attn: AttentionParams::init(config.attention(), rng)?,
            ln1_gain: Matrix::ones(1, d),
            ln1_bias: Matrix::zeros(1, d),
            w1: Matrix::xavier(d, f, rng),
            b1: Matrix::zeros(1, f),
            w2: Matrix::xavier(f, d, rng),
            b2: Matrix::zeros(1, d),
            ln2_gain: Matrix::ones(1, d),
            ln2_bias: Matrix::zeros(1, d),
        })
    }

    fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = self.attn.named();
        out.extend([
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]);
        out
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = self.attn.named_mut();
        out.extend([
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]);
        out
    }
}

/// All learnable tensors of the recurrent model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Matrix,
    /// Learned initial memory `m_1`, `M × d`.
    pub mem_init: Matrix,
    pub layers: Vec<LayerParams>,
    /// Classifier over `[pooled sequence; pooled memory]`, `2d × C`.
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let embed = Matrix::uniform(config.vocab_size, d, 1.0, rng);
        let mem_init = Matrix::uniform(config.n_mem_tokens, d, 1.0, rng);
        let layers = (0..config.n_layers).map(|_| LayerParams::init(&config, rng)).collect::<Result<Vec<_>>>()?;
        let head_w = Matrix::xavier(2 * d, config.n_classes, rng);
        let head_b = Matrix::zeros(1, config.n_classes);
        Ok(Self { config, embed, mem_init, layers, head_w, head_b })
    }

    /// Every tensor with a dotted name, in a fixed order shared by
    /// [`ModelParams::named_mut`], [`ModelVars::all`] and [`ParamGrads`].
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("mem_init".to_string(), &self.mem_init)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, m)| (format!("layers.{l}.{n}"), m)));
        }
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![("embed".to_string(), &mut self.embed), ("mem_init".to_string(), &mut self.mem_init)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut().into_iter().map(|(n, m)| (format!("layers.{l}.{n}"), m)));
        }
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        let named = self.named();
        ParamGrads {
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            grads: named.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn mem_init_index() -> usize {
        1
    }
}

/// Gradients aligned with [`ModelParams::named`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub names: Vec<String>,
    pub grads: Vec<Matrix>,
}

impl ParamGrads {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if self.names != other.names {
            return Err(Error::InvalidArgument("gradient sets describe different parameters".into()));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest per-tensor relative discrepancy, `max|a - b| / max|b|`
    /// (zero when both tensors vanish).
    pub fn max_relative_diff(&self, reference: &ParamGrads) -> f64 {
        self.grads
            .iter()
            .zip(&reference.grads)
            .map(|(a, b)| {
                let diff = a.max_abs_diff(b);
                let scale = b.max_abs();
                if scale == 0.0 {
                    if diff == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    diff / scale
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub attn: AttentionVars,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    /// Positional encoding, built on first use and shared by every segment
    /// evaluated on the same tape.
    pub positional: Option<Var>,
}

/// Model parameters registered as leaves on one tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub mem_init: Var,
    pub layers: Vec<LayerVars>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let leaf = |tape: &mut Tape, m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.frozen_param(m.clone()) };
        let embed = leaf(tape, &params.embed);
        let mem_init = leaf(tape, &params.mem_init);
        let layers = params
            .layers
            .iter()
            .map(|l| {
                let attn = AttentionVars::register(tape, &l.attn, trainable);
                LayerVars {
                    attn,
                    ln1_gain: leaf(tape, &l.ln1_gain),
                    ln1_bias: leaf(tape, &l.ln1_bias),
                    w1: leaf(tape, &l.w1),
                    b1: leaf(tape, &l.b1),
                    w2: leaf(tape, &l.w2),
                    b2: leaf(tape, &l.b2),
                    ln2_gain: leaf(tape, &l.ln2_gain),
                    ln2_bias: leaf(tape, &l.ln2_bias),
                    positional: None,
                }
            })
            .collect();
        let head_w = leaf(tape, &params.head_w);
        let head_b = leaf(tape, &params.head_b);
        Self { embed, mem_init, layers, head_w, head_b }
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.mem_init];
        for l in &self.layers {
            out.extend(l.attn.vars());
            out.extend([l.ln1_gain, l.ln1_bias, l.w1, l.b1, l.w2, l.b2, l.ln2_gain, l.ln2_bias]);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }

    /// Add this tape's leaf gradients into `grads`.
    pub fn accumulate_grads(&self, tape: &Tape, grads: &mut ParamGrads) -> Result<()> {
        for (var, acc) in self.all().into_iter().zip(grads.grads.iter_mut()) {
            if let Some(g) = tape.grad(var) {
                acc.add_assign(g)?;
            }
        }
        Ok(())
    }
}
