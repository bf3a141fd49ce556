//! Astromorphic linear attention.
//!
//! A write pass aggregates keys, values and the positional encoding into
//! Hebbian weights `H_neuron = φ(K)ᵀV / m`, `H_astro = φ(R)ᵀV / m` and a
//! presynaptic state `g = (Σ_t φ(k_t))^α`. A read pass scales each query's
//! retrieval `φ(q_n) H` by `P_n = 1 / (φ(q_n) · g)` and adds the input back.
//! Everything is `O(N)` in the token count; the positional encoding is
//! formed with a recursive decay filter instead of an `N × N` distance
//! matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{decay_apply, elu_plus_one, Tape, Var, RECIPROCAL_EPS};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d: usize,
    pub m: usize,
    pub n_heads: usize,
    /// Largest token count the positional tables cover.
    pub n_max: usize,
    pub alpha: f64,
    pub pos_scale: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 || self.n_heads == 0 || self.n_max == 0 {
            return Err(Error::InvalidArgument("attention dimensions must be positive".into()));
        }
        if !self.d.is_multiple_of(self.n_heads) || !self.m.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d = {} and m = {} must both be divisible by n_heads = {}",
                self.d, self.m, self.n_heads
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.pos_scale > 0.0) || !self.pos_scale.is_finite() {
            return Err(Error::InvalidArgument(format!("pos_scale must be positive, got {}", self.pos_scale)));
        }
        Ok(())
    }

    pub fn head_d(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn head_m(&self) -> usize {
        self.m / self.n_heads
    }
}

/// Ablation switches. Turning both off gives plain linear attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionFlags {
    pub use_h_astro: bool,
    pub use_p: bool,
}

impl Default for AttentionFlags {
    fn default() -> Self {
        Self { use_h_astro: true, use_p: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    pub w_k: Matrix,
    pub w_q: Matrix,
    pub w_v: Matrix,
    pub m_proj: Matrix,
    pub w_rel: Matrix,
    /// Mixes concatenated head outputs. Absent for a single head, whose
    /// output feeds the residual directly.
    pub w_o: Option<Matrix>,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, m, n) = (config.d, config.m, config.n_max);
        let pos_bound = 1.0 / (n as f64).sqrt();
        let w_k = Matrix::xavier(d, m, rng);
        let w_q = Matrix::xavier(d, m, rng);
        let w_v = Matrix::xavier(d, d, rng);
        let m_proj = Matrix::uniform(n, n, pos_bound, rng);
        let w_rel = Matrix::uniform(n, m, pos_bound, rng);
        let w_o = (config.n_heads > 1).then(|| Matrix::xavier(d, d, rng));
        Ok(Self { config, w_k, w_q, w_v, m_proj, w_rel, w_o })
    }

    /// Parameters in a fixed order, paired with their names.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("w_k", &self.w_k),
            ("w_q", &self.w_q),
            ("w_v", &self.w_v),
            ("m_proj", &self.m_proj),
            ("w_rel", &self.w_rel),
        ];
        if let Some(w_o) = &self.w_o {
            out.push(("w_o", w_o));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out = vec![
            ("w_k", &mut self.w_k),
            ("w_q", &mut self.w_q),
            ("w_v", &mut self.w_v),
            ("m_proj", &mut self.m_proj),
            ("w_rel", &mut self.w_rel),
        ];
        if let Some(w_o) = &mut self.w_o {
            out.push(("w_o", w_o));
        }
        out
    }

    fn check_capacity(&self, n_tokens: usize) -> Result<()> {
        if n_tokens > self.config.n_max {
            return Err(Error::Capacity { requested: n_tokens, max: self.config.n_max });
        }
        if n_tokens == 0 {
            return Err(Error::InvalidArgument("attention needs at least one token".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        self.check_capacity(x.rows())?;
        if x.cols() != self.config.d {
            return Err(Error::Shape { op: "attention input", left: x.shape(), right: (x.rows(), self.config.d) });
        }
        if !x.is_finite() {
            return Err(Error::Domain { op: "attention input", detail: "non-finite entry".into() });
        }
        Ok(())
    }
}

pub fn phi(x: &Matrix) -> Matrix {
    x.map(elu_plus_one)
}

/// Positional encoding `R = (M r Mᵀ) W_rel` for the first `n_tokens`
/// positions, with `r_ij = exp(-|i - j| · pos_scale)`. Evaluated as
/// `M (r (Mᵀ W_rel))` so only `n × m` intermediates appear besides `M`.
pub fn positional_matrix(n_tokens: usize, params: &AttentionParams) -> Result<Matrix> {
    params.check_capacity(n_tokens)?;
    let m_n = params.m_proj.slice_rows(0, n_tokens)?.slice_cols(0, n_tokens)?;
    let rel = params.w_rel.slice_rows(0, n_tokens)?;
    let inner = m_n.t_matmul(&rel)?;
    m_n.matmul(&decay_apply(&inner, params.config.pos_scale))
}

/// One head's aggregated context.
#[derive(Clone, Debug, PartialEq)]
pub struct WriteState {
    pub h_neuron: Matrix,
    pub h_astro: Matrix,
    pub g: Matrix,
    /// `Σ_t φ(k_t)` before the α power.
    pub key_sum: Matrix,
}

fn mask_rows(mut a: Matrix, mask: Option<&[bool]>) -> Matrix {
    if let Some(mask) = mask {
        for (r, keep) in mask.iter().enumerate() {
            if !keep {
                a.row_mut(r).fill(0.0);
            }
        }
    }
    a
}

/// Rows are processed in fixed blocks so temporaries stay cache-sized.
const ROW_BLOCK: usize = 64;

fn row_blocks(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(ROW_BLOCK).map(move |start| (start, ROW_BLOCK.min(n - start)))
}

fn check_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    match mask {
        Some(mask) if mask.len() != n => {
            Err(Error::InvalidArgument(format!("mask has {} entries for {n} tokens", mask.len())))
        }
        Some(mask) if !mask.iter().any(|k| *k) => Err(Error::InvalidArgument("mask excludes every token".into())),
        _ => Ok(()),
    }
}

/// Write pass for `head`. `positional` is the full `n × m` encoding from
/// [`positional_matrix`]; rows where `mask` is false are left out of every
/// sum.
pub fn write_mode(
    x: &Matrix,
    params: &AttentionParams,
    head: usize,
    positional: &Matrix,
    mask: Option<&[bool]>,
) -> Result<WriteState> {
    params.check_input(x)?;
    check_mask(mask, x.rows())?;
    let cfg = &params.config;
    let (dh, mh) = (cfg.head_d(), cfg.head_m());
    let w_k = params.w_k.slice_cols(head * mh, mh)?;
    let w_v = params.w_v.slice_cols(head * dh, dh)?;
    let r = positional.slice_cols(head * mh, mh)?;
    let mut h_neuron = Matrix::zeros(mh, dh);
    let mut h_astro = Matrix::zeros(mh, dh);
    let mut key_sum = Matrix::zeros(1, mh);
    for (start, len) in row_blocks(x.rows()) {
        let xb = x.slice_rows(start, len)?;
        let mb = mask.map(|m| &m[start..start + len]);
        let phi_k = mask_rows(phi(&xb.matmul(&w_k)?), mb);
        let phi_r = mask_rows(phi(&r.slice_rows(start, len)?), mb);
        let v = xb.matmul(&w_v)?;
        h_neuron.add_assign(&phi_k.t_matmul(&v)?)?;
        h_astro.add_assign(&phi_r.t_matmul(&v)?)?;
        key_sum.add_assign(&phi_k.col_sums())?;
    }
    let inv_m = 1.0 / mh as f64;
    let (h_neuron, h_astro) = (h_neuron.scale(inv_m), h_astro.scale(inv_m));
    let g = key_sum.map(|s| s.powf(cfg.alpha));
    Ok(WriteState { h_neuron, h_astro, g, key_sum })
}

/// Read pass for `head` without the residual: row `n` is
/// `P_n · (φ(q_n) H)`.
pub fn read_head(
    x: &Matrix,
    write: &WriteState,
    params: &AttentionParams,
    head: usize,
    flags: AttentionFlags,
) -> Result<Matrix> {
    let cfg = &params.config;
    let mh = cfg.head_m();
    let w_q = params.w_q.slice_cols(head * mh, mh)?;
    let h = if flags.use_h_astro { write.h_neuron.add(&write.h_astro)? } else { write.h_neuron.clone() };
    let (norm, norm_scale) = if flags.use_p { (&write.g, 1.0) } else { (&write.key_sum, 1.0 / mh as f64) };
    let mut out = Matrix::zeros(x.rows(), cfg.head_d());
    for (start, len) in row_blocks(x.rows()) {
        let phi_q = phi(&x.slice_rows(start, len)?.matmul(&w_q)?);
        let c = phi_q.matmul_t(norm)?;
        let block = phi_q.matmul(&h)?;
        for r in 0..len {
            let calcium = c.get(r, 0) * norm_scale;
            if !(calcium > 0.0) {
                return Err(Error::Domain { op: "read_mode", detail: format!("calcium response {calcium} is not positive") });
            }
            let p = 1.0 / calcium.max(RECIPROCAL_EPS);
            out.row_mut(start + r).iter_mut().zip(block.row(r)).for_each(|(o, v)| *o = v * p);
        }
    }
    Ok(out)
}

/// Single-head read pass including the residual.
pub fn read_mode(x: &Matrix, write: &WriteState, params: &AttentionParams) -> Result<Matrix> {
    if params.config.n_heads != 1 {
        return Err(Error::InvalidArgument("read_mode with residual needs a single head".into()));
    }
    read_head(x, write, params, 0, AttentionFlags::default())?.add(x)
}

/// Full block on plain matrices: every head, output projection, residual.
pub fn astro_attention(
    x: &Matrix,
    params: &AttentionParams,
    flags: AttentionFlags,
    mask: Option<&[bool]>,
) -> Result<Matrix> {
    let positional = positional_matrix(x.rows(), params)?;
    astro_attention_with(x, params, &positional, flags, mask)
}

/// As [`astro_attention`] with a precomputed positional encoding.
pub fn astro_attention_with(
    x: &Matrix,
    params: &AttentionParams,
    positional: &Matrix,
    flags: AttentionFlags,
    mask: Option<&[bool]>,
) -> Result<Matrix> {
    if positional.shape() != (x.rows(), params.config.m) {
        return Err(Error::Shape { op: "positional", left: positional.shape(), right: (x.rows(), params.config.m) });
    }
    let mut heads = Vec::with_capacity(params.config.n_heads);
    for head in 0..params.config.n_heads {
        let write = write_mode(x, params, head, positional, mask)?;
        heads.push(read_head(x, &write, params, head, flags)?);
    }
    let refs: Vec<&Matrix> = heads.iter().collect();
    let mut out = Matrix::concat_cols(&refs)?;
    if let Some(w_o) = &params.w_o {
        out = out.matmul(w_o)?;
    }
    out.add(x)
}

/// Attention parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub w_k: Var,
    pub w_q: Var,
    pub w_v: Var,
    pub m_proj: Var,
    pub w_rel: Var,
    pub w_o: Option<Var>,
}

impl AttentionVars {
    /// Register every parameter as a leaf, in [`AttentionParams::named`] order.
    pub fn register(tape: &mut Tape, params: &AttentionParams, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.frozen_param(m.clone()) };
        let w_k = leaf(&params.w_k);
        let w_q = leaf(&params.w_q);
        let w_v = leaf(&params.w_v);
        let m_proj = leaf(&params.m_proj);
        let w_rel = leaf(&params.w_rel);
        let w_o = params.w_o.as_ref().map(&mut leaf);
        Self { w_k, w_q, w_v, m_proj, w_rel, w_o }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.w_k, self.w_q, self.w_v, self.m_proj, self.w_rel];
        out.extend(self.w_o);
        out
    }
}

/// Tape version of [`positional_matrix`].
pub fn positional_var(tape: &mut Tape, vars: &AttentionVars, n_tokens: usize, config: &AttentionConfig) -> Result<Var> {
    if n_tokens > config.n_max {
        return Err(Error::Capacity { requested: n_tokens, max: config.n_max });
    }
    let m_rows = tape.slice_rows(vars.m_proj, 0, n_tokens)?;
    let m_n = tape.slice_cols(m_rows, 0, n_tokens)?;
    let rel = tape.slice_rows(vars.w_rel, 0, n_tokens)?;
    let m_t = tape.transpose(m_n);
    let inner = tape.matmul(m_t, rel)?;
    let decayed = tape.decay_mul(inner, config.pos_scale)?;
    tape.matmul(m_n, decayed)
}

fn mask_var(tape: &mut Tape, a: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        Some(mask) if mask.iter().any(|k| !k) => {
            let cols = tape.shape(a).1;
            let m = Matrix::from_fn(mask.len(), cols, |r, _| if mask[r] { 1.0 } else { 0.0 });
            let m = tape.constant(m);
            tape.hadamard(a, m)
        }
        _ => Ok(a),
    }
}

/// Differentiable attention block. `positional` comes from [`positional_var`]
/// for the same token count.
pub fn astro_attention_var(
    tape: &mut Tape,
    x: Var,
    vars: &AttentionVars,
    positional: Var,
    config: &AttentionConfig,
    flags: AttentionFlags,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (n, d) = tape.shape(x);
    if d != config.d {
        return Err(Error::Shape { op: "attention input", left: (n, d), right: (n, config.d) });
    }
    if tape.shape(positional) != (n, config.m) {
        return Err(Error::Shape { op: "positional", left: tape.shape(positional), right: (n, config.m) });
    }
    check_mask(mask, n)?;
    let (dh, mh) = (config.head_d(), config.head_m());
    let inv_m = 1.0 / mh as f64;
    let mut heads = Vec::with_capacity(config.n_heads);
    for head in 0..config.n_heads {
        let w_k = tape.slice_cols(vars.w_k, head * mh, mh)?;
        let w_q = tape.slice_cols(vars.w_q, head * mh, mh)?;
        let w_v = tape.slice_cols(vars.w_v, head * dh, dh)?;

        let k = tape.matmul(x, w_k)?;
        let phi_k = tape.elu_plus_one(k);
        let phi_k = mask_var(tape, phi_k, mask)?;
        let v = tape.matmul(x, w_v)?;
        let phi_k_t = tape.transpose(phi_k);
        let kv = tape.matmul(phi_k_t, v)?;
        let mut h = tape.scalar_mul(kv, inv_m);
        if flags.use_h_astro {
            let r = tape.slice_cols(positional, head * mh, mh)?;
            let phi_r = tape.elu_plus_one(r);
            let phi_r = mask_var(tape, phi_r, mask)?;
            let phi_r_t = tape.transpose(phi_r);
            let rv = tape.matmul(phi_r_t, v)?;
            let h_astro = tape.scalar_mul(rv, inv_m);
            h = tape.add(h, h_astro)?;
        }
        let key_sum = tape.col_sum(phi_k);

        let q = tape.matmul(x, w_q)?;
        let phi_q = tape.elu_plus_one(q);
        let c = if flags.use_p {
            let g = tape.power(key_sum, config.alpha)?;
            let g_t = tape.transpose(g);
            tape.matmul(phi_q, g_t)?
        } else {
            let s_t = tape.transpose(key_sum);
            let c = tape.matmul(phi_q, s_t)?;
            tape.scalar_mul(c, inv_m)
        };
        let p = tape.reciprocal(c, RECIPROCAL_EPS)?;
        let retrieved = tape.matmul(phi_q, h)?;
        let p_wide = tape.broadcast_col(p, dh)?;
        heads.push(tape.hadamard(retrieved, p_wide)?);
    }
    let mut out = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    if let Some(w_o) = vars.w_o {
        out = tape.matmul(out, w_o)?;
    }
    tape.add(out, x)
}

/// Quadratic softmax attention `softmax(Q Kᵀ / √m) V + X`, used only as a
/// timing reference.
pub fn softmax_attention_reference(x: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    let q = x.matmul(&params.w_q)?;
    let k = x.matmul(&params.w_k)?;
    let v = x.matmul(&params.w_v)?;
    let scale = 1.0 / (params.config.m as f64).sqrt();
    let mut out = x.clone();
    let mut scores = vec![0.0; x.rows()];
    for r in 0..x.rows() {
        let qr = q.row(r);
        for (s, j) in scores.iter_mut().zip(0..k.rows()) {
            *s = scale * qr.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>();
        }
        crate::autodiff::softmax_in_place(&mut scores);
        let row = out.row_mut(r);
        for (w, j) in scores.iter().zip(0..v.rows()) {
            row.iter_mut().zip(v.row(j)).for_each(|(o, vj)| *o += w * vj);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, m: usize, heads: usize, n_max: usize, seed: u64) -> AttentionParams {
        let cfg = AttentionConfig { d, m, n_heads: heads, n_max, alpha: 0.25, pos_scale: 2.0 };
        AttentionParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_x(n: usize, d: usize, seed: u64) -> Matrix {
        Matrix::uniform(n, d, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn phi_values() {
        let x = Matrix::row_vector(&[0.0, 2.0, -1.0]);
        let y = phi(&x);
        assert_eq!(y.get(0, 0), 1.0);
        assert_eq!(y.get(0, 1), 3.0);
        assert!((y.get(0, 2) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttentionConfig { d: 8, m: 6, n_heads: 2, n_max: 16, alpha: 0.25, pos_scale: 2.0 };
        cfg.validate().unwrap();
        cfg.n_heads = 4;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 2;
        cfg.alpha = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn capacity_checked() {
        let p = params(4, 4, 1, 8, 0);
        assert!(matches!(positional_matrix(9, &p), Err(Error::Capacity { requested: 9, max: 8 })));
    }

    #[test]
    fn single_token_write() {
        let p = params(4, 4, 1, 8, 1);
        let x = random_x(1, 4, 2);
        let r = positional_matrix(1, &p).unwrap();
        let w = write_mode(&x, &p, 0, &r, None).unwrap();
        let phi_k = phi(&x.matmul(&p.w_k).unwrap());
        let v = x.matmul(&p.w_v).unwrap();
        let expected = phi_k.t_matmul(&v).unwrap().scale(0.25);
        assert!(w.h_neuron.max_abs_diff(&expected) < 1e-15);
        assert!(w.g.max_abs_diff(&phi_k.map(|v| v.powf(0.25))) < 1e-15);
    }

    #[test]
    fn doubling_values_doubles_hebbian_weights() {
        let mut p = params(6, 4, 1, 8, 3);
        let x = random_x(5, 6, 4);
        let r = positional_matrix(5, &p).unwrap();
        let a = write_mode(&x, &p, 0, &r, None).unwrap();
        p.w_v = p.w_v.scale(2.0);
        let b = write_mode(&x, &p, 0, &r, None).unwrap();
        assert_eq!(b.h_neuron, a.h_neuron.scale(2.0));
        assert_eq!(b.h_astro, a.h_astro.scale(2.0));
        assert_eq!(b.g, a.g);
    }

    #[test]
    fn zero_query_weights_give_identical_rows() {
        let mut p = params(4, 4, 1, 8, 5);
        p.w_q = Matrix::zeros(4, 4);
        let x = random_x(6, 4, 6);
        let r = positional_matrix(6, &p).unwrap();
        let w = write_mode(&x, &p, 0, &r, None).unwrap();
        let out = read_mode(&x, &w, &p).unwrap().sub(&x).unwrap();
        for row in 1..6 {
            assert!(out.row(row).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-14));
        }
    }

    #[test]
    fn tape_matches_plain_block() {
        for &(heads, mask) in &[(1usize, false), (2, false), (2, true)] {
            let p = params(8, 6, heads, 16, 7);
            let x = random_x(10, 8, 8);
            let mask_vec: Vec<bool> = (0..10).map(|i| !mask || i < 7).collect();
            let mask = mask.then_some(mask_vec.as_slice());
            for flags in [
                AttentionFlags::default(),
                AttentionFlags { use_h_astro: false, use_p: false },
                AttentionFlags { use_h_astro: true, use_p: false },
            ] {
                let plain = astro_attention(&x, &p, flags, mask).unwrap();
                let mut tape = Tape::new();
                let vars = AttentionVars::register(&mut tape, &p, true);
                let xv = tape.input(x.clone(), false);
                let r = positional_var(&mut tape, &vars, 10, &p.config).unwrap();
                let out = astro_attention_var(&mut tape, xv, &vars, r, &p.config, flags, mask).unwrap();
                assert!(tape.value(out).max_abs_diff(&plain) < 1e-12);
            }
        }
    }

    #[test]
    fn masked_rows_do_not_leak_into_context() {
        let p = params(4, 4, 1, 8, 9);
        let mut x = random_x(6, 4, 10);
        let mask = [true, true, true, true, false, false];
        let r = positional_matrix(6, &p).unwrap();
        let a = write_mode(&x, &p, 0, &r, Some(&mask)).unwrap();
        x.row_mut(5).iter_mut().for_each(|v| *v += 3.0);
        let b = write_mode(&x, &p, 0, &r, Some(&mask)).unwrap();
        assert_eq!(a, b);
    }
}
