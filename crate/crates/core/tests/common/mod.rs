//! Reference implementations shared by the integration tests. They are
//! written with plain scalar loops and dense intermediates, independently
//! of the library code they check.
#![allow(dead_code)]

use astroseq_core::attention::{AttentionFlags, AttentionParams};
use astroseq_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, bound: f64, seed: u64) -> Matrix {
    Matrix::uniform(rows, cols, bound, &mut rng(seed))
}

fn feature(x: f64) -> f64 {
    if x > 0.0 {
        1.0 + x
    } else {
        x.exp()
    }
}

fn dot_col(x: &Matrix, row: usize, w: &Matrix, col: usize) -> f64 {
    (0..x.cols()).map(|i| x.get(row, i) * w.get(i, col)).sum()
}

/// Dense `N × N` distance kernel `exp(-|i - j| · scale)`.
pub fn distance_kernel(n: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| (-(i.abs_diff(j) as f64) * scale).exp()).collect()).collect()
}

/// `(M r Mᵀ) W_rel` with every product formed explicitly.
pub fn positional_dense(n: usize, params: &AttentionParams) -> Vec<Vec<f64>> {
    let r = distance_kernel(n, params.config.pos_scale);
    let mp = |i: usize, j: usize| params.m_proj.get(i, j);
    let mut mr = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            mr[i][j] = (0..n).map(|k| mp(i, k) * r[k][j]).sum();
        }
    }
    let mut mrm = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            mrm[i][j] = (0..n).map(|k| mr[i][k] * mp(j, k)).sum();
        }
    }
    let m = params.config.m;
    (0..n).map(|i| (0..m).map(|c| (0..n).map(|k| mrm[i][k] * params.w_rel.get(k, c)).sum()).collect()).collect()
}

/// One head's context built token by token.
pub struct LoopWrite {
    pub h_neuron: Vec<Vec<f64>>,
    pub h_astro: Vec<Vec<f64>>,
    pub key_sum: Vec<f64>,
}

pub fn write_loop(
    x: &Matrix,
    params: &AttentionParams,
    head: usize,
    positional: &[Vec<f64>],
    mask: Option<&[bool]>,
) -> LoopWrite {
    let cfg = &params.config;
    let (mh, dh) = (cfg.m / cfg.n_heads, cfg.d / cfg.n_heads);
    let mut h_neuron = vec![vec![0.0; dh]; mh];
    let mut h_astro = vec![vec![0.0; dh]; mh];
    let mut key_sum = vec![0.0; mh];
    for t in 0..x.rows() {
        if mask.is_some_and(|m| !m[t]) {
            continue;
        }
        let k: Vec<f64> = (0..mh).map(|a| feature(dot_col(x, t, &params.w_k, head * mh + a))).collect();
        let r: Vec<f64> = (0..mh).map(|a| feature(positional[t][head * mh + a])).collect();
        let v: Vec<f64> = (0..dh).map(|b| dot_col(x, t, &params.w_v, head * dh + b)).collect();
        for a in 0..mh {
            key_sum[a] += k[a];
            for b in 0..dh {
                h_neuron[a][b] += k[a] * v[b] / mh as f64;
                h_astro[a][b] += r[a] * v[b] / mh as f64;
            }
        }
    }
    LoopWrite { h_neuron, h_astro, key_sum }
}

/// One head's output rows (no residual), one query at a time.
pub fn read_loop(x: &Matrix, params: &AttentionParams, head: usize, write: &LoopWrite, flags: AttentionFlags) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let (mh, dh) = (cfg.m / cfg.n_heads, cfg.d / cfg.n_heads);
    let mut out = Vec::with_capacity(x.rows());
    for n in 0..x.rows() {
        let q: Vec<f64> = (0..mh).map(|a| feature(dot_col(x, n, &params.w_q, head * mh + a))).collect();
        let calcium: f64 = if flags.use_p {
            (0..mh).map(|a| q[a] * write.key_sum[a].powf(cfg.alpha)).sum()
        } else {
            (0..mh).map(|a| q[a] * write.key_sum[a]).sum::<f64>() / mh as f64
        };
        let p = 1.0 / calcium.max(1e-6);
        let row = (0..dh)
            .map(|b| {
                let mut s = 0.0;
                for a in 0..mh {
                    let h = write.h_neuron[a][b] + if flags.use_h_astro { write.h_astro[a][b] } else { 0.0 };
                    s += q[a] * h;
                }
                p * s
            })
            .collect();
        out.push(row);
    }
    out
}

/// Whole attention block: every head, optional output projection, residual.
pub fn attention_loop(x: &Matrix, params: &AttentionParams, flags: AttentionFlags, mask: Option<&[bool]>) -> Matrix {
    let cfg = &params.config;
    let positional = positional_dense(x.rows(), params);
    let dh = cfg.d / cfg.n_heads;
    let mut concat = vec![vec![0.0; cfg.d]; x.rows()];
    for head in 0..cfg.n_heads {
        let write = write_loop(x, params, head, &positional, mask);
        for (n, row) in read_loop(x, params, head, &write, flags).into_iter().enumerate() {
            concat[n][head * dh..(head + 1) * dh].copy_from_slice(&row);
        }
    }
    Matrix::from_fn(x.rows(), cfg.d, |n, c| {
        let mixed = match &params.w_o {
            Some(w_o) => (0..cfg.d).map(|k| concat[n][k] * w_o.get(k, c)).sum(),
            None => concat[n][c],
        };
        mixed + x.get(n, c)
    })
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).expect("rectangular rows")
}

/// Central-difference gradient of a scalar function of one matrix.
pub fn numeric_gradient(x: &Matrix, step: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + step;
        let up = f(&probe);
        probe.data_mut()[i] = original - step;
        let down = f(&probe);
        probe.data_mut()[i] = original;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// `max |a - b| / max(1, |b|)` over all entries.
pub fn scaled_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
