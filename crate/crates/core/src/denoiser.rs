//! The conditional denoiser `x̂⁰ = f(x^t, s̃, t)`.
//!
//! Each guidance position receives `s̃_j + pos_j + x^t + step(t)`; the stack
//! of bidirectional pre-norm attention blocks runs over the unpadded
//! positions and the final position (the most recent item under left
//! padding) is read out through a linear head.

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::model::{ItemEmbeddingTable, ModelState, ParamVars};
use crate::rng::Rng;
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;

pub fn embed_sequence(table: &ItemEmbeddingTable, items: &[ItemId]) -> Result<Matrix> {
    let max = table.item_count();
    let mut out = Matrix::zeros(items.len(), table.dim());
    for (r, &id) in items.iter().enumerate() {
        let id = id as usize;
        if id > max {
            return Err(Error::Index { id, max });
        }
        out.row_mut(r).copy_from_slice(table.0.row(id));
    }
    Ok(out)
}

pub(crate) fn check_ids(items: &[ItemId], max: usize) -> Result<Vec<usize>> {
    items
        .iter()
        .map(|&id| {
            let id = id as usize;
            if id > max {
                Err(Error::Index { id, max })
            } else {
                Ok(id)
            }
        })
        .collect()
}

/// Transformer-style sinusoidal features for step `t`.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Inverted-dropout masks drawn from a dedicated stream. `None` rates or a
/// missing source mean inference mode.
pub struct Dropout<'r> {
    pub rng: &'r mut Rng,
    pub attn: f64,
    pub emb: f64,
}

impl Dropout<'_> {
    pub fn mask(&mut self, rows: usize, cols: usize, rate: f64) -> Option<Matrix> {
        if rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - rate;
        let data = (0..rows * cols)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Some(Matrix::from_vec(rows, cols, data))
    }
}

fn apply_dropout(tape: &mut Tape<'_>, x: Var, dropout: &mut Option<Dropout<'_>>, rate: f64) -> Var {
    let Some(d) = dropout.as_mut() else { return x };
    let (r, c) = tape.value(x).shape();
    match d.mask(r, c, rate) {
        Some(m) => tape.mul_const(x, m),
        None => x,
    }
}

/// Item-embedding dropout applied to a gathered sequence.
pub fn embedding_dropout(tape: &mut Tape<'_>, s: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    let rate = dropout.as_ref().map_or(0.0, |d| d.emb);
    apply_dropout(tape, s, dropout, rate)
}

fn layer_norm(tape: &mut Tape<'_>, x: Var, g: Var, b: Var) -> Var {
    let n = tape.normalize(x, LN_EPS);
    let n = tape.mul_row(n, g);
    tape.add_row(n, b)
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Records the denoiser on `tape`. `x_t` is `1 × D`, `guidance` is
/// `(L−1) × D`; returns the `1 × D` prediction.
#[allow(clippy::too_many_arguments)]
pub fn denoise_on_tape(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    heads: usize,
    x_t: Var,
    guidance: Var,
    t: usize,
    mask: &[bool],
    mut dropout: Option<Dropout<'_>>,
) -> Result<Var> {
    let (len, dim) = tape.value(guidance).shape();
    if mask.len() != len {
        return Err(Error::Dimension(format!("mask length {} vs {len} positions", mask.len())));
    }
    if tape.value(x_t).shape() != (1, dim) {
        return Err(Error::Dimension("x_t must be 1 x D".into()));
    }
    let Some(last) = mask.iter().rposition(|&m| m) else {
        return Err(Error::DegenerateInput);
    };

    let base = tape.constant(Matrix::row_vector(sinusoidal(t, dim)));
    let step = linear(tape, base, vars.step_w, vars.step_b);
    let cond = tape.add(x_t, step);
    let h = tape.add(guidance, vars.pos);
    let mut h = tape.add_row(h, cond);
    let rate = dropout.as_ref().map_or(0.0, |d| d.attn);

    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for b in &vars.blocks {
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b] = *b;
        let a = layer_norm(tape, h, ln1_g, ln1_b);
        let q = linear(tape, a, wq, bq);
        let k = linear(tape, a, wk, bk);
        let v = linear(tape, a, wv, bv);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.slice_cols(q, head * dh, dh);
            let kh = tape.slice_cols(k, head * dh, dh);
            let vh = tape.slice_cols(v, head * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax(scores, Some(mask.to_vec()));
            outs.push(tape.matmul(p, vh));
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let o = linear(tape, o, wo, bo);
        let o = apply_dropout(tape, o, &mut dropout, rate);
        h = tape.add(h, o);

        let f = layer_norm(tape, h, ln2_g, ln2_b);
        let f = linear(tape, f, ff1_w, ff1_b);
        let f = tape.gelu(f);
        let f = linear(tape, f, ff2_w, ff2_b);
        let f = apply_dropout(tape, f, &mut dropout, rate);
        h = tape.add(h, f);
    }
    let h = layer_norm(tape, h, vars.lnf_g, vars.lnf_b);
    let r = tape.select_row(h, last);
    Ok(linear(tape, r, vars.out_w, vars.out_b))
}

/// Anything that can predict `x̂⁰` from a noisy latent and guidance.
pub trait DenoiseFn {
    fn denoise(&self, x_t: &[f64], guidance: &Matrix, t: usize, mask: &[bool]) -> Result<Vec<f64>>;
}

impl DenoiseFn for ModelState {
    /// Inference-mode forward pass (no dropout).
    fn denoise(&self, x_t: &[f64], guidance: &Matrix, t: usize, mask: &[bool]) -> Result<Vec<f64>> {
        if guidance.shape() != (self.config.max_len, self.config.dim) {
            return Err(Error::Dimension(format!(
                "guidance is {:?}, model expects ({}, {})",
                guidance.shape(),
                self.config.max_len,
                self.config.dim
            )));
        }
        if x_t.len() != self.config.dim {
            return Err(Error::Dimension(format!("x_t has {} entries, D = {}", x_t.len(), self.config.dim)));
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let xv = tape.constant(Matrix::row_vector(x_t.to_vec()));
        let gv = tape.constant(guidance.clone());
        let out = denoise_on_tape(&mut tape, &vars, self.config.heads, xv, gv, t, mask, None)?;
        Ok(tape.value(out).as_slice().to_vec())
    }
}

/// Ignores its inputs and returns a fixed vector.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser(pub Vec<f64>);

impl DenoiseFn for ConstantDenoiser {
    fn denoise(&self, _: &[f64], _: &Matrix, _: usize, _: &[bool]) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}
