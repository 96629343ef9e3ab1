//! Reconstruction and contrastive discrepancy losses, and the batch-level
//! forward/backward that produces gradients for every trainable tensor.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Batch, ItemId};
use crate::denoiser::{check_ids, denoise_on_tape, embedding_dropout, Dropout};
use crate::error::{Error, Result};
use crate::model::{ModelState, EMBEDDING_SLOT};
use crate::rng::{normal_vec, seeded};
use crate::schedule::NoiseSchedule;
use crate::svq::{gumbel_noise, gumbel_softmax_on_tape, select_logits_on_tape};
use crate::tensor::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_c: f64,
    pub total: f64,
    pub lambda_c: f64,
}

impl LossBreakdown {
    pub fn new(l_r: f64, l_c: f64, lambda_c: f64) -> Self {
        Self {
            l_r,
            l_c,
            total: total_loss(l_r, l_c, lambda_c),
            lambda_c,
        }
    }
}

/// `l_r + λ_c·l_c`
pub fn total_loss(l_r: f64, l_c: f64, lambda_c: f64) -> f64 {
    l_r + lambda_c * l_c
}

/// Batch mean of `‖x_L − x̂⁰‖²`.
pub fn reconstruction_loss(targets: &[Vec<f64>], predictions: &[Vec<f64>]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != predictions.len() {
        return Err(Error::Dimension(format!(
            "{} targets vs {} predictions",
            targets.len(),
            predictions.len()
        )));
    }
    let mut total = 0.0;
    for (t, p) in targets.iter().zip(predictions) {
        if t.len() != p.len() {
            return Err(Error::Dimension("target and prediction widths differ".into()));
        }
        total += t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / targets.len() as f64)
}

/// ∂l_r/∂x̂_i = 2(x̂_i − x_i)/B; the target gradient is the negation.
pub fn reconstruction_grad(targets: &[Vec<f64>], predictions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = targets.len() as f64;
    targets
        .iter()
        .zip(predictions)
        .map(|(t, p)| t.iter().zip(p).map(|(a, x)| 2.0 * (x - a) / b).collect())
        .collect()
}

fn norms_checked(predictions: &[Vec<f64>]) -> Result<Vec<f64>> {
    if predictions.len() < 2 {
        return Err(Error::BatchTooSmall(predictions.len()));
    }
    predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let n = norm(p);
            if n < 1e-12 {
                Err(Error::UndefinedCosine(i))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn cosine_matrix(predictions: &[Vec<f64>], norms: &[f64]) -> Vec<Vec<f64>> {
    let b = predictions.len();
    let mut c = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in i + 1..b {
            let v = dot(&predictions[i], &predictions[j]) / (norms[i] * norms[j]);
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    c
}

/// Row-wise softmax over `j ≠ i` of the cosine matrix, plus the row
/// log-sum-exp values.
fn cdm_rows(cos: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let b = cos.len();
    let mut probs = vec![vec![0.0; b]; b];
    let mut lse = vec![0.0; b];
    for i in 0..b {
        let max = (0..b).filter(|&j| j != i).map(|j| cos[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).filter(|&j| j != i).map(|j| (cos[i][j] - max).exp()).sum();
        lse[i] = max + z.ln();
        for j in (0..b).filter(|&j| j != i) {
            probs[i][j] = (cos[i][j] - max).exp() / z;
        }
    }
    (probs, lse)
}

/// `(1/B)·Σ_i log Σ_{j≠i} exp(cos(x̂_i, x̂_j))`.
pub fn cdm_loss(predictions: &[Vec<f64>]) -> Result<f64> {
    let norms = norms_checked(predictions)?;
    let cos = cosine_matrix(predictions, &norms);
    let (_, lse) = cdm_rows(&cos);
    Ok(lse.iter().sum::<f64>() / predictions.len() as f64)
}

/// Gradient of [`cdm_loss`] with respect to each prediction.
pub fn cdm_grad(predictions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let norms = norms_checked(predictions)?;
    let cos = cosine_matrix(predictions, &norms);
    let (p, _) = cdm_rows(&cos);
    let b = predictions.len();
    let inv_b = 1.0 / b as f64;
    let mut grads = vec![vec![0.0; predictions[0].len()]; b];
    for i in 0..b {
        let xi = &predictions[i];
        let ni = norms[i];
        for j in (0..b).filter(|&j| j != i) {
            // cos_ij appears in row i and row j
            let w = inv_b * (p[i][j] + p[j][i]);
            let xj = &predictions[j];
            let nj = norms[j];
            for (k, g) in grads[i].iter_mut().enumerate() {
                *g += w * (xj[k] / (ni * nj) - cos[i][j] * xi[k] / (ni * ni));
            }
        }
    }
    Ok(grads)
}

/// Loss hyperparameters consumed by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossHyper {
    pub lambda_q: f64,
    pub lambda_c: f64,
    pub tau: f64,
}

/// One example's recorded forward pass.
pub(crate) struct ExampleTape<'a> {
    pub tape: Tape<'a>,
    pub x_hat: Var,
    pub x_target: Var,
    pub code: usize,
    pub weights: Vec<f64>,
    /// Sequence embedding before dropout, for the codebook update.
    pub raw: Matrix,
}

/// Code selection for one example, replayed from the same seeded stream
/// that [`forward_example`] consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub code: usize,
    pub weights: Vec<f64>,
    /// Sequence embedding before dropout.
    pub raw: Matrix,
}

struct Prefix<'a> {
    tape: Tape<'a>,
    vars: crate::model::ParamVars,
    rng: crate::rng::Rng,
    t: usize,
    eps: Vec<f64>,
    x_target: Var,
    s: Var,
    g: Var,
    raw: Matrix,
}

fn prefix<'a>(
    state: &'a ModelState,
    history: &[ItemId],
    target: ItemId,
    sched: &NoiseSchedule,
    hyper: &LossHyper,
    seed: u64,
) -> Result<Prefix<'a>> {
    let cfg = &state.config;
    let mut rng = seeded(seed, &[]);
    let t = rng.random_range(1..=sched.steps());
    let eps = normal_vec(cfg.dim, &mut rng);
    let noise = gumbel_noise(cfg.codes, &mut rng);

    let table = &state.embeddings.0;
    let ids = check_ids(history, cfg.item_count)?;
    let target_id = check_ids(&[target], cfg.item_count)?;

    let mut tape = Tape::new();
    let vars = state.register(&mut tape);
    let x_target = tape.gather(EMBEDDING_SLOT, table, &target_id);
    let s_raw = tape.gather(EMBEDDING_SLOT, table, &ids);
    let raw = tape.value(s_raw).clone();

    let mut dropout = Some(Dropout {
        rng: &mut rng,
        attn: cfg.dropout_attn,
        emb: cfg.dropout_emb,
    });
    let s = embedding_dropout(&mut tape, s_raw, &mut dropout);
    let logits = select_logits_on_tape(&mut tape, &vars.selector, s);
    let g = gumbel_softmax_on_tape(&mut tape, logits, noise, hyper.tau);
    Ok(Prefix {
        tape,
        vars,
        rng,
        t,
        eps,
        x_target,
        s,
        g,
        raw,
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_example<'a>(
    state: &'a ModelState,
    history: &[ItemId],
    mask: &[bool],
    target: ItemId,
    sched: &NoiseSchedule,
    hyper: &LossHyper,
    seed: u64,
    anchor: Option<&[f64]>,
) -> Result<ExampleTape<'a>> {
    let cfg = &state.config;
    let Prefix {
        mut tape,
        vars,
        mut rng,
        t,
        eps,
        x_target,
        s,
        g,
        raw,
    } = prefix(state, history, target, sched, hyper, seed)?;
    let weights = tape.value(g).as_slice().to_vec();
    let (s_q, code) = tape.straight_through(g, &state.codebook.codes, anchor);
    let s_q = tape.scale(s_q, hyper.lambda_q);
    let guidance = tape.add(s, s_q);

    let signal = tape.scale(x_target, sched.alpha_bar(t).sqrt());
    let noise_term = {
        let b = sched.one_minus_alpha_bar(t).sqrt();
        tape.constant(Matrix::row_vector(eps.iter().map(|e| b * e).collect()))
    };
    let x_t = tape.add(signal, noise_term);
    let dropout = Some(Dropout {
        rng: &mut rng,
        attn: cfg.dropout_attn,
        emb: cfg.dropout_emb,
    });
    let x_hat = denoise_on_tape(&mut tape, &vars, cfg.heads, x_t, guidance, t, mask, dropout)?;
    Ok(ExampleTape {
        tape,
        x_hat,
        x_target,
        code,
        weights,
        raw,
    })
}

/// Code selections a batch would make under `seed`, without running the
/// denoiser.
pub fn select_batch(
    state: &ModelState,
    batch: &Batch,
    sched: &NoiseSchedule,
    hyper: &LossHyper,
    seed: u64,
) -> Result<Vec<Selection>> {
    (0..batch.len())
        .map(|i| {
            let p = prefix(
                state,
                &batch.histories[i],
                batch.targets[i],
                sched,
                hyper,
                example_seed(seed, i),
            )?;
            let weights = p.tape.value(p.g).as_slice().to_vec();
            Ok(Selection {
                code: crate::autograd::argmax_lowest(&weights),
                weights,
                raw: p.raw,
            })
        })
        .collect()
}

/// Seed for example `i` of a batch evaluated under `seed`.
pub fn example_seed(seed: u64, i: usize) -> u64 {
    crate::rng::derive(seed, &[0xe8, i as u64])
}

/// Everything one batch forward/backward produces.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: LossBreakdown,
    /// One gradient per trainable tensor in canonical order.
    pub grads: Vec<Matrix>,
    /// Selected code per example.
    pub codes: Vec<usize>,
    /// Gumbel-Softmax weights per example.
    pub weights: Vec<Vec<f64>>,
    /// Sequence embeddings per example (pre-dropout).
    pub raw: Vec<Matrix>,
    pub predictions: Vec<Vec<f64>>,
}

/// Tapes above this many retained activations are rebuilt for the
/// backward pass instead of held for the whole batch.
const RETAIN_LIMIT: usize = 1 << 22;

fn losses_of(targets: &[Vec<f64>], preds: &[Vec<f64>], hyper: &LossHyper) -> Result<LossBreakdown> {
    let l_r = reconstruction_loss(targets, preds)?;
    if !l_r.is_finite() {
        return Err(Error::numerical("l_r"));
    }
    let l_c = cdm_loss(preds)?;
    if !l_c.is_finite() {
        return Err(Error::numerical("l_c"));
    }
    let loss = LossBreakdown::new(l_r, l_c, hyper.lambda_c);
    if !loss.total.is_finite() {
        return Err(Error::numerical("total"));
    }
    Ok(loss)
}

/// Forward-only batch loss. `anchors` freezes the straight-through selection
/// per example (see [`Tape::straight_through`]).
pub fn batch_loss(
    state: &ModelState,
    batch: &Batch,
    sched: &NoiseSchedule,
    hyper: &LossHyper,
    seed: u64,
    anchors: Option<&[Vec<f64>]>,
) -> Result<LossBreakdown> {
    let mut targets = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let ex = forward_example(
            state,
            &batch.histories[i],
            &batch.mask[i],
            batch.targets[i],
            sched,
            hyper,
            example_seed(seed, i),
            anchors.map(|a| a[i].as_slice()),
        )?;
        targets.push(ex.tape.value(ex.x_target).as_slice().to_vec());
        preds.push(ex.tape.value(ex.x_hat).as_slice().to_vec());
    }
    losses_of(&targets, &preds, hyper)
}

/// Reverse-mode gradients of `l_r + λ_c·l_c` for every trainable tensor.
/// The codebook is read but never receives a gradient.
pub fn loss_gradients(
    state: &ModelState,
    batch: &Batch,
    sched: &NoiseSchedule,
    hyper: &LossHyper,
    seed: u64,
) -> Result<BatchGradients> {
    loss_gradients_anchored(state, batch, sched, hyper, seed, None)
}

/// [`loss_gradients`] with the straight-through selection of each example
/// frozen to the argmax of its anchor weights.
pub fn loss_gradients_anchored(
    state: &ModelState,
    batch: &Batch,
    sched: &NoiseSchedule,
    hyper: &LossHyper,
    seed: u64,
    anchors: Option<&[Vec<f64>]>,
) -> Result<BatchGradients> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let cfg = &state.config;
    let retain = batch.len() * cfg.max_len * cfg.dim * (4 + 8 * cfg.blocks) <= RETAIN_LIMIT;
    let run = |i: usize| {
        forward_example(
            state,
            &batch.histories[i],
            &batch.mask[i],
            batch.targets[i],
            sched,
            hyper,
            example_seed(seed, i),
            anchors.map(|a| a[i].as_slice()),
        )
    };

    let mut tapes = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut preds = Vec::with_capacity(batch.len());
    let mut codes = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    let mut raw = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let ex = run(i)?;
        targets.push(ex.tape.value(ex.x_target).as_slice().to_vec());
        preds.push(ex.tape.value(ex.x_hat).as_slice().to_vec());
        codes.push(ex.code);
        weights.push(ex.weights.clone());
        raw.push(ex.raw.clone());
        tapes.push(retain.then_some(ex));
    }

    let loss = losses_of(&targets, &preds, hyper)?;
    let d_rec = reconstruction_grad(&targets, &preds);
    let d_cdm = if hyper.lambda_c != 0.0 {
        Some(cdm_grad(&preds)?)
    } else {
        None
    };

    let mut grads = state.zero_grads();
    for (i, slot) in tapes.into_iter().enumerate() {
        let ex = match slot {
            Some(ex) => ex,
            None => run(i)?,
        };
        let mut g_pred = d_rec[i].clone();
        if let Some(dc) = &d_cdm {
            for (g, c) in g_pred.iter_mut().zip(&dc[i]) {
                *g += hyper.lambda_c * c;
            }
        }
        let g_target: Vec<f64> = d_rec[i].iter().map(|v| -v).collect();
        let g_pred = Matrix::row_vector(g_pred);
        let g_target = Matrix::row_vector(g_target);
        ex.tape
            .backward(&[(ex.x_hat, &g_pred), (ex.x_target, &g_target)], &mut grads);
    }
    if let Some((slot, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        let name = state.named_params()[slot].0.clone();
        return Err(Error::numerical(format!("gradient of {name}")));
    }
    Ok(BatchGradients {
        loss,
        grads,
        codes,
        weights,
        raw,
        predictions: preds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn rand_batch(b: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = seeded(seed, &[]);
        (0..b).map(|_| normal_vec(d, &mut r)).collect()
    }

    fn naive_cdm(x: &[Vec<f64>]) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for k in 0..a.len() {
                ab += a[k] * b[k];
                aa += a[k] * a[k];
                bb += b[k] * b[k];
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let mut total = 0.0;
        for i in 0..x.len() {
            let mut inner = 0.0;
            for j in 0..x.len() {
                if i != j {
                    inner += cos(&x[i], &x[j]).exp();
                }
            }
            total += inner.ln();
        }
        total / x.len() as f64
    }

    #[test]
    fn reconstruction_examples() {
        let t = rand_batch(3, 4, 1);
        assert_eq!(reconstruction_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[vec![3.0, 4.0]], &[vec![0.0, 0.0]]).unwrap(), 25.0);
        let p = rand_batch(3, 4, 2);
        let mut naive = 0.0;
        for i in 0..3 {
            for k in 0..4 {
                naive += (t[i][k] - p[i][k]).powi(2);
            }
        }
        assert!((reconstruction_loss(&t, &p).unwrap() - naive / 3.0).abs() < 1e-10);
        assert!(matches!(reconstruction_loss(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn reconstruction_grad_is_quadratic_derivative() {
        let t = rand_batch(4, 3, 3);
        let p = rand_batch(4, 3, 4);
        let g = reconstruction_grad(&t, &p);
        for i in 0..4 {
            for k in 0..3 {
                assert!((g[i][k] - 2.0 * (p[i][k] - t[i][k]) / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cdm_examples() {
        let orth = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        assert!(cdm_loss(&orth).unwrap().abs() < 1e-15);
        for b in [2usize, 3, 7] {
            let same = vec![vec![0.3, -0.4, 1.0]; b];
            let want = 1.0 + ((b - 1) as f64).ln();
            assert!((cdm_loss(&same).unwrap() - want).abs() < 1e-12);
        }
        let x = rand_batch(4, 5, 9);
        assert!((cdm_loss(&x).unwrap() - naive_cdm(&x)).abs() < 1e-10);
    }

    #[test]
    fn cdm_errors() {
        assert!(matches!(cdm_loss(&[vec![1.0]]), Err(Error::BatchTooSmall(1))));
        assert!(matches!(
            cdm_loss(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(Error::UndefinedCosine(1))
        ));
    }

    #[test]
    fn cdm_grad_matches_finite_differences() {
        let x = rand_batch(5, 4, 21);
        let g = cdm_grad(&x).unwrap();
        let h = 1e-6;
        for i in 0..5 {
            for k in 0..4 {
                let mut p = x.clone();
                p[i][k] += h;
                let mut m = x.clone();
                m[i][k] -= h;
                let fd = (naive_cdm(&p) - naive_cdm(&m)) / (2.0 * h);
                assert!((g[i][k] - fd).abs() < 1e-7, "{} vs {fd}", g[i][k]);
            }
        }
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.5, 9.0, 0.0), 1.5);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        // affine in λ_c: two points fix the line, the sweep lies on it
        let (lr, lc) = (0.7, 1.9);
        let (a, b) = (total_loss(lr, lc, 0.2), total_loss(lr, lc, 1.0));
        for lam in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let line = a + (b - a) * (lam - 0.2) / 0.8;
            assert!((total_loss(lr, lc, lam) - line).abs() < 1e-12);
        }
    }

    #[test]
    fn cdm_descent_disperses_pair() {
        let mut x = vec![vec![1.0, 0.2], vec![0.8, 0.5]];
        for _ in 0..2000 {
            let g = cdm_grad(&x).unwrap();
            for i in 0..2 {
                for k in 0..2 {
                    x[i][k] -= 0.1 * g[i][k];
                }
            }
        }
        let c = dot(&x[0], &x[1]) / (norm(&x[0]) * norm(&x[1]));
        assert!(c < -0.99, "{c}");
    }

    proptest! {
        #[test]
        fn cdm_scale_invariant(a in 0.01f64..100.0, idx in 0usize..4, seed in 0u64..1000) {
            let x = rand_batch(4, 3, seed);
            let mut y = x.clone();
            for v in &mut y[idx] {
                *v *= a;
            }
            prop_assert!((cdm_loss(&x).unwrap() - cdm_loss(&y).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn cdm_permutation_invariant(seed in 0u64..1000, rot in 1usize..4) {
            let x = rand_batch(4, 3, seed);
            let mut y = x.clone();
            y.rotate_left(rot);
            prop_assert!((cdm_loss(&x).unwrap() - cdm_loss(&y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn reconstruction_nonnegative(seed in 0u64..1000) {
            let t = rand_batch(3, 4, seed);
            let p = rand_batch(3, 4, seed + 7);
            let l = reconstruction_loss(&t, &p).unwrap();
            prop_assert!(l > 0.0);
            prop_assert_eq!(reconstruction_loss(&t, &t).unwrap(), 0.0);
        }
    }
}
