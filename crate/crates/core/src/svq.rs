//! Semantic vector quantization: code selection logits, Gumbel-Softmax
//! sampling, hard code lookup, guidance combination and the batch-mean
//! codebook update.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax_lowest, Tape, Var};
use crate::error::{Error, Result};
use crate::model::CodeSelector;
use crate::rng::{seeded, Rng as StdRng};
use crate::tensor::Matrix;

/// Variance of the entries of a randomly initialized code.
pub const RANDOM_CODE_VARIANCE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CodebookInit {
    #[default]
    Random,
    Sample,
}

impl std::str::FromStr for CodebookInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "sample" => Ok(Self::Sample),
            other => Err(Error::Config(format!("svq.init must be random|sample, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for CodebookInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Sample => "sample",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// M codes, each shaped like a sequence embedding.
    pub codes: Vec<Matrix>,
    /// Assignments observed per code since initialization.
    pub usage: Vec<u64>,
    /// Weight γ on the old code when blending in a batch mean.
    pub ema_decay: f64,
}

impl Codebook {
    pub fn random(m: usize, rows: usize, cols: usize, ema_decay: f64, rng: &mut StdRng) -> Self {
        let std = RANDOM_CODE_VARIANCE.sqrt();
        Self {
            codes: (0..m).map(|_| Matrix::randn(rows, cols, std, rng)).collect(),
            usage: vec![0; m],
            ema_decay,
        }
    }

    pub fn from_codes(codes: Vec<Matrix>, ema_decay: f64) -> Self {
        let usage = vec![0; codes.len()];
        Self {
            codes,
            usage,
            ema_decay,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.codes[0].shape()
    }

    /// Blends each code with the mean of the sequences assigned to it:
    /// `c ← γ·c + (1−γ)·mean(S_m)`. Codes with no assignment are left alone.
    pub fn update(&mut self, assignments: &[(usize, &Matrix)]) -> Result<()> {
        let shape = self.shape();
        let mut sums: Vec<Option<Matrix>> = vec![None; self.len()];
        let mut counts = vec![0u64; self.len()];
        for &(m, s) in assignments {
            if m >= self.len() {
                return Err(Error::Index {
                    id: m,
                    max: self.len() - 1,
                });
            }
            if s.shape() != shape {
                return Err(Error::Dimension(format!(
                    "assigned sequence is {:?}, codes are {:?}",
                    s.shape(),
                    shape
                )));
            }
            match &mut sums[m] {
                Some(acc) => acc.add_assign(s),
                slot @ None => *slot = Some(s.clone()),
            }
            counts[m] += 1;
        }
        let gamma = self.ema_decay;
        for (m, sum) in sums.into_iter().enumerate() {
            let Some(sum) = sum else { continue };
            let inv = 1.0 / counts[m] as f64;
            let code = &mut self.codes[m];
            for (c, s) in code.as_mut_slice().iter_mut().zip(sum.as_slice()) {
                *c = gamma * *c + (1.0 - gamma) * (s * inv);
            }
            self.usage[m] += counts[m];
        }
        Ok(())
    }
}

/// Outcome of [`init_codebook`].
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookInitReport {
    pub codebook: Codebook,
    /// Set when a sample was requested but was smaller than M.
    pub fell_back_to_random: bool,
}

/// Seeds M codes from distinct sample sequences when enough are supplied,
/// otherwise from i.i.d. normal entries.
pub fn init_codebook(
    m: usize,
    shape: (usize, usize),
    ema_decay: f64,
    seed: u64,
    corpus_sample: Option<&[Matrix]>,
) -> Result<CodebookInitReport> {
    if m < 2 {
        return Err(Error::Config(format!("codebook needs at least 2 codes, got {m}")));
    }
    let mut rng = seeded(seed, &[0xc0de]);
    match corpus_sample {
        Some(sample_set) if sample_set.len() >= m => {
            let picks = sample(&mut rng, sample_set.len(), m);
            let codes = picks.iter().map(|i| sample_set[i].clone()).collect();
            Ok(CodebookInitReport {
                codebook: Codebook::from_codes(codes, ema_decay),
                fell_back_to_random: false,
            })
        }
        requested => {
            if requested.is_some() {
                log::warn!("codebook sample smaller than M = {m}; using random init");
            }
            Ok(CodebookInitReport {
                codebook: Codebook::random(m, shape.0, shape.1, ema_decay, &mut rng),
                fell_back_to_random: requested.is_some(),
            })
        }
    }
}

/// Selector logits `o = W2·tanh(W1·vec(s) + b1) + b2`.
pub fn select_logits(selector: &CodeSelector, s: &Matrix) -> Result<Vec<f64>> {
    let flat_len = s.len();
    if flat_len != selector.w1.rows() {
        return Err(Error::Dimension(format!(
            "selector expects {} inputs, sequence embedding has {}",
            selector.w1.rows(),
            flat_len
        )));
    }
    let x = s.clone().reshaped(1, flat_len);
    let mut h = x.matmul(&selector.w1);
    h.add_assign(&selector.b1);
    let h = h.map(f64::tanh);
    let mut o = h.matmul(&selector.w2);
    o.add_assign(&selector.b2);
    Ok(o.into_vec())
}

/// Tape version of [`select_logits`]; `vars` are `[w1, b1, w2, b2]`.
pub fn select_logits_on_tape(tape: &mut Tape<'_>, vars: &[Var; 4], s: Var) -> Var {
    let len = tape.value(s).len();
    let x = tape.reshape(s, 1, len);
    let h = tape.matmul(x, vars[0]);
    let h = tape.add(h, vars[1]);
    let h = tape.tanh(h);
    let o = tape.matmul(h, vars[2]);
    tape.add(o, vars[3])
}

/// i.i.d. standard Gumbel draws `−ln(−ln u)`, `u ~ U(0,1)`.
pub fn gumbel_noise<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    (0..m)
        .map(|_| {
            let u: f64 = loop {
                let u = rng.random::<f64>();
                if u > 0.0 {
                    break u;
                }
            };
            -(-u.ln()).ln()
        })
        .collect()
}

pub fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// `softmax((o + n)/τ)` for supplied Gumbel noise `n`.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    if logits.len() != noise.len() {
        return Err(Error::Dimension("logits and noise lengths differ".into()));
    }
    let z: Vec<f64> = logits.iter().zip(noise).map(|(o, n)| (o + n) / tau).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

pub fn gumbel_softmax(logits: &[f64], tau: f64, seed: u64) -> Result<Vec<f64>> {
    check_temperature(tau)?;
    let mut rng = seeded(seed, &[0x9b1]);
    gumbel_softmax_with_rng(logits, tau, &mut rng)
}

pub fn gumbel_softmax_with_rng<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    let noise = gumbel_noise(logits.len(), rng);
    gumbel_softmax_with_noise(logits, &noise, tau)
}

/// Tape version: `softmax((o + noise)/τ)`.
pub fn gumbel_softmax_on_tape(tape: &mut Tape<'_>, logits: Var, noise: Vec<f64>, tau: f64) -> Var {
    let n = tape.constant(Matrix::row_vector(noise));
    let z = tape.add(logits, n);
    let z = tape.scale(z, 1.0 / tau);
    tape.softmax(z, None)
}

/// Hard selection `m* = argmax g` (ties to the lowest index).
pub fn quantize<'c>(weights: &[f64], codebook: &'c Codebook) -> (usize, &'c Matrix) {
    let m = argmax_lowest(weights);
    (m, &codebook.codes[m])
}

/// `s̃ = λ_q·s_q + s`.
pub fn combine_guidance(s: &Matrix, s_q: &Matrix, lambda_q: f64) -> Result<Matrix> {
    if s.shape() != s_q.shape() {
        return Err(Error::Dimension(format!(
            "sequence {:?} vs code {:?}",
            s.shape(),
            s_q.shape()
        )));
    }
    Ok(s.zip_map(s_q, |a, b| lambda_q * b + a))
}

/// All pieces of the quantized guidance for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBundle {
    pub raw: Matrix,
    pub quantized: Matrix,
    pub combined: Matrix,
    pub code_index: usize,
    pub soft_weights: Vec<f64>,
}

pub fn build_guidance(
    selector: &CodeSelector,
    codebook: &Codebook,
    s: &Matrix,
    lambda_q: f64,
    tau: f64,
    gumbel: &[f64],
) -> Result<GuidanceBundle> {
    let logits = select_logits(selector, s)?;
    let soft_weights = gumbel_softmax_with_noise(&logits, gumbel, tau)?;
    let (code_index, code) = quantize(&soft_weights, codebook);
    let combined = combine_guidance(s, code, lambda_q)?;
    Ok(GuidanceBundle {
        raw: s.clone(),
        quantized: code.clone(),
        combined,
        code_index,
        soft_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn rng(seed: u64) -> StdRng {
        seeded(seed, &[])
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 3,
            heads: 1,
            blocks: 1,
            max_len: 2,
            item_count: 5,
            codes: 4,
            dropout_attn: 0.0,
            dropout_emb: 0.0,
            init_std: 0.5,
        }
    }

    #[test]
    fn zero_selector_gives_zero_logits() {
        let sel = CodeSelector::zeroed(&small_cfg());
        let s = Matrix::randn(2, 3, 1.0, &mut rng(1));
        assert_eq!(select_logits(&sel, &s).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn logits_deterministic_and_shape_checked() {
        let sel = CodeSelector::init(&small_cfg(), &mut rng(2));
        let s = Matrix::randn(2, 3, 1.0, &mut rng(3));
        assert_eq!(select_logits(&sel, &s).unwrap(), select_logits(&sel, &s).unwrap());
        let wrong = Matrix::zeros(3, 3);
        assert!(matches!(select_logits(&sel, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn logits_are_lipschitz_near_a_point() {
        let sel = CodeSelector::init(&small_cfg(), &mut rng(2));
        let s = Matrix::randn(2, 3, 1.0, &mut rng(3));
        let dir = Matrix::randn(2, 3, 1.0, &mut rng(4));
        let base = select_logits(&sel, &s).unwrap();
        let diff = |h: f64| {
            let mut p = s.clone();
            p.scaled_add_assign(h, &dir);
            let o = select_logits(&sel, &p).unwrap();
            o.iter().zip(&base).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let (d1, d2) = (diff(1e-3), diff(1e-4));
        assert!(d2 < d1);
        // first-order: shrinking the step by 10 shrinks the change by ~10
        assert!((d1 / d2 - 10.0).abs() < 0.1, "{}", d1 / d2);
    }

    #[test]
    fn tape_logits_match_plain() {
        let cfg = small_cfg();
        let sel = CodeSelector::init(&cfg, &mut rng(5));
        let s = Matrix::randn(2, 3, 1.0, &mut rng(6));
        let mut tape = Tape::new();
        let vars = [
            tape.param(1, &sel.w1),
            tape.param(2, &sel.b1),
            tape.param(3, &sel.w2),
            tape.param(4, &sel.b2),
        ];
        let sv = tape.constant(s.clone());
        let o = select_logits_on_tape(&mut tape, &vars, sv);
        let plain = select_logits(&sel, &s).unwrap();
        for (a, b) in tape.value(o).as_slice().iter().zip(plain) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gumbel_softmax_normalizes() {
        let o = [0.3, -1.0, 2.0, 0.0];
        for seed in 0..20 {
            let g = gumbel_softmax(&o, 0.7, seed).unwrap();
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn low_temperature_sharpens() {
        let o = [0.3, -1.0, 2.0, 0.0];
        let g = gumbel_softmax(&o, 1e-4, 3).unwrap();
        let max = g.iter().copied().fold(0.0, f64::max);
        assert!(max > 1.0 - 1e-9);
    }

    #[test]
    fn bad_temperature_rejected() {
        assert!(matches!(gumbel_softmax(&[0.0, 1.0], 0.0, 1), Err(Error::InvalidTemperature(_))));
        assert!(matches!(gumbel_softmax(&[0.0, 1.0], -1.0, 1), Err(Error::InvalidTemperature(_))));
    }

    #[test]
    fn equal_logits_select_uniformly() {
        let m = 5;
        let n = 100_000;
        let mut counts = vec![0usize; m];
        let mut r = rng(8);
        for _ in 0..n {
            let g = gumbel_softmax_with_rng(&[0.4; 5], 1.0, &mut r).unwrap();
            counts[argmax_lowest(&g)] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.2).abs() < 0.01);
        }
    }

    #[test]
    fn quantize_examples() {
        let codes: Vec<Matrix> = (0..3).map(|i| Matrix::filled(1, 2, i as f64)).collect();
        let cb = Codebook::from_codes(codes, 0.0);
        let (m, c) = quantize(&[0.0, 0.0, 1.0], &cb);
        assert_eq!(m, 2);
        assert_eq!(c, &cb.codes[2]);
        assert_eq!(quantize(&[0.5, 0.5, 0.0], &cb).0, 0);
    }

    /// Straight-through gradient w.r.t. logits against central differences
    /// of the soft relaxation `Σ g_m c_m`.
    #[test]
    fn straight_through_matches_soft_relaxation_fd() {
        let mut r = rng(12);
        let codes: Vec<Matrix> = (0..4).map(|_| Matrix::randn(2, 3, 1.0, &mut r)).collect();
        let target = Matrix::randn(2, 3, 1.0, &mut r);
        let logits = Matrix::randn(1, 4, 1.0, &mut r);
        let noise = gumbel_noise(4, &mut r);
        let tau = 0.8;

        let loss_of = |sq: &Matrix| sq.zip_map(&target, |a, b| (a - b) * (a - b)).sum();

        let mut tape = Tape::new();
        let l = tape.param(0, &logits);
        let g = gumbel_softmax_on_tape(&mut tape, l, noise.clone(), tau);
        let (sq, _) = tape.straight_through(g, &codes, None);
        let hard = tape.value(sq).clone();
        let seed = hard.zip_map(&target, |a, b| 2.0 * (a - b));
        let mut grads = vec![Matrix::zeros(1, 4)];
        tape.backward(&[(sq, &seed)], &mut grads);

        // The soft path is differentiated at the hard forward value: the
        // surrogate is L(c_{m*} + Σ (g − g₀) c), evaluated by differences.
        let g0 = gumbel_softmax_with_noise(logits.as_slice(), &noise, tau).unwrap();
        let surrogate = |o: &[f64]| {
            let g = gumbel_softmax_with_noise(o, &noise, tau).unwrap();
            let mut s = hard.clone();
            for (m, c) in codes.iter().enumerate() {
                s.scaled_add_assign(g[m] - g0[m], c);
            }
            loss_of(&s)
        };
        let h = 1e-6;
        for k in 0..4 {
            let mut p = logits.as_slice().to_vec();
            let mut q = p.clone();
            p[k] += h;
            q[k] -= h;
            let fd = (surrogate(&p) - surrogate(&q)) / (2.0 * h);
            let a = grads[0].as_slice()[k];
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-8), "{a} vs {fd}");
        }
    }

    #[test]
    fn combine_examples() {
        let mut r = rng(4);
        let s = Matrix::randn(3, 2, 1.0, &mut r);
        let q = Matrix::randn(3, 2, 1.0, &mut r);
        assert_eq!(combine_guidance(&s, &q, 0.0).unwrap(), s);
        assert_eq!(combine_guidance(&s, &s, 1.0).unwrap(), s.scale(2.0));
        let c = combine_guidance(&s, &q, 0.4).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(c.get(i, j), 0.4 * q.get(i, j) + s.get(i, j));
            }
        }
        assert!(combine_guidance(&s, &Matrix::zeros(2, 2), 0.4).is_err());
    }

    #[test]
    fn replacement_update_sets_batch_mean() {
        let mut r = rng(6);
        let mut cb = Codebook::random(3, 2, 2, 0.0, &mut r);
        let untouched = cb.codes[0].clone();
        let a = Matrix::randn(2, 2, 1.0, &mut r);
        let b = Matrix::randn(2, 2, 1.0, &mut r);
        cb.update(&[(1, &a)]).unwrap();
        assert_eq!(cb.codes[1], a);
        cb.update(&[(1, &a), (2, &b), (1, &b)]).unwrap();
        let mean = a.zip_map(&b, |x, y| (x + y) / 2.0);
        for (x, y) in cb.codes[1].as_slice().iter().zip(mean.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(cb.codes[2], b);
        assert_eq!(cb.codes[0], untouched);
        assert_eq!(cb.usage, vec![0, 3, 1]);
    }

    #[test]
    fn ema_update_blends() {
        let mut cb = Codebook::from_codes(vec![Matrix::filled(1, 2, 1.0), Matrix::zeros(1, 2)], 0.9);
        cb.update(&[(0, &Matrix::filled(1, 2, 3.0))]).unwrap();
        for v in cb.codes[0].as_slice() {
            assert!((v - (0.9 + 0.1 * 3.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_update_is_noop() {
        let mut cb = Codebook::random(3, 2, 2, 0.5, &mut rng(1));
        let before = cb.clone();
        cb.update(&[]).unwrap();
        assert_eq!(cb, before);
    }

    #[test]
    fn update_rejects_bad_shapes() {
        let mut cb = Codebook::random(2, 2, 2, 0.5, &mut rng(1));
        assert!(cb.update(&[(0, &Matrix::zeros(3, 2))]).is_err());
        assert!(cb.update(&[(5, &Matrix::zeros(2, 2))]).is_err());
    }

    #[test]
    fn init_from_exact_sample() {
        let mut r = rng(3);
        let sample: Vec<Matrix> = (0..4).map(|_| Matrix::randn(2, 2, 1.0, &mut r)).collect();
        let rep = init_codebook(4, (2, 2), 0.9, 1, Some(&sample)).unwrap();
        assert!(!rep.fell_back_to_random);
        let mut got: Vec<Vec<f64>> = rep.codebook.codes.iter().map(|c| c.as_slice().to_vec()).collect();
        let mut want: Vec<Vec<f64>> = sample.iter().map(|c| c.as_slice().to_vec()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn init_falls_back_when_sample_small() {
        let sample = vec![Matrix::zeros(2, 2)];
        let rep = init_codebook(4, (2, 2), 0.9, 1, Some(&sample)).unwrap();
        assert!(rep.fell_back_to_random);
        assert_eq!(rep.codebook.len(), 4);
        assert!(init_codebook(1, (2, 2), 0.9, 1, None).is_err());
    }

    #[test]
    fn init_is_seeded_with_expected_variance() {
        let a = init_codebook(10, (100, 100), 0.9, 5, None).unwrap().codebook;
        let b = init_codebook(10, (100, 100), 0.9, 5, None).unwrap().codebook;
        assert_eq!(a, b);
        let entries: Vec<f64> = a.codes.iter().flat_map(|c| c.as_slice().to_vec()).collect();
        assert_eq!(entries.len(), 100_000);
        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
        let var = entries.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / entries.len() as f64;
        assert!((var / RANDOM_CODE_VARIANCE - 1.0).abs() < 0.05, "{var}");
    }

    proptest! {
        #[test]
        fn combine_is_linear(a in 0.01f64..5.0, lam in 0.0f64..1.0, seed in 0u64..1000) {
            let mut r = rng(seed);
            let s = Matrix::randn(3, 2, 1.0, &mut r);
            let q = Matrix::randn(3, 2, 1.0, &mut r);
            let lhs = combine_guidance(&s.scale(a), &q.scale(a), lam).unwrap();
            let rhs = combine_guidance(&s, &q, lam).unwrap().scale(a);
            for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn guidance_bundle_invariants(seed in 0u64..500, lam in 0.0f64..1.0) {
            let cfg = small_cfg();
            let mut r = rng(seed);
            let sel = CodeSelector::init(&cfg, &mut r);
            let cb = Codebook::random(4, 2, 3, 0.9, &mut r);
            let s = Matrix::randn(2, 3, 1.0, &mut r);
            let noise = gumbel_noise(4, &mut r);
            let b = build_guidance(&sel, &cb, &s, lam, 1.0, &noise).unwrap();
            prop_assert!((b.soft_weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert_eq!(b.code_index, argmax_lowest(&b.soft_weights));
            prop_assert_eq!(&b.combined, &combine_guidance(&b.raw, &b.quantized, lam).unwrap());
        }
    }
}
