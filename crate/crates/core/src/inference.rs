//! Reverse-chain generation of the next-item latent and catalog ranking.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{pad_truncate, ItemId, PAD};
use crate::denoiser::{embed_sequence, DenoiseFn};
use crate::error::{Error, Result};
use crate::model::{ItemEmbeddingTable, ModelState};
use crate::rng::{normal_vec, seeded, Rng};
use crate::schedule::NoiseSchedule;
use crate::svq::{build_guidance, gumbel_noise};
use crate::tensor::{dot, Matrix};

/// Quantizer settings used at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub lambda_q: f64,
    pub tau: f64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            lambda_q: 0.4,
            tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    /// `x^T, …, x^0` when retained (length T+1).
    pub latents: Option<Vec<Vec<f64>>>,
    /// `x̂⁰` predicted at `t = T, …, 1` when retained.
    pub predictions: Option<Vec<Vec<f64>>>,
    /// Reverse-step noise `z` at `t = T, …, 1` when retained; zero at `t = 1`.
    pub noise: Option<Vec<Vec<f64>>>,
    pub code_index: Option<usize>,
    pub x0: Vec<f64>,
}

/// Runs the reverse chain from `x^T ~ N(0, I)` with fixed guidance.
pub fn generate_with<D: DenoiseFn + ?Sized>(
    denoiser: &D,
    guidance: &Matrix,
    mask: &[bool],
    sched: &NoiseSchedule,
    rng: &mut Rng,
    retain_trace: bool,
) -> Result<GenerationTrace> {
    let dim = guidance.cols();
    let steps = sched.steps();
    let mut x = normal_vec(dim, rng);
    let mut latents = retain_trace.then(|| vec![x.clone()]);
    let mut predictions = retain_trace.then(Vec::new);
    let mut noise = retain_trace.then(Vec::new);
    for t in (1..=steps).rev() {
        let x_hat = denoiser.denoise(&x, guidance, t, mask)?;
        if x_hat.len() != dim {
            return Err(Error::Dimension(format!("denoiser returned {} entries, D = {dim}", x_hat.len())));
        }
        let z = if t > 1 { normal_vec(dim, rng) } else { vec![0.0; dim] };
        x = sched.reverse_step(&x_hat, &x, t, &z)?;
        if let (Some(l), Some(p), Some(n)) = (&mut latents, &mut predictions, &mut noise) {
            l.push(x.clone());
            p.push(x_hat);
            n.push(z);
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("generated latent"));
    }
    Ok(GenerationTrace {
        latents,
        predictions,
        noise,
        code_index: None,
        x0: x,
    })
}

/// Generates `x⁰` for the user whose history is `history`. One Gumbel draw
/// fixes the code for the whole chain.
pub fn generate_next_item(
    state: &ModelState,
    history: &[ItemId],
    sched: &NoiseSchedule,
    params: GenerationParams,
    seed: u64,
    retain_trace: bool,
) -> Result<GenerationTrace> {
    if !state.is_finite() {
        return Err(Error::InvalidState("model parameters contain non-finite values".into()));
    }
    if history.iter().all(|&i| i == PAD) {
        return Err(Error::InvalidState("history is empty".into()));
    }
    let cfg = &state.config;
    let padded = pad_truncate(history, cfg.max_len);
    let mask: Vec<bool> = padded.iter().map(|&i| i != PAD).collect();
    let s = embed_sequence(&state.embeddings, &padded)?;
    let mut rng = seeded(seed, &[0x9e4e]);
    let g = gumbel_noise(cfg.codes, &mut rng);
    let bundle = build_guidance(&state.selector, &state.codebook, &s, params.lambda_q, params.tau, &g)?;
    let mut trace = generate_with(state, &bundle.combined, &mask, sched, &mut rng, retain_trace)?;
    trace.code_index = Some(bundle.code_index);
    Ok(trace)
}

fn scores(x0: &[f64], table: &ItemEmbeddingTable) -> Result<Vec<f64>> {
    if x0.len() != table.dim() {
        return Err(Error::Dimension(format!("x0 has {} entries, table D = {}", x0.len(), table.dim())));
    }
    Ok((0..table.0.rows()).map(|i| dot(x0, table.0.row(i))).collect())
}

/// Top-K items by inner product, descending, ties to the lower id. Padding
/// and `exclude` never appear.
pub fn rank_items(
    x0: &[f64],
    table: &ItemEmbeddingTable,
    k: usize,
    exclude: &HashSet<ItemId>,
) -> Result<Vec<(ItemId, f64)>> {
    let s = scores(x0, table)?;
    let mut cands: Vec<(ItemId, f64)> = (1..s.len())
        .map(|i| (i as ItemId, s[i]))
        .filter(|(i, _)| !exclude.contains(i))
        .collect();
    if k == 0 || k > cands.len() {
        return Err(Error::InvalidK {
            k,
            available: cands.len(),
        });
    }
    let cmp = |a: &(ItemId, f64), b: &(ItemId, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, cmp);
        cands.truncate(k);
    }
    cands.sort_by(cmp);
    Ok(cands)
}

/// 1-based rank of `target` among all non-padding, non-excluded items under
/// the ordering of [`rank_items`]. The target itself is never excluded.
pub fn target_rank(x0: &[f64], table: &ItemEmbeddingTable, target: ItemId, exclude: &HashSet<ItemId>) -> Result<usize> {
    let s = scores(x0, table)?;
    let t = target as usize;
    if t == 0 || t >= s.len() {
        return Err(Error::Index {
            id: t,
            max: s.len() - 1,
        });
    }
    let ahead = (1..s.len())
        .filter(|&i| i != t && !exclude.contains(&(i as ItemId)))
        .filter(|&i| s[i] > s[t] || (s[i] == s[t] && i < t))
        .count();
    Ok(ahead + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConstantDenoiser;
    use crate::model::ModelConfig;
    use crate::schedule::ScheduleConfig;
    use crate::svq::Codebook;
    use proptest::prelude::*;

    fn one_hot_table(n: usize) -> ItemEmbeddingTable {
        let mut m = Matrix::zeros(n + 1, n + 1);
        for i in 0..=n {
            m.set(i, i, 1.0);
        }
        ItemEmbeddingTable(m)
    }

    fn random_table(n: usize, d: usize, seed: u64) -> ItemEmbeddingTable {
        ItemEmbeddingTable(Matrix::randn(n + 1, d, 1.0, &mut seeded(seed, &[])))
    }

    fn tiny_state(seed: u64) -> ModelState {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            blocks: 1,
            max_len: 4,
            item_count: 10,
            codes: 3,
            dropout_attn: 0.1,
            dropout_emb: 0.3,
            init_std: 0.3,
        };
        let mut r = seeded(seed, &[]);
        let cb = Codebook::random(3, 4, 8, 0.9, &mut r);
        ModelState::fresh(cfg, cb, &mut r).unwrap()
    }

    #[test]
    fn constant_denoiser_is_recovered_exactly() {
        let sched = ScheduleConfig::default().build().unwrap();
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.37 - 2.0).collect();
        let g = Matrix::zeros(3, 16);
        let out = generate_with(&ConstantDenoiser(v.clone()), &g, &[true; 3], &sched, &mut seeded(4, &[]), false).unwrap();
        assert_eq!(out.x0, v);
    }

    #[test]
    fn same_seed_same_latent() {
        let st = tiny_state(1);
        let sched = NoiseSchedule::truncated_linear(6, 1e-3, 0.05, 0.05).unwrap();
        let p = GenerationParams::default();
        let a = generate_next_item(&st, &[3, 4], &sched, p, 7, false).unwrap();
        let b = generate_next_item(&st, &[3, 4], &sched, p, 7, false).unwrap();
        let c = generate_next_item(&st, &[3, 4], &sched, p, 8, false).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x0, c.x0);
    }

    #[test]
    fn trace_replays_exactly() {
        let st = tiny_state(2);
        let sched = NoiseSchedule::truncated_linear(5, 1e-3, 0.05, 0.05).unwrap();
        let tr = generate_next_item(&st, &[1, 2, 9], &sched, GenerationParams::default(), 3, true).unwrap();
        let lat = tr.latents.as_ref().unwrap();
        let pred = tr.predictions.as_ref().unwrap();
        let z = tr.noise.as_ref().unwrap();
        assert_eq!(lat.len(), 6);
        for (k, t) in (1..=5).rev().enumerate() {
            let next = sched.reverse_step(&pred[k], &lat[k], t, &z[k]).unwrap();
            assert_eq!(next, lat[k + 1]);
        }
        assert_eq!(lat[5], tr.x0);
    }

    #[test]
    fn non_finite_state_is_rejected() {
        let mut st = tiny_state(3);
        st.denoiser.out_b.set(0, 0, f64::NAN);
        let sched = NoiseSchedule::truncated_linear(3, 1e-3, 0.05, 0.05).unwrap();
        let r = generate_next_item(&st, &[1], &sched, GenerationParams::default(), 0, false);
        assert!(matches!(r, Err(Error::InvalidState(_))));
    }

    #[test]
    fn one_hot_ranking() {
        let table = one_hot_table(9);
        let mut x0 = vec![0.0; 10];
        x0[7] = 1.0;
        let top = rank_items(&x0, &table, 3, &HashSet::new()).unwrap();
        assert_eq!(top[0].0, 7);
        let without = rank_items(&x0, &table, 3, &HashSet::from([7])).unwrap();
        assert!(without.iter().all(|(i, _)| *i != 7));
        // remaining scores are tied at zero, so lower ids win
        assert_eq!(without.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn k_too_large() {
        let table = one_hot_table(4);
        let x0 = vec![0.0; 5];
        assert!(matches!(
            rank_items(&x0, &table, 4, &HashSet::from([1])),
            Err(Error::InvalidK { k: 4, available: 3 })
        ));
        assert!(rank_items(&x0, &table, 0, &HashSet::new()).is_err());
    }

    #[test]
    fn top_k_matches_full_sort() {
        for seed in 0..20 {
            let table = random_table(30, 6, seed);
            let x0 = normal_vec(6, &mut seeded(seed, &[1]));
            let got: Vec<ItemId> = rank_items(&x0, &table, 5, &HashSet::new()).unwrap().iter().map(|p| p.0).collect();
            let mut all: Vec<(usize, f64)> = (1..=30)
                .map(|i| {
                    let mut s = 0.0;
                    for k in 0..6 {
                        s += x0[k] * table.0.get(i, k);
                    }
                    (i, s)
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<ItemId> = all[..5].iter().map(|p| p.0 as ItemId).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn target_rank_agrees_with_full_list() {
        let table = random_table(25, 5, 9);
        let x0 = normal_vec(5, &mut seeded(9, &[2]));
        let excl = HashSet::from([3, 11]);
        let full = rank_items(&x0, &table, 23, &excl).unwrap();
        for (pos, (item, _)) in full.iter().enumerate() {
            assert_eq!(target_rank(&x0, &table, *item, &excl).unwrap(), pos + 1);
        }
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_order(seed in 0u64..500, a in 0.01f64..100.0) {
            let table = random_table(20, 4, seed);
            let x0 = normal_vec(4, &mut seeded(seed, &[3]));
            let scaled: Vec<f64> = x0.iter().map(|v| a * v).collect();
            let l1: Vec<ItemId> = rank_items(&x0, &table, 8, &HashSet::new()).unwrap().iter().map(|p| p.0).collect();
            let l2: Vec<ItemId> = rank_items(&scaled, &table, 8, &HashSet::new()).unwrap().iter().map(|p| p.0).collect();
            prop_assert_eq!(l1, l2);
        }

        #[test]
        fn exclusions_never_returned(seed in 0u64..500, excl in proptest::collection::hash_set(1u32..=15, 0..10)) {
            let table = random_table(15, 3, seed);
            let x0 = normal_vec(3, &mut seeded(seed, &[4]));
            let k = 15 - excl.len();
            let out = rank_items(&x0, &table, k, &excl).unwrap();
            prop_assert_eq!(out.len(), k);
            prop_assert!(out.iter().all(|(i, _)| *i != PAD && !excl.contains(i)));
        }
    }
}
