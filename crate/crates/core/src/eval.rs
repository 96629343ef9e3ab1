//! Ranking metrics, the evaluation loop, the grouped-mean variance probe
//! and codebook/embedding diagnostics.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, LogNormal, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{pad_truncate, Corpus, ItemId};
use crate::denoiser::embed_sequence;
use crate::error::{Error, Result};
use crate::inference::{generate_next_item, target_rank, GenerationParams};
use crate::model::ModelState;
use crate::rng::{derive, seeded};
use crate::schedule::NoiseSchedule;
use crate::svq::{select_logits, Codebook};
use crate::autograd::argmax_lowest;

pub fn hit_rate_at_k(rank: Option<usize>, k: usize) -> Result<f64> {
    check_k(k)?;
    match rank {
        Some(0) => Err(Error::InvalidRank(0)),
        Some(r) if r <= k => Ok(1.0),
        _ => Ok(0.0),
    }
}

/// Single-relevant-item NDCG (ideal DCG = 1).
pub fn ndcg_at_k(rank: Option<usize>, k: usize) -> Result<f64> {
    check_k(k)?;
    match rank {
        Some(0) => Err(Error::InvalidRank(0)),
        Some(r) if r <= k => Ok(1.0 / ((r + 1) as f64).log2()),
        _ => Ok(0.0),
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::InvalidK { k, available: 0 })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Generation seeds averaged per user.
    pub seeds: usize,
    pub seed: u64,
    pub exclude_seen: bool,
    pub generation: GenerationParams,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20],
            seeds: 1,
            seed: 0,
            exclude_seen: false,
            generation: GenerationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
    pub fingerprint: String,
}

impl MetricsReport {
    /// Per-user average of HR/NDCG from 1-based target ranks.
    pub fn from_ranks(ranks: &[usize], ks: &[usize], fingerprint: String) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            let mut h = 0.0;
            let mut n = 0.0;
            for &r in ranks {
                h += hit_rate_at_k(Some(r), k)?;
                n += ndcg_at_k(Some(r), k)?;
            }
            hr.insert(k, h / ranks.len() as f64);
            ndcg.insert(k, n / ranks.len() as f64);
        }
        Ok(Self {
            hr,
            ndcg,
            n_users: ranks.len(),
            fingerprint,
        })
    }
}

/// SHA-256 of the JSON encoding of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable config");
    hex::encode(Sha256::digest(bytes))
}

/// Generation seed for `user` and repeat `rep`; keyed by user id so results
/// do not depend on corpus order.
pub fn user_seed(seed: u64, user: u64, rep: usize) -> u64 {
    derive(seed, &[0xe7a1, user, rep as u64])
}

/// Generates for every user, ranks the full catalog and averages HR/NDCG
/// over users (and over `seeds` generations per user).
pub fn evaluate(state: &ModelState, corpus: &Corpus, sched: &NoiseSchedule, opts: &EvalOptions) -> Result<MetricsReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let reps = opts.seeds.max(1);
    let mut sums: BTreeMap<usize, (f64, f64)> = opts.ks.iter().map(|&k| (k, (0.0, 0.0))).collect();
    let mut n_users = 0;
    for seq in &corpus.sequences {
        let Some(target) = seq.target else { continue };
        let exclude: HashSet<ItemId> = if opts.exclude_seen {
            seq.history.iter().copied().filter(|&i| i != target).collect()
        } else {
            HashSet::new()
        };
        for rep in 0..reps {
            let tr = generate_next_item(
                state,
                &seq.history,
                sched,
                opts.generation,
                user_seed(opts.seed, seq.user, rep),
                false,
            )?;
            let rank = target_rank(&tr.x0, &state.embeddings, target, &exclude)?;
            for (&k, (h, n)) in sums.iter_mut() {
                *h += hit_rate_at_k(Some(rank), k)? / reps as f64;
                *n += ndcg_at_k(Some(rank), k)? / reps as f64;
            }
        }
        n_users += 1;
    }
    if n_users == 0 {
        return Err(Error::EmptyCorpus);
    }
    let fp = fingerprint(&(&state.config, opts, state.step_count));
    Ok(MetricsReport {
        hr: sums.iter().map(|(&k, v)| (k, v.0 / n_users as f64)).collect(),
        ndcg: sums.iter().map(|(&k, v)| (k, v.1 / n_users as f64)).collect(),
        n_users,
        fingerprint: fp,
    })
}

/// Scalar distribution with closed-form first two moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScalarDist {
    LogNormal { mu: f64, sigma: f64 },
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
}

impl ScalarDist {
    pub fn mean(&self) -> f64 {
        match *self {
            Self::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            Self::Normal { mean, .. } => mean,
            Self::Uniform { low, high } => (low + high) / 2.0,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            Self::LogNormal { mu, sigma } => (2.0 * mu + 2.0 * sigma * sigma).exp(),
            Self::Normal { mean, std } => mean * mean + std * std,
            Self::Uniform { low, high } => (low * low + low * high + high * high) / 3.0,
        }
    }

    pub fn variance(&self) -> f64 {
        self.second_moment() - self.mean().powi(2)
    }

    fn sampler(&self) -> Result<Box<dyn FnMut(&mut crate::rng::Rng) -> f64>> {
        let bad = |e: String| Error::Config(format!("distribution parameters: {e}"));
        Ok(match *self {
            Self::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma).map_err(|e| bad(e.to_string()))?;
                Box::new(move |r| d.sample(r))
            }
            Self::Normal { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| bad(e.to_string()))?;
                Box::new(move |r| d.sample(r))
            }
            Self::Uniform { low, high } => {
                let d = Uniform::new(low, high).map_err(|e| bad(e.to_string()))?;
                Box::new(move |r| d.sample(r))
            }
        })
    }
}

/// `√(λ²·E[s²]/E[s]² + λ + 1/4) − (2λ−1)/2`, the group size above which the
/// grouped mean is claimed not to increase variance.
pub fn variance_threshold(lambda_q: f64, mean: f64, second_moment: f64) -> Result<f64> {
    if mean == 0.0 {
        return Err(Error::ThresholdUndefined);
    }
    Ok((lambda_q * lambda_q * second_moment / (mean * mean) + lambda_q + 0.25).sqrt() - (2.0 * lambda_q - 1.0) / 2.0)
}

/// Exact `V[s̃]/V[s]` for `s̃ = s + (λ/n)·Σ_{S}` with `s ∈ S`, `|S| = n`, i.i.d.
pub fn exact_variance_ratio(lambda_q: f64, group_size: usize) -> f64 {
    1.0 + (2.0 * lambda_q + lambda_q * lambda_q) / group_size as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbe {
    pub lambda_q: f64,
    pub group_size: usize,
    pub mean: f64,
    pub second_moment: f64,
    pub threshold: f64,
    /// Pooled over all trials.
    pub var_s: f64,
    pub var_s_tilde: f64,
    pub mean_s_tilde: f64,
    /// Standard error of `mean_s_tilde`.
    pub mean_s_tilde_se: f64,
    pub exact_ratio: f64,
    pub trials: usize,
    pub trials_reduced: usize,
}

impl VarianceProbe {
    pub fn fraction_reduced(&self) -> f64 {
        self.trials_reduced as f64 / self.trials as f64
    }

    pub fn threshold_met(&self) -> bool {
        self.group_size as f64 >= self.threshold.ceil()
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v)
}

/// Monte Carlo comparison of `V[s̃]` and `V[s]` where each `s` is grouped
/// with `group_size − 1` i.i.d. companions and
/// `s̃ = s + (λ_q/|S|)·Σ_{t∈S} s_t`.
pub fn variance_oracle(
    lambda_q: f64,
    group_size: usize,
    dist: ScalarDist,
    trials: usize,
    samples_per_trial: usize,
    seed: u64,
) -> Result<VarianceProbe> {
    if group_size == 0 || trials == 0 || samples_per_trial < 2 {
        return Err(Error::Config("group_size, trials >= 1 and samples_per_trial >= 2 required".into()));
    }
    let mean = dist.mean();
    let second = dist.second_moment();
    let threshold = variance_threshold(lambda_q, mean, second)?;
    let mut draw = dist.sampler()?;
    let mut all_s = Vec::with_capacity(trials * samples_per_trial);
    let mut all_t = Vec::with_capacity(trials * samples_per_trial);
    let mut reduced = 0;
    for trial in 0..trials {
        let mut rng = seeded(seed, &[0x7a41, trial as u64]);
        let mut s = Vec::with_capacity(samples_per_trial);
        let mut st = Vec::with_capacity(samples_per_trial);
        for _ in 0..samples_per_trial {
            let x = draw(&mut rng);
            let mut sum = x;
            for _ in 1..group_size {
                sum += draw(&mut rng);
            }
            s.push(x);
            st.push(x + lambda_q / group_size as f64 * sum);
        }
        let (_, vs) = moments(&s);
        let (_, vt) = moments(&st);
        if vt <= vs {
            reduced += 1;
        }
        all_s.extend(s);
        all_t.extend(st);
    }
    let (_, var_s) = moments(&all_s);
    let (mean_t, var_t) = moments(&all_t);
    Ok(VarianceProbe {
        lambda_q,
        group_size,
        mean,
        second_moment: second,
        threshold,
        var_s,
        var_s_tilde: var_t,
        mean_s_tilde: mean_t,
        mean_s_tilde_se: (var_t / all_t.len() as f64).sqrt(),
        exact_ratio: exact_variance_ratio(lambda_q, group_size),
        trials,
        trials_reduced: reduced,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookReport {
    pub usage: Vec<u64>,
    pub usage_entropy: f64,
    /// Euclidean distance between every pair of codes.
    pub pairwise: Vec<Vec<f64>>,
    pub mean_pairwise_distance: f64,
    /// Assignment of each corpus sequence (noise-free argmax of the logits).
    pub assignments: Vec<usize>,
    /// Entropy of the label distribution inside each code (when labels are given).
    pub per_code_entropy: Option<Vec<f64>>,
    pub nmi: Option<f64>,
    pub nmi_shuffled: Option<f64>,
}

fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn pairwise_distances(codebook: &Codebook) -> Vec<Vec<f64>> {
    let m = codebook.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = codebook.codes[i]
                .as_slice()
                .iter()
                .zip(codebook.codes[j].as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    out
}

/// Normalized mutual information `I(a;b)/√(H(a)H(b))`; zero when either
/// labelling is constant.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, u64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *pa.entry(x).or_default() += 1;
        *pb.entry(y).or_default() += 1;
    }
    let ha = entropy(&pa.values().copied().collect::<Vec<_>>());
    let hb = entropy(&pb.values().copied().collect::<Vec<_>>());
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy / (pa[&x] as f64 / n * pb[&y] as f64 / n)).ln()
        })
        .sum();
    mi / (ha * hb).sqrt()
}

/// Noise-free code assignment of every sequence in `corpus`.
pub fn assign_codes(state: &ModelState, corpus: &Corpus) -> Result<Vec<usize>> {
    corpus
        .sequences
        .iter()
        .map(|seq| {
            let s = embed_sequence(&state.embeddings, &pad_truncate(&seq.history, state.config.max_len))?;
            Ok(argmax_lowest(&select_logits(&state.selector, &s)?))
        })
        .collect()
}

/// Usage, dispersion and (optionally) cluster alignment of the codebook.
/// `labels` gives a reference cluster per corpus sequence; the shuffled
/// control permutes them under `seed`.
pub fn codebook_diagnostics(
    state: &ModelState,
    corpus: Option<&Corpus>,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<CodebookReport> {
    let cb = &state.codebook;
    let pairwise = pairwise_distances(cb);
    let m = cb.len();
    let pairs = (m * (m - 1) / 2).max(1) as f64;
    let mean_pairwise_distance = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).map(|(i, j)| pairwise[i][j]).sum::<f64>() / pairs;
    let assignments = match corpus {
        Some(c) => assign_codes(state, c)?,
        None => Vec::new(),
    };
    let (per_code_entropy, nmi_v, nmi_s) = match labels {
        Some(l) if l.len() == assignments.len() && !l.is_empty() => {
            let k = l.iter().max().map_or(0, |&x| x + 1);
            let mut counts = vec![vec![0u64; k]; m];
            for (&a, &y) in assignments.iter().zip(l) {
                counts[a][y] += 1;
            }
            let mut shuffled = l.to_vec();
            shuffled.shuffle(&mut seeded(seed, &[0x5bff]));
            (
                Some(counts.iter().map(|c| entropy(c)).collect()),
                Some(nmi(&assignments, l)),
                Some(nmi(&assignments, &shuffled)),
            )
        }
        Some(_) => return Err(Error::Dimension("one label per corpus sequence required".into())),
        None => (None, None, None),
    };
    Ok(CodebookReport {
        usage: cb.usage.clone(),
        usage_entropy: entropy(&cb.usage),
        pairwise,
        mean_pairwise_distance,
        assignments,
        per_code_entropy,
        nmi: nmi_v,
        nmi_shuffled: nmi_s,
    })
}

/// Generated `x⁰` for every user with a non-empty history.
pub fn generated_embeddings(
    state: &ModelState,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    params: GenerationParams,
    seed: u64,
) -> Result<Vec<(u64, Vec<f64>)>> {
    corpus
        .sequences
        .iter()
        .filter(|s| !s.history.is_empty())
        .map(|s| {
            let tr = generate_next_item(state, &s.history, sched, params, user_seed(seed, s.user, 0), false)?;
            Ok((s.user, tr.x0))
        })
        .collect()
}

/// Writes `user,f1,…,fD` per user.
pub fn export_embeddings(
    state: &ModelState,
    corpus: &Corpus,
    sched: &NoiseSchedule,
    params: GenerationParams,
    seed: u64,
    path: &Path,
) -> Result<usize> {
    let rows = generated_embeddings(state, corpus, sched, params, seed)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (user, x) in &rows {
        write!(out, "{user}")?;
        for v in x {
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(rows.len())
}

/// Mean pairwise cosine similarity of a set of vectors.
pub fn mean_pairwise_cosine(xs: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let ni = crate::tensor::norm(&xs[i]);
            let nj = crate::tensor::norm(&xs[j]);
            total += crate::tensor::dot(&xs[i], &xs[j]) / (ni * nj).max(1e-300);
            n += 1;
        }
    }
    total / n.max(1) as f64
}
