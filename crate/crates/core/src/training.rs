//! The optimization loop: codebook maintenance, Adam updates, periodic
//! evaluation and early stopping.

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, pad_truncate, Batch, Corpus};
use crate::denoiser::embed_sequence;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport};
use crate::inference::GenerationParams;
use crate::losses::{loss_gradients_anchored, select_batch, LossBreakdown, LossHyper};
use crate::model::{ModelConfig, ModelState, EMBEDDING_SLOT};
use crate::optim::AdamState;
use crate::rng::{derive, seeded};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::svq::{init_codebook, CodebookInit};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Evaluate after every this many epochs.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Early stopping tracks HR at this cutoff.
    pub early_stop_k: usize,
    pub eval_ks: Vec<usize>,
    pub eval_seeds: usize,
    pub exclude_seen: bool,
    pub lambda_q: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub ema_decay: f64,
    pub codebook_init: CodebookInit,
    pub codes: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub dropout_attn: f64,
    pub dropout_emb: f64,
    pub init_std: f64,
    /// Keep the item embedding table at its initial values.
    pub freeze_embeddings: bool,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 512,
            max_epochs: 100,
            eval_every: 2,
            patience: 10,
            early_stop_k: 20,
            eval_ks: vec![5, 10, 20],
            eval_seeds: 1,
            exclude_seen: false,
            lambda_q: 0.4,
            lambda_c: 0.4,
            tau: 1.0,
            ema_decay: 0.9,
            codebook_init: CodebookInit::Random,
            codes: 8,
            dim: 128,
            heads: 2,
            blocks: 2,
            dropout_attn: 0.1,
            dropout_emb: 0.3,
            init_std: 0.02,
            freeze_embeddings: false,
            schedule: ScheduleConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("train.lr must be a non-negative finite number");
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2");
        }
        if self.eval_every == 0 || self.patience == 0 {
            return bad("train.eval_every and train.patience must be at least 1");
        }
        if self.early_stop_k == 0 || self.eval_ks.contains(&0) {
            return bad("evaluation cutoffs must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda_q) {
            return bad("svq.lambda_q must lie in [0, 1]");
        }
        if !(self.lambda_c >= 0.0) {
            return bad("loss.lambda_c must be non-negative");
        }
        if !(self.tau > 0.0) {
            return bad("svq.tau must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("svq.ema_decay must lie in [0, 1]");
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn hyper(&self) -> LossHyper {
        LossHyper {
            lambda_q: self.lambda_q,
            lambda_c: self.lambda_c,
            tau: self.tau,
        }
    }

    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            lambda_q: self.lambda_q,
            tau: self.tau,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        let mut ks = self.eval_ks.clone();
        if !ks.contains(&self.early_stop_k) {
            ks.push(self.early_stop_k);
        }
        ks.sort_unstable();
        EvalOptions {
            ks,
            seeds: self.eval_seeds,
            seed: self.seed,
            exclude_seen: self.exclude_seen,
            generation: self.generation(),
        }
    }

    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            max_len: corpus.max_len,
            item_count: corpus.item_count,
            codes: self.codes,
            dropout_attn: self.dropout_attn,
            dropout_emb: self.dropout_emb,
            init_std: self.init_std,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub l_r: f64,
    pub l_c: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: u64,
    pub step: u64,
    pub metrics: MetricsReport,
}

/// Early-stopping bookkeeping carried across resumes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub best_score: Option<f64>,
    pub best_epoch: u64,
    pub stale_evals: usize,
    pub evaluations: usize,
}

impl TrainProgress {
    pub fn exhausted(&self, patience: usize) -> bool {
        self.stale_evals >= patience
    }
}

/// State to continue from.
#[derive(Debug, Clone)]
pub struct Resume {
    pub state: ModelState,
    pub progress: TrainProgress,
    /// Best state seen so far; the resumed state stands in when absent.
    pub best: Option<ModelState>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelState,
    pub last: ModelState,
    pub log: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub progress: TrainProgress,
    pub stopped_early: bool,
}

/// What the evaluation hook sees.
pub struct Snapshot<'a> {
    pub state: &'a ModelState,
    pub best: &'a ModelState,
    pub progress: &'a TrainProgress,
    pub eval: &'a EvalRecord,
}

/// Fresh model for `corpus`, with the codebook drawn per `cfg.codebook_init`.
pub fn init_state(corpus: &Corpus, cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    let mc = cfg.model_config(corpus);
    mc.validate()?;
    let mut rng = seeded(cfg.seed, &[0x1417]);
    let placeholder = init_codebook(cfg.codes, (mc.max_len, mc.dim), cfg.ema_decay, cfg.seed, None)?;
    let mut state = ModelState::fresh(mc, placeholder.codebook, &mut rng)?;
    if cfg.codebook_init == CodebookInit::Sample {
        let sample: Vec<Matrix> = corpus
            .sequences
            .iter()
            .map(|s| embed_sequence(&state.embeddings, &pad_truncate(&s.history, mc.max_len)))
            .collect::<Result<_>>()?;
        let report = init_codebook(cfg.codes, (mc.max_len, mc.dim), cfg.ema_decay, cfg.seed, Some(&sample))?;
        if report.fell_back_to_random {
            log::warn!("corpus has fewer than M = {} sequences; codebook initialized randomly", cfg.codes);
        }
        state.codebook = report.codebook;
    }
    Ok(state)
}

/// Seed for the optimizer step that follows `step_count` completed steps.
pub fn step_seed(seed: u64, step_count: u64) -> u64 {
    derive(seed, &[0x57e9, step_count])
}

/// One optimization step: select codes, update the codebook with the
/// selected sequences, then take an Adam step on the loss computed with the
/// updated codes. The codebook itself receives no gradient.
pub fn train_step(
    state: &mut ModelState,
    batch: &Batch,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let hyper = cfg.hyper();
    let selections = select_batch(state, batch, sched, &hyper, seed)?;
    let previous = state.codebook.clone();
    let assignments: Vec<(usize, &Matrix)> = selections.iter().map(|s| (s.code, &s.raw)).collect();
    state.codebook.update(&assignments)?;
    let anchors: Vec<Vec<f64>> = selections.into_iter().map(|s| s.weights).collect();
    let mut grads = match loss_gradients_anchored(state, batch, sched, &hyper, seed, Some(&anchors)) {
        Ok(g) => g,
        Err(e) => {
            state.codebook = previous;
            return Err(e);
        }
    };
    if cfg.freeze_embeddings {
        // zero gradient keeps both Adam moments at zero, so the update is exactly 0
        let g = &mut grads.grads[EMBEDDING_SLOT];
        *g = Matrix::zeros(g.rows(), g.cols());
    }
    let mut opt = std::mem::take(&mut state.optimizer);
    opt.step(&mut state.params_mut(), &grads.grads, cfg.lr);
    state.optimizer = opt;
    state.step_count += 1;
    Ok(grads.loss)
}

pub fn train(train_corpus: &Corpus, eval_corpus: &Corpus, cfg: &TrainConfig, resume: Option<Resume>) -> Result<TrainOutcome> {
    train_with(train_corpus, eval_corpus, cfg, resume, &mut |_| Ok(()))
}

/// [`train`] with a hook run after every evaluation (for checkpointing).
pub fn train_with(
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<Resume>,
    on_eval: &mut dyn FnMut(&Snapshot<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !train_corpus.is_split() || !eval_corpus.is_split() {
        return Err(Error::Config("training and evaluation corpora must be split".into()));
    }
    let sched = cfg.schedule.build()?;
    let (mut state, mut progress, best) = match resume {
        Some(r) => {
            let expected = cfg.model_config(train_corpus);
            if r.state.config != expected {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "checkpoint model {:?} does not match configured {:?}",
                    r.state.config, expected
                )));
            }
            (r.state, r.progress, r.best)
        }
        None => (init_state(train_corpus, cfg)?, TrainProgress::default(), None),
    };
    if state.optimizer.first.len() != state.params().len() {
        state.optimizer = AdamState::zeros_like(&state.params());
    }
    let mut best = best.unwrap_or_else(|| state.clone());
    let eval_opts = cfg.eval_options();
    let mut log = Vec::new();
    let mut evals = Vec::new();
    let mut stopped_early = progress.exhausted(cfg.patience);

    while !stopped_early && state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        for batch in make_batches(train_corpus, cfg.batch_size, derive(cfg.seed, &[0xe90c, epoch]))? {
            let seed = step_seed(cfg.seed, state.step_count);
            let loss = train_step(&mut state, &batch, &sched, cfg, seed)?;
            log.push(StepRecord {
                step: state.step_count,
                epoch: epoch + 1,
                l_r: loss.l_r,
                l_c: loss.l_c,
                total: loss.total,
                lr: cfg.lr,
            });
        }
        state.epoch += 1;
        if state.epoch % cfg.eval_every == 0 {
            let metrics = evaluate(&state, eval_corpus, &sched, &eval_opts)?;
            let score = metrics.hr[&cfg.early_stop_k];
            progress.evaluations += 1;
            if progress.best_score.is_none_or(|b| score > b) {
                progress.best_score = Some(score);
                progress.best_epoch = state.epoch;
                progress.stale_evals = 0;
                best = state.clone();
            } else {
                progress.stale_evals += 1;
            }
            log::info!(
                "epoch {} step {} HR@{} {:.4} (best {:.4} at epoch {})",
                state.epoch,
                state.step_count,
                cfg.early_stop_k,
                score,
                progress.best_score.unwrap_or(0.0),
                progress.best_epoch
            );
            let record = EvalRecord {
                epoch: state.epoch,
                step: state.step_count,
                metrics,
            };
            on_eval(&Snapshot {
                state: &state,
                best: &best,
                progress: &progress,
                eval: &record,
            })?;
            evals.push(record);
            stopped_early = progress.exhausted(cfg.patience);
        }
    }
    if progress.evaluations == 0 {
        best = state.clone();
    }
    Ok(TrainOutcome {
        best,
        last: state,
        log,
        evals,
        progress,
        stopped_early,
    })
}
