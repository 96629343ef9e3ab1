//! Parameter containers and their canonical ordering.
//!
//! Every trainable tensor has a fixed slot: the item embedding table first,
//! then the code selector, then the denoiser. Gradients, optimizer moments
//! and checkpoints all use the same order.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::svq::Codebook;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width D.
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Padded history length (L−1).
    pub max_len: usize,
    pub item_count: usize,
    /// Codebook size M.
    pub codes: usize,
    pub dropout_attn: f64,
    pub dropout_emb: f64,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("model.dim {} must be a positive multiple of model.heads {}", self.dim, self.heads));
        }
        if self.max_len == 0 || self.item_count == 0 {
            return bad("max_len and item_count must be positive".into());
        }
        if self.codes < 2 {
            return bad(format!("svq.M must be at least 2, got {}", self.codes));
        }
        for (name, p) in [("dropout_attn", self.dropout_attn), ("dropout_emb", self.dropout_emb)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("model.{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }

    pub fn selector_hidden(&self) -> usize {
        4 * self.codes
    }
}

/// `(|I|+1) × D`; row 0 embeds the padding token.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbeddingTable(pub Matrix);

impl ItemEmbeddingTable {
    pub fn item_count(&self) -> usize {
        self.0.rows() - 1
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// Two-layer feed-forward map from a flattened sequence embedding to M
/// logits, with tanh between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeSelector {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Matrix,
    pub ln1_b: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_g: Matrix,
    pub ln2_b: Matrix,
    pub ff1_w: Matrix,
    pub ff1_b: Matrix,
    pub ff2_w: Matrix,
    pub ff2_b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub pos: Matrix,
    pub step_w: Matrix,
    pub step_b: Matrix,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Matrix,
    pub lnf_b: Matrix,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub embeddings: ItemEmbeddingTable,
    pub selector: CodeSelector,
    pub denoiser: DenoiserParams,
    pub codebook: Codebook,
    pub optimizer: crate::optim::AdamState,
    /// Completed optimizer steps.
    pub step_count: u64,
    /// Completed training epochs.
    pub epoch: u64,
}

fn ones(n: usize) -> Matrix {
    Matrix::filled(1, n, 1.0)
}

fn zeros(n: usize) -> Matrix {
    Matrix::zeros(1, n)
}

impl BlockParams {
    fn init(d: usize, std: f64, rng: &mut Rng) -> Self {
        let ff = 4 * d;
        Self {
            ln1_g: ones(d),
            ln1_b: zeros(d),
            wq: Matrix::randn(d, d, std, rng),
            bq: zeros(d),
            wk: Matrix::randn(d, d, std, rng),
            bk: zeros(d),
            wv: Matrix::randn(d, d, std, rng),
            bv: zeros(d),
            wo: Matrix::randn(d, d, std, rng),
            bo: zeros(d),
            ln2_g: ones(d),
            ln2_b: zeros(d),
            ff1_w: Matrix::randn(d, ff, std, rng),
            ff1_b: zeros(ff),
            ff2_w: Matrix::randn(ff, d, std, rng),
            ff2_b: zeros(d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
        ]
    }
}

impl CodeSelector {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let input = cfg.max_len * cfg.dim;
        let hidden = cfg.selector_hidden();
        Self {
            w1: Matrix::randn(input, hidden, cfg.init_std, rng),
            b1: zeros(hidden),
            w2: Matrix::randn(hidden, cfg.codes, cfg.init_std, rng),
            b2: zeros(cfg.codes),
        }
    }

    pub fn zeroed(cfg: &ModelConfig) -> Self {
        let input = cfg.max_len * cfg.dim;
        let hidden = cfg.selector_hidden();
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: zeros(hidden),
            w2: Matrix::zeros(hidden, cfg.codes),
            b2: zeros(cfg.codes),
        }
    }

    pub fn codes(&self) -> usize {
        self.w2.cols()
    }
}

impl DenoiserParams {
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.dim;
        let std = cfg.init_std;
        Self {
            pos: Matrix::randn(cfg.max_len, d, std, rng),
            step_w: Matrix::randn(d, d, std, rng),
            step_b: zeros(d),
            blocks: (0..cfg.blocks).map(|_| BlockParams::init(d, std, rng)).collect(),
            lnf_g: ones(d),
            lnf_b: zeros(d),
            out_w: Matrix::randn(d, d, std, rng),
            out_b: zeros(d),
        }
    }

    /// Correctly shaped parameters with every weight matrix zero.
    pub fn zeroed(cfg: &ModelConfig) -> Self {
        let cfg = ModelConfig { init_std: 0.0, ..*cfg };
        Self::init(&cfg, &mut crate::rng::seeded(0, &[]))
    }
}

/// Tape handles for every parameter, created once per forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub selector: [Var; 4],
    pub pos: Var,
    pub step_w: Var,
    pub step_b: Var,
    pub blocks: Vec<[Var; 16]>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

/// Slot of the item embedding table.
pub const EMBEDDING_SLOT: usize = 0;

impl ModelState {
    /// Canonical `(name, tensor)` listing of trainable parameters.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("embeddings".into(), &self.embeddings.0),
            ("selector.w1".into(), &self.selector.w1),
            ("selector.b1".into(), &self.selector.b1),
            ("selector.w2".into(), &self.selector.w2),
            ("selector.b2".into(), &self.selector.b2),
            ("denoiser.pos".into(), &self.denoiser.pos),
            ("denoiser.step_w".into(), &self.denoiser.step_w),
            ("denoiser.step_b".into(), &self.denoiser.step_b),
        ];
        for (i, b) in self.denoiser.blocks.iter().enumerate() {
            for (name, m) in b.tensors() {
                out.push((format!("denoiser.block{i}.{name}"), m));
            }
        }
        out.push(("denoiser.lnf_g".into(), &self.denoiser.lnf_g));
        out.push(("denoiser.lnf_b".into(), &self.denoiser.lnf_b));
        out.push(("denoiser.out_w".into(), &self.denoiser.out_w));
        out.push(("denoiser.out_b".into(), &self.denoiser.out_b));
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.named_params().into_iter().map(|(_, m)| m).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![
            &mut self.embeddings.0,
            &mut self.selector.w1,
            &mut self.selector.b1,
            &mut self.selector.w2,
            &mut self.selector.b2,
            &mut self.denoiser.pos,
            &mut self.denoiser.step_w,
            &mut self.denoiser.step_b,
        ];
        for b in &mut self.denoiser.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.denoiser.lnf_g);
        out.push(&mut self.denoiser.lnf_b);
        out.push(&mut self.denoiser.out_w);
        out.push(&mut self.denoiser.out_b);
        out
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.params()
            .into_iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }

    /// Registers every non-embedding parameter on the tape.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>) -> ParamVars {
        let mut slot = EMBEDDING_SLOT + 1;
        let mut next = |tape: &mut Tape<'a>, m: &'a Matrix| {
            let v = tape.param(slot, m);
            slot += 1;
            v
        };
        let s = &self.selector;
        let selector = [
            next(tape, &s.w1),
            next(tape, &s.b1),
            next(tape, &s.w2),
            next(tape, &s.b2),
        ];
        let d = &self.denoiser;
        let pos = next(tape, &d.pos);
        let step_w = next(tape, &d.step_w);
        let step_b = next(tape, &d.step_b);
        let blocks = d
            .blocks
            .iter()
            .map(|b| b.tensors().map(|(_, m)| next(tape, m)))
            .collect();
        ParamVars {
            selector,
            pos,
            step_w,
            step_b,
            blocks,
            lnf_g: next(tape, &d.lnf_g),
            lnf_b: next(tape, &d.lnf_b),
            out_w: next(tape, &d.out_w),
            out_b: next(tape, &d.out_b),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite()) && self.codebook.codes.iter().all(Matrix::is_finite)
    }

    pub fn fresh(config: ModelConfig, codebook: Codebook, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if codebook.len() != config.codes {
            return Err(Error::Dimension(format!(
                "codebook has {} codes, config expects {}",
                codebook.len(),
                config.codes
            )));
        }
        let embeddings = ItemEmbeddingTable(Matrix::randn(
            config.item_count + 1,
            config.dim,
            config.init_std,
            rng,
        ));
        let selector = CodeSelector::init(&config, rng);
        let denoiser = DenoiserParams::init(&config, rng);
        let mut state = Self {
            config,
            embeddings,
            selector,
            denoiser,
            codebook,
            optimizer: crate::optim::AdamState::default(),
            step_count: 0,
            epoch: 0,
        };
        state.optimizer = crate::optim::AdamState::zeros_like(&state.params());
        Ok(state)
    }
}
