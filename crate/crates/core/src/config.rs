//! Run configuration: one flat namespace of dotted keys shared by config
//! files and command-line flags. Precedence is flags > file > defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LoadOptions, MIN_INTERACTIONS};
use crate::error::{Error, Result};
use crate::svq::CodebookInit;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub max_len: usize,
    pub min_interactions: usize,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            max_len: 50,
            min_interactions: MIN_INTERACTIONS,
            data: None,
            out_dir: None,
            checkpoint: None,
        }
    }
}

pub struct KeyInfo {
    pub key: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($k:literal => $h:literal),* $(,)?) => {
        pub const KEYS: &[KeyInfo] = &[$(KeyInfo { key: $k, help: $h }),*];
    };
}

keys! {
    "seed" => "global RNG seed",
    "data.path" => "interaction TSV (user, item, timestamp)",
    "data.max_len" => "padded history length L-1",
    "data.min_interactions" => "users with fewer interactions are dropped",
    "paths.out_dir" => "output directory (falls back to DIQDIFF_OUT_DIR)",
    "paths.checkpoint" => "checkpoint to read",
    "diffusion.T" => "diffusion steps",
    "diffusion.beta_start" => "first beta of the linear ramp",
    "diffusion.beta_end" => "last beta of the linear ramp",
    "diffusion.beta_cap" => "upper clamp on beta",
    "model.dim" => "embedding width D",
    "model.heads" => "attention heads",
    "model.blocks" => "attention blocks",
    "model.dropout_attn" => "dropout on attention and feed-forward outputs",
    "model.dropout_emb" => "dropout on item embeddings",
    "model.init_std" => "std of normal parameter init",
    "svq.M" => "codebook size",
    "svq.lambda_q" => "quantized guidance strength",
    "svq.tau" => "Gumbel-Softmax temperature",
    "svq.ema_decay" => "codebook blend weight on the old code (0 = replace)",
    "svq.init" => "codebook init: random | sample",
    "loss.lambda_c" => "contrastive term strength",
    "train.lr" => "Adam learning rate",
    "train.batch_size" => "sequences per batch",
    "train.max_epochs" => "epoch budget",
    "train.eval_every" => "epochs between evaluations",
    "train.patience" => "stale evaluations before early stop",
    "train.early_stop_k" => "early stopping tracks HR at this K",
    "train.freeze_embeddings" => "keep item embeddings at their init",
    "eval.ks" => "comma-separated cutoffs",
    "eval.seeds" => "generations averaged per user",
    "eval.exclude_seen" => "drop history items from rankings",
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_ks(key: &str, v: &str) -> Result<Vec<usize>> {
    let v = v.trim().trim_start_matches('[').trim_end_matches(']');
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn path_string(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Result<String> {
        let t = &self.train;
        Ok(match key {
            "seed" => t.seed.to_string(),
            "data.path" => path_string(&self.data),
            "data.max_len" => self.max_len.to_string(),
            "data.min_interactions" => self.min_interactions.to_string(),
            "paths.out_dir" => path_string(&self.out_dir),
            "paths.checkpoint" => path_string(&self.checkpoint),
            "diffusion.T" => t.schedule.steps.to_string(),
            "diffusion.beta_start" => t.schedule.beta_start.to_string(),
            "diffusion.beta_end" => t.schedule.beta_end.to_string(),
            "diffusion.beta_cap" => t.schedule.beta_cap.to_string(),
            "model.dim" => t.dim.to_string(),
            "model.heads" => t.heads.to_string(),
            "model.blocks" => t.blocks.to_string(),
            "model.dropout_attn" => t.dropout_attn.to_string(),
            "model.dropout_emb" => t.dropout_emb.to_string(),
            "model.init_std" => t.init_std.to_string(),
            "svq.M" => t.codes.to_string(),
            "svq.lambda_q" => t.lambda_q.to_string(),
            "svq.tau" => t.tau.to_string(),
            "svq.ema_decay" => t.ema_decay.to_string(),
            "svq.init" => t.codebook_init.to_string(),
            "loss.lambda_c" => t.lambda_c.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.eval_every" => t.eval_every.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.early_stop_k" => t.early_stop_k.to_string(),
            "train.freeze_embeddings" => t.freeze_embeddings.to_string(),
            "eval.ks" => t.eval_ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "eval.seeds" => t.eval_seeds.to_string(),
            "eval.exclude_seen" => t.exclude_seen.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = parse(key, v)?,
            "data.path" => self.data = opt_path(v),
            "data.max_len" => self.max_len = parse(key, v)?,
            "data.min_interactions" => self.min_interactions = parse(key, v)?,
            "paths.out_dir" => self.out_dir = opt_path(v),
            "paths.checkpoint" => self.checkpoint = opt_path(v),
            "diffusion.T" => t.schedule.steps = parse(key, v)?,
            "diffusion.beta_start" => t.schedule.beta_start = parse(key, v)?,
            "diffusion.beta_end" => t.schedule.beta_end = parse(key, v)?,
            "diffusion.beta_cap" => t.schedule.beta_cap = parse(key, v)?,
            "model.dim" => t.dim = parse(key, v)?,
            "model.heads" => t.heads = parse(key, v)?,
            "model.blocks" => t.blocks = parse(key, v)?,
            "model.dropout_attn" => t.dropout_attn = parse(key, v)?,
            "model.dropout_emb" => t.dropout_emb = parse(key, v)?,
            "model.init_std" => t.init_std = parse(key, v)?,
            "svq.M" => t.codes = parse(key, v)?,
            "svq.lambda_q" => t.lambda_q = parse(key, v)?,
            "svq.tau" => t.tau = parse(key, v)?,
            "svq.ema_decay" => t.ema_decay = parse(key, v)?,
            "svq.init" => t.codebook_init = parse::<CodebookInit>(key, v)?,
            "loss.lambda_c" => t.lambda_c = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.early_stop_k" => t.early_stop_k = parse(key, v)?,
            "train.freeze_embeddings" => t.freeze_embeddings = parse(key, v)?,
            "eval.ks" => t.eval_ks = parse_ks(key, v)?,
            "eval.seeds" => t.eval_seeds = parse(key, v)?,
            "eval.exclude_seen" => t.exclude_seen = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every key of a TOML document. Tables and dotted keys are
    /// flattened, so `[svq]\nM = 4` and `svq.M = 4` are the same setting.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Flat TOML listing of every key; parses back to the same config.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let v = self.get(k.key).expect("listed key");
            let quoted = match k.key {
                "data.path" | "paths.out_dir" | "paths.checkpoint" | "svq.init" | "eval.ks" => format!("{v:?}"),
                _ => v,
            };
            let _ = writeln!(out, "\"{}\" = {quoted}", k.key);
        }
        out
    }

    /// `key  default  help` lines for `--help`.
    pub fn describe_keys() -> String {
        let d = Self::default();
        let mut out = String::new();
        for k in KEYS {
            let v = d.get(k.key).expect("listed key");
            let v = if v.is_empty() { "-".to_string() } else { v };
            let _ = writeln!(out, "  {:<24} {:<10} {}", k.key, v, k.help);
        }
        out
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            max_len: self.max_len,
            min_interactions: self.min_interactions,
        }
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) -> Result<()> {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        toml::Value::String(s) => out.push((prefix.to_string(), s.clone())),
        toml::Value::Array(a) => {
            let parts: Vec<String> = a
                .iter()
                .map(|x| match x {
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    other => Err(Error::Config(format!("{prefix}: unsupported array element {other}"))),
                })
                .collect::<Result<_>>()?;
            out.push((prefix.to_string(), parts.join(",")));
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips_through_get_and_set() {
        let d = RunConfig::default();
        for k in KEYS {
            let mut c = RunConfig::default();
            c.set(k.key, &d.get(k.key).unwrap()).unwrap();
            assert_eq!(c, d, "{}", k.key);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("svq.m", "4").is_err());
        assert!(c.apply_toml("[model]\nwidth = 3\n").is_err());
    }

    #[test]
    fn tables_and_dotted_keys_agree() {
        let mut a = RunConfig::default();
        a.apply_toml("[svq]\nM = 4\nlambda_q = 0.6\n[eval]\nks = [1, 5]\n").unwrap();
        let mut b = RunConfig::default();
        b.apply_toml("svq.M = 4\n\"svq.lambda_q\" = 0.6\n\"eval.ks\" = \"1,5\"\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.codes, 4);
        assert_eq!(a.train.eval_ks, vec![1, 5]);
    }

    #[test]
    fn to_toml_parses_back() {
        let mut c = RunConfig::default();
        c.set("data.path", "/tmp/x.tsv").unwrap();
        c.set("svq.init", "sample").unwrap();
        c.set("diffusion.beta_start", "0.0003").unwrap();
        let mut back = RunConfig::default();
        back.apply_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_listed() {
        let text = RunConfig::describe_keys();
        assert_eq!(text.lines().count(), KEYS.len());
        assert!(text.contains("diffusion.T"));
        assert!(text.contains("32"));
    }

    #[test]
    fn bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("model.dim", "wide").is_err());
        assert!(c.set("svq.init", "kmeans").is_err());
    }
}
