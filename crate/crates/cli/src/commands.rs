use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use diqdiff::checkpoint::{load_checkpoint_with, save_checkpoint_with};
use diqdiff::config::RunConfig;
use diqdiff::data::{
    build_corpus, inject_sparsity, item_vocabulary, leave_one_out_split, parse_interactions, synthesize_labeled, Corpus,
    ItemId, SyntheticSpec,
};
use diqdiff::eval::{codebook_diagnostics, evaluate, export_embeddings as write_embeddings, user_seed, variance_oracle, ScalarDist};
use diqdiff::inference::{generate_next_item, rank_items};
use diqdiff::training::{train_with, Resume, Snapshot, TrainProgress};
use diqdiff::{Error, ModelState};
use serde_json::{json, Value};

use crate::{usage, CliError, Common, SynthArgs, VarianceArgs};

type Res<T = ()> = Result<T, CliError>;

fn out_dir(cfg: &RunConfig) -> Res<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out-dir or set DIQDIFF_OUT_DIR".into()))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, v: &Value) -> Res {
    let mut text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

struct Data {
    path: PathBuf,
    raw: Corpus,
    split: Corpus,
    vocab: Vec<ItemId>,
}

fn load_data(cfg: &RunConfig) -> Res<Data> {
    let path = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("no corpus: pass --data".into()))?;
    if !path.exists() {
        return Err(CliError::Missing(format!("corpus {}", path.display())));
    }
    let rows = parse_interactions(&path)?;
    let raw = build_corpus(&rows, cfg.load_options())?;
    let split = leave_one_out_split(&raw)?;
    let vocab = item_vocabulary(&rows, cfg.load_options());
    Ok(Data { path, raw, split, vocab })
}

/// Config stored inside checkpoints, without machine-specific paths.
fn portable(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.data = None;
    c.out_dir = None;
    c.checkpoint = None;
    c.to_toml()
}

fn extra(cfg: &RunConfig, progress: &TrainProgress) -> Value {
    json!({ "config": portable(cfg), "progress": progress })
}

/// Resolves flags, finds and loads the checkpoint, then re-resolves with the
/// checkpoint's stored config as the base layer.
fn with_checkpoint(common: &Common) -> Res<(RunConfig, ModelState)> {
    let first = common.resolve(RunConfig::default())?;
    let path = match (&first.checkpoint, &first.out_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("ckpt_best.bin"),
        (None, None) => return Err(CliError::Usage("no checkpoint: pass --checkpoint or --out-dir".into())),
    };
    if !path.exists() {
        return Err(CliError::Missing(format!("checkpoint {}", path.display())));
    }
    let (state, extra) = load_checkpoint_with(&path)?;
    let mut base = RunConfig::default();
    if let Some(text) = extra.get("config").and_then(Value::as_str) {
        base.apply_toml(text)?;
    }
    let mut cfg = common.resolve(base)?;
    cfg.checkpoint = Some(path);
    Ok((cfg, state))
}

fn check_matches(state: &ModelState, corpus: &Corpus) -> Res {
    if state.config.item_count != corpus.item_count {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint has {} items, corpus has {}",
            state.config.item_count, corpus.item_count
        ))
        .into());
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Res {
    if a.min_len > a.max_len {
        return Err(CliError::Usage(format!("--min-len {} exceeds --max-len {}", a.min_len, a.max_len)));
    }
    if !(0.0..1.0).contains(&a.sparsity) {
        return Err(CliError::Usage("--sparsity must lie in [0, 1)".into()));
    }
    let out = match (&a.out, &a.out_dir) {
        (Some(p), _) => p.clone(),
        (None, dir) => {
            let mut cfg = RunConfig { out_dir: dir.clone(), ..RunConfig::default() };
            if cfg.out_dir.is_none() {
                cfg.out_dir = std::env::var_os("DIQDIFF_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from);
            }
            out_dir(&cfg)?.join("corpus.tsv")
        }
    };
    let spec = SyntheticSpec {
        users: a.users,
        items: a.items,
        clusters: a.clusters,
        seq_len_range: (a.min_len, a.max_len),
        noise_rate: a.noise,
        sparsity_rate: a.sparsity,
        seed: a.seed,
        max_len: a.max_len,
    };
    let labeled = synthesize_labeled(&spec).map_err(usage)?;
    let corpus = if a.sparsity > 0.0 {
        inject_sparsity(&labeled.corpus, a.sparsity, a.seed)
    } else {
        labeled.corpus
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    corpus.write_tsv(&out)?;
    let sidecar = sidecar_path(&out);
    write_json(
        &sidecar,
        &json!({ "spec": spec, "order": ["noise", "sparsity"], "users_written": corpus.len() }),
    )?;
    log::info!("wrote {} users to {} ({})", corpus.len(), out.display(), sidecar.display());
    Ok(())
}

fn sidecar_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".spec.json");
    PathBuf::from(s)
}

pub fn train(common: &Common, resume: Option<&Path>) -> Res {
    let (cfg, resume) = match resume {
        None => (common.resolve(RunConfig::default())?, None),
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Missing(format!("checkpoint {}", p.display())));
            }
            let (state, extra) = load_checkpoint_with(p)?;
            let mut base = RunConfig::default();
            if let Some(text) = extra.get("config").and_then(Value::as_str) {
                base.apply_toml(text)?;
            }
            let progress: TrainProgress = match extra.get("progress") {
                Some(v) => serde_json::from_value(v.clone()).map_err(Error::from)?,
                None => TrainProgress::default(),
            };
            let best_path = p.with_file_name("ckpt_best.bin");
            let best = if best_path.exists() && best_path != p {
                Some(load_checkpoint_with(&best_path)?.0)
            } else {
                None
            };
            (common.resolve(base)?, Some(Resume { state, progress, best }))
        }
    };
    let dir = out_dir(&cfg)?;
    let data = load_data(&cfg)?;
    let view = data.split.training_view();
    let tc = &cfg.train;
    log::info!(
        "training on {} ({} users, {} items), seed {}",
        data.path.display(),
        view.len(),
        data.split.item_count,
        tc.seed
    );
    let appending = resume.is_some();
    let best_path = dir.join("ckpt_best.bin");
    let last_path = dir.join("ckpt_last.bin");
    let mut hook = |snap: &Snapshot<'_>| -> diqdiff::Result<()> {
        let e = extra(&cfg, snap.progress);
        save_checkpoint_with(snap.state, &e, &last_path)?;
        save_checkpoint_with(snap.best, &e, &best_path)?;
        Ok(())
    };
    let outcome = train_with(&view, &data.split, tc, resume, &mut hook)?;
    let e = extra(&cfg, &outcome.progress);
    save_checkpoint_with(&outcome.last, &e, &last_path)?;
    save_checkpoint_with(&outcome.best, &e, &best_path)?;

    let log_path = dir.join("train_log.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(&log_path)?;
    let mut w = BufWriter::new(file);
    for rec in &outcome.log {
        writeln!(w, "{}", serde_json::to_string(rec).map_err(Error::from)?)?;
    }
    w.flush()?;

    let sched = tc.schedule.build()?;
    let report = evaluate(&outcome.best, &data.split, &sched, &tc.eval_options())?;
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "best_epoch": outcome.progress.best_epoch,
            "epochs": outcome.last.epoch,
            "steps": outcome.last.step_count,
            "stopped_early": outcome.stopped_early,
            "test": report,
            "evals": outcome.evals,
        }),
    )?;
    log::info!("done: {}", serde_json::to_string(&report.hr).map_err(Error::from)?);
    Ok(())
}

pub fn eval(common: &Common) -> Res {
    let (cfg, state) = with_checkpoint(common)?;
    let data = load_data(&cfg)?;
    check_matches(&state, &data.split)?;
    let sched = cfg.train.schedule.build()?;
    let report = evaluate(&state, &data.split, &sched, &cfg.train.eval_options())?;
    let v = serde_json::to_value(&report).map_err(Error::from)?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("eval.json"), &v)?;
    }
    println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
    Ok(())
}

/// Ranks the item after each user's full history; output uses the corpus's
/// original item ids.
pub fn predict(common: &Common, user: Option<u64>, k: usize) -> Res {
    let (cfg, state) = with_checkpoint(common)?;
    let data = load_data(&cfg)?;
    check_matches(&state, &data.raw)?;
    let sched = cfg.train.schedule.build()?;
    let seqs: Vec<_> = match user {
        Some(u) => {
            let s = data
                .raw
                .sequences
                .iter()
                .find(|s| s.user == u)
                .ok_or_else(|| CliError::Usage(format!("user {u} not in corpus")))?;
            vec![s]
        }
        None => data.raw.sequences.iter().collect(),
    };
    let mut lines = String::new();
    for s in seqs {
        let tr = generate_next_item(&state, &s.history, &sched, cfg.train.generation(), user_seed(cfg.train.seed, s.user, 0), false)?;
        let exclude: HashSet<ItemId> = if cfg.train.exclude_seen {
            s.history.iter().copied().collect()
        } else {
            HashSet::new()
        };
        let ranked = rank_items(&tr.x0, &state.embeddings, k, &exclude).map_err(usage)?;
        for (rank, (item, score)) in ranked.iter().enumerate() {
            let original = data.vocab[*item as usize - 1];
            lines.push_str(&format!("{}\t{}\t{}\t{:?}\n", s.user, rank + 1, original, score));
        }
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("predictions.tsv"), &lines)?;
    }
    print!("{lines}");
    Ok(())
}

fn parse_dist(s: &str) -> Res<ScalarDist> {
    let bad = || CliError::Usage(format!("--dist expects NAME:P1,P2, got {s:?}"));
    let (name, params) = s.split_once(':').ok_or_else(bad)?;
    let p: Vec<f64> = params
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [a, b] = p[..] else { return Err(bad()) };
    Ok(match name {
        "lognormal" => ScalarDist::LogNormal { mu: a, sigma: b },
        "normal" => ScalarDist::Normal { mean: a, std: b },
        "uniform" => ScalarDist::Uniform { low: a, high: b },
        _ => return Err(bad()),
    })
}

pub fn variance_check(a: &VarianceArgs) -> Res {
    let dist = parse_dist(&a.dist)?;
    let probe = variance_oracle(a.lambda_q, a.group_size, dist, a.trials, a.samples, a.seed)?;
    let v = json!({
        "dist": dist,
        "probe": probe,
        "fraction_reduced": probe.fraction_reduced(),
        "threshold_met": probe.threshold_met(),
    });
    let dir = a
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("DIQDIFF_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from));
    if let Some(dir) = dir {
        fs::create_dir_all(&dir)?;
        write_json(&dir.join("variance.json"), &v)?;
    }
    println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
    Ok(())
}

/// Home clusters from the synth sidecar, aligned with `corpus` by user id.
fn sidecar_labels(data: &Data) -> Res<Option<Vec<usize>>> {
    let side = sidecar_path(&data.path);
    if !side.exists() {
        return Ok(None);
    }
    let v: Value = serde_json::from_str(&fs::read_to_string(&side)?).map_err(Error::from)?;
    let spec: SyntheticSpec = serde_json::from_value(v["spec"].clone()).map_err(Error::from)?;
    let labeled = synthesize_labeled(&spec)?;
    let by_user: HashMap<u64, usize> = labeled
        .corpus
        .sequences
        .iter()
        .zip(&labeled.home_cluster)
        .map(|(s, &c)| (s.user, c))
        .collect();
    Ok(data.split.sequences.iter().map(|s| by_user.get(&s.user).copied()).collect())
}

pub fn inspect_codebook(common: &Common) -> Res {
    let (cfg, state) = with_checkpoint(common)?;
    let (data, labels) = match &cfg.data {
        Some(_) => {
            let d = load_data(&cfg)?;
            check_matches(&state, &d.split)?;
            let l = sidecar_labels(&d)?;
            (Some(d), l)
        }
        None => (None, None),
    };
    let report = codebook_diagnostics(&state, data.as_ref().map(|d| &d.split), labels.as_deref(), cfg.train.seed)?;
    let v = serde_json::to_value(&report).map_err(Error::from)?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("codebook.json"), &v)?;
    }
    println!("{}", serde_json::to_string_pretty(&v).map_err(Error::from)?);
    Ok(())
}

pub fn export_embeddings(common: &Common) -> Res {
    let (cfg, state) = with_checkpoint(common)?;
    let dir = out_dir(&cfg)?;
    let data = load_data(&cfg)?;
    check_matches(&state, &data.split)?;
    let sched = cfg.train.schedule.build()?;
    let path = dir.join("embeddings.csv");
    let n = write_embeddings(&state, &data.split, &sched, cfg.train.generation(), cfg.train.seed, &path)?;
    log::info!("wrote {n} rows to {}", path.display());
    Ok(())
}
