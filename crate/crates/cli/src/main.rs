//! `lilt` command-line driver.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lilt::checkpoint::{read_header, Checkpoint, RngState};
use lilt::config::{geometry_diff, RunConfig};
use lilt::document::{load_corpus_dir, save_corpus_dir, Document};
use lilt::metrics::MetricsReport;
use lilt::model::{Model, Task};
use lilt::optim::{AdamW, SlowRatio};
use lilt::synthetic::{generate, GenConfig};
use lilt::text::{build_sequence, EncodedDocument, Vocabulary};
use lilt::train::{evaluate, optimizer_for, trace_csv, train, StepRecord};
use lilt::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lilt", version, about = "Dual-stream text/layout transformer for form understanding")]
struct Cli {
    /// Flat JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic form corpus (one JSON file per document plus a manifest).
    GenCorpus(GenArgs),
    /// Self-supervised pre-training; writes a checkpoint and a loss trace.
    Pretrain(Overrides),
    /// Fine-tune for entity recognition or relation extraction.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint and print metrics JSON.
    Eval(EvalArgs),
    /// Print a checkpoint header and per-tensor norms.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_docs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    header_prob: Option<f64>,
    #[arg(long)]
    max_distractors: Option<usize>,
}

/// One flag per configuration key.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_text: Option<usize>,
    #[arg(long)]
    d_layout: Option<usize>,
    #[arg(long)]
    ffn_text: Option<usize>,
    #[arg(long)]
    ffn_layout: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    num_categories: Option<usize>,
    #[arg(long)]
    type_dim: Option<usize>,
    #[arg(long)]
    rel_dim: Option<usize>,
    #[arg(long)]
    select_prob: Option<f64>,
    #[arg(long)]
    replace_frac: Option<f64>,
    #[arg(long)]
    random_frac: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    /// A positive number, or `inf` to freeze the text stream.
    #[arg(long)]
    slow_ratio: Option<SlowRatio>,
    /// Global-norm clip threshold, or `none`.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    eval_corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Pre-trained checkpoint to start from.
    #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
    checkpoint: Option<PathBuf>,
    /// Start from random weights.
    #[arg(long)]
    scratch: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Must match the checkpoint's task when given.
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    fn apply(&self, c: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = &self.$f { c.$f = v.clone(); })*
            };
        }
        set!(
            layers, heads, d_text, d_layout, ffn_text, ffn_layout, max_len, dropout, num_categories, type_dim,
            rel_dim, select_prob, replace_frac, random_frac, grid, lr, beta1, beta2, eps, weight_decay,
            warmup_frac, slow_ratio, min_count, seed, steps, batch_size, checkpoint_every
        );
        macro_rules! set_path {
            ($($f:ident),*) => {
                $(if let Some(v) = &self.$f { c.$f = Some(v.clone()); })*
            };
        }
        set_path!(corpus, eval_corpus, vocab, out);
        if let Some(clip) = &self.clip {
            c.clip = match clip.as_str() {
                "none" | "off" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| Error::Config(format!("--clip expects a number or `none`, got `{s}`")))?,
                ),
            };
        }
        Ok(())
    }
}

/// Like `RunConfig::load`, with parse errors reported as configuration errors.
fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| match e {
        Error::Parse { .. } => Error::Config(e.to_string()),
        e => e,
    })
}

fn run_config(path: Option<&Path>, overrides: &Overrides, mode: Task) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.mode = mode;
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set (config key or --{})", key.replace('_', "-"))))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `dir/model.ckpt` → `dir/model.ckpt.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn encode(docs: &[Document], vocab: &Vocabulary, n: usize) -> Result<Vec<EncodedDocument>> {
    let out: Vec<EncodedDocument> = docs.iter().map(|d| build_sequence(d, vocab, n)).collect::<Result<_>>()?;
    let dropped: usize = out.iter().map(|d| d.dropped_entities).sum();
    if dropped > 0 {
        log::warn!("{dropped} entities fall outside the {n}-position window and are ignored");
    }
    Ok(out)
}

fn vocab_of(ck: &Checkpoint) -> Result<Vocabulary> {
    let text = ck
        .meta
        .get("vocab")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))?;
    let vocab = Vocabulary::from_text(text)?;
    if vocab.hash() != ck.vocab_hash {
        return Err(Error::Checkpoint("vocabulary does not match the recorded hash".into()));
    }
    Ok(vocab)
}

fn vocab_for(cfg: &RunConfig, docs: &[Document]) -> Result<Vocabulary> {
    match &cfg.vocab {
        Some(p) if p.exists() => Vocabulary::load(p),
        other => {
            let v = Vocabulary::build(docs, cfg.min_count)?;
            if let Some(p) = other {
                v.save(p)?;
            }
            Ok(v)
        }
    }
}

/// Trains `model` and writes the checkpoint, the trace and (on a numeric failure)
/// the last good state.
fn fit(mut model: Model, vocab: &Vocabulary, corpus: &[EncodedDocument], cfg: &RunConfig) -> Result<()> {
    let out = require(&cfg.out, "out")?.clone();
    let tc = cfg.train();
    let task = model.config.task;
    let mut opt = optimizer_for(&model, &tc);
    let meta = json!({ "vocab": vocab.to_text(), "run_config": cfg });
    let checkpoint = |model: &Model, opt: Option<&AdamW>, step: usize| {
        let mut ck = Checkpoint::new(model.clone(), vocab.hash());
        ck.optimizer = opt.cloned();
        ck.step = step as u64;
        ck.rng = RngState {
            seed: cfg.seed,
            step: step as u64,
        };
        ck.meta = meta.clone();
        ck
    };

    let mut trace: Vec<StepRecord> = Vec::new();
    let every = cfg.checkpoint_every;
    let result = train(&mut model, &mut opt, corpus, &tc, |rec, m| {
        trace.push(*rec);
        if rec.step % 50 == 0 || rec.step == tc.steps {
            log::info!("step {}/{} lr {:.3e} loss {:.5}", rec.step, tc.steps, rec.lr, rec.total);
        }
        if every > 0 && rec.step % every == 0 && rec.step < tc.steps {
            checkpoint(m, None, rec.step).save(&sibling(&out, &format!("step{}", rec.step)))?;
        }
        Ok(())
    });
    write(&sibling(&out, "trace.csv"), &trace_csv(&trace, task))?;
    match result {
        Ok(_) => {
            checkpoint(&model, Some(&opt), trace.len()).save(&out)?;
            log::info!("wrote {}", out.display());
            Ok(())
        }
        Err(e) if e.exit_code() == 4 => {
            let path = sibling(&out, "last-good");
            checkpoint(&model, Some(&opt), trace.len()).save(&path)?;
            log::error!("last good state written to {}", path.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// Prints to stdout, tolerating a closed pipe.
fn print_out(text: &str) {
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn cmd_gen_corpus(a: &GenArgs) -> Result<()> {
    let d = GenConfig::default();
    let cfg = GenConfig {
        seed: a.seed,
        n_docs: a.n_docs,
        rows: a.rows.unwrap_or(d.rows),
        cols: a.cols.unwrap_or(d.cols),
        header_prob: a.header_prob.unwrap_or(d.header_prob),
        max_distractors: a.max_distractors.unwrap_or(d.max_distractors),
        ..d
    };
    let docs = generate(&cfg)?;
    save_corpus_dir(&a.out, &docs, Some(serde_json::to_value(&cfg).expect("plain struct")))?;
    log::info!("wrote {} documents to {}", docs.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(config: Option<&Path>, o: &Overrides) -> Result<()> {
    let cfg = run_config(config, o, Task::Pretrain)?;
    let docs = load_corpus_dir(require(&cfg.corpus, "corpus")?)?;
    let vocab = vocab_for(&cfg, &docs)?;
    let corpus = encode(&docs, &vocab, cfg.max_len)?;
    let model = Model::new(cfg.model(vocab.len()), cfg.seed)?;
    fit(model, &vocab, &corpus, &cfg)
}

fn cmd_finetune(config: Option<&Path>, a: &FinetuneArgs) -> Result<()> {
    if a.task == Task::Pretrain {
        return Err(Error::Config("finetune expects --task ser or --task re".into()));
    }
    let cfg = run_config(config, &a.overrides, a.task)?;
    let docs = load_corpus_dir(require(&cfg.corpus, "corpus")?)?;
    let (model, vocab) = match &a.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let diff = geometry_diff(&cfg.encoder(), &ck.model.config.encoder);
            if !diff.is_empty() {
                return Err(Error::Config(format!(
                    "geometry of {} differs from the run configuration (config != checkpoint):\n  {}",
                    path.display(),
                    diff.join("\n  ")
                )));
            }
            let vocab = vocab_of(&ck)?;
            let mut model = Model::new(cfg.model(vocab.len()), cfg.seed)?;
            let n = model.load_encoder_from(&ck.model)?;
            log::info!("initialized {n} encoder tensors from {}", path.display());
            (model, vocab)
        }
        None => {
            let vocab = vocab_for(&cfg, &docs)?;
            (Model::new(cfg.model(vocab.len()), cfg.seed)?, vocab)
        }
    };
    let corpus = encode(&docs, &vocab, cfg.max_len)?;
    fit(model, &vocab, &corpus, &cfg)
}

fn cmd_eval(config: Option<&Path>, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let task = ck.model.config.task;
    if task == Task::Pretrain {
        return Err(Error::Config("eval needs a fine-tuned (ser or re) checkpoint".into()));
    }
    if let Some(t) = a.task.filter(|&t| t != task) {
        return Err(Error::Config(format!("--task {t:?} but the checkpoint was trained for {task:?}")));
    }
    let corpus_dir = match (&a.corpus, config) {
        (Some(c), _) => c.clone(),
        (None, Some(p)) => {
            let cfg = load_config(p)?;
            cfg.eval_corpus
                .or(cfg.corpus)
                .ok_or_else(|| Error::Config("no corpus given (--corpus or eval_corpus)".into()))?
        }
        (None, None) => return Err(Error::Config("no corpus given (--corpus or eval_corpus)".into())),
    };
    let vocab = vocab_of(&ck)?;
    let docs = load_corpus_dir(&corpus_dir)?;
    let corpus = encode(&docs, &vocab, ck.model.config.encoder.max_len)?;
    let prf = evaluate(&ck.model, &corpus)?;
    let name = if task == Task::Ser { "ser" } else { "re" };
    let report = MetricsReport::new(name, prf, corpus.len()).to_json();
    print_out(&report);
    if let Some(out) = &a.out {
        write(out, &format!("{report}\n"))?;
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let header = read_header(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let tensors: Vec<_> = ck
        .model
        .store
        .iter()
        .map(|(_, name, m)| {
            json!({
                "name": name,
                "shape": [m.nrows(), m.ncols()],
                "l2_norm": m.iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        })
        .collect();
    let mut meta = header.meta.clone();
    if let Some(obj) = meta.as_object_mut() {
        if obj.remove("vocab").is_some() {
            obj.insert("vocab_size".into(), json!(ck.model.config.vocab_size));
        }
    }
    let out = json!({
        "config": header.config,
        "step": header.step,
        "vocab_hash": header.vocab_hash,
        "rng": header.rng,
        "optimizer": header.optimizer,
        "num_parameters": ck.model.store.num_scalars(),
        "meta": meta,
        "tensors": tensors,
    });
    print_out(&serde_json::to_string_pretty(&out).expect("json value"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = cli.config.as_deref();
    let result = match &cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Pretrain(o) => cmd_pretrain(config, o),
        Command::Finetune(a) => cmd_finetune(config, a),
        Command::Eval(a) => cmd_eval(config, a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
