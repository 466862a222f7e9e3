//! Command-line front end: corpus preparation, per-fold training,
//! evaluation, one-off summarization, gradient checking, and report
//! aggregation. Every output directory gets a manifest written before
//! any work starts, so a run is reproducible from the manifest alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::corpus::{self, FoldPlan, Limits, Triple, Vocabulary};
use crate::diversity::DiversityMode;
use crate::embeddings;
use crate::metrics;
use crate::model::{self, QueryMode};
use crate::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "divsum", about = "query-based summarization with diversity attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a JSONL triple corpus, build the vocabulary and fold plan.
    Prepare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tokens below this corpus frequency map to the unknown id.
        #[arg(long, default_value_t = 5)]
        min_count: usize,
    },
    /// Train one fold; writes checkpoint.bin and curves.csv.
    Train {
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long, default_value = "SD2")]
        mode: DiversityMode,
        #[arg(long, default_value = "attention")]
        query_mode: QueryMode,
        #[arg(long, default_value_t = 200)]
        hidden: usize,
        #[arg(long, default_value_t = 100)]
        embed_dim: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        patience: usize,
        #[arg(long, default_value_t = 0.0004)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional pretrained embedding table in GloVe text format.
        #[arg(long)]
        glove: Option<PathBuf>,
        /// Output directory; defaults to <work>/train-<mode>-fold<fold>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one fold's test split.
    Eval {
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
    },
    /// Decode one query/document pair and print attention traces.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        document: String,
        #[arg(long, default_value_t = 30)]
        max_len: usize,
    },
    /// Full-model finite-difference gradient check; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        dims: usize,
        #[arg(long, default_value = "SD2")]
        mode: DiversityMode,
        /// Number of random seeds to audit.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 6e-4)]
        step: f64,
    },
    /// Aggregate eval outputs into ROUGE and repetition tables.
    Report {
        #[arg(long)]
        work: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Honor DIVSUM_THREADS as a cap on worker parallelism.
fn init_threads() {
    if let Ok(v) = std::env::var("DIVSUM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

pub fn run() -> i32 {
    init_threads();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Prepare {
            data,
            out,
            folds,
            seed,
            min_count,
        } => cmd_prepare(&data, &out, folds, seed, min_count),
        Command::Train {
            work,
            fold,
            mode,
            query_mode,
            hidden,
            embed_dim,
            batch,
            epochs,
            patience,
            lr,
            seed,
            glove,
            out,
        } => {
            let config = TrainConfig {
                mode,
                query_mode,
                embed_dim,
                dec_hidden: hidden,
                query_hidden: hidden,
                doc_hidden: hidden,
                batch_size: batch,
                epochs,
                patience,
                lr,
                seed,
                ..TrainConfig::default()
            };
            cmd_train(&work, fold, &config, glove.as_deref(), out)
        }
        Command::Eval {
            work,
            fold,
            checkpoint,
            out,
            max_len,
        } => cmd_eval(&work, fold, &checkpoint, out, max_len),
        Command::Summarize {
            checkpoint,
            query,
            document,
            max_len,
        } => cmd_summarize(&checkpoint, &query, &document, max_len),
        Command::Gradcheck {
            dims,
            mode,
            seeds,
            step,
        } => cmd_gradcheck(dims, mode, seeds, step),
        Command::Report { work } => cmd_report(&work),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WorkspaceInfo {
    data: PathBuf,
    min_count: usize,
    limits: Limits,
}

fn cmd_prepare(data: &Path, out: &Path, folds: usize, seed: u64, min_count: usize) -> Result<i32> {
    let manifest = RunManifest {
        command: "prepare".into(),
        config: json!({"folds": folds, "min_count": min_count}),
        seed,
        inputs: vec![data.display().to_string()],
        outputs: vec![
            "vocab.json".into(),
            "folds.json".into(),
            "workspace.json".into(),
        ],
        created_unix: now_unix(),
    };
    manifest.write(out)?;

    let raws = corpus::load_triples(data)?;
    let vocab = corpus::build_vocab(&raws, min_count)?;
    let plan = corpus::make_folds(raws.len(), folds, seed)?;
    let (doc_mean, sum_mean, query_mean) = corpus::corpus_stats(&raws);

    fs::write(out.join("vocab.json"), serde_json::to_string(&vocab)?)?;
    fs::write(out.join("folds.json"), serde_json::to_string(&plan)?)?;
    let info = WorkspaceInfo {
        data: data.to_path_buf(),
        min_count,
        limits: Limits::default(),
    };
    fs::write(out.join("workspace.json"), serde_json::to_string_pretty(&info)?)?;

    println!("triples               {}", raws.len());
    println!("vocabulary            {}", vocab.size());
    println!("avg words / document  {doc_mean:.2}");
    println!("avg words / summary   {sum_mean:.2}");
    println!("avg words / query     {query_mean:.2}");
    println!("folds                 {folds}");
    Ok(0)
}

fn load_workspace(work: &Path) -> Result<(WorkspaceInfo, Vocabulary, FoldPlan, Vec<Triple>)> {
    let info: WorkspaceInfo = serde_json::from_str(
        &fs::read_to_string(work.join("workspace.json"))
            .with_context(|| format!("{} is not a prepared workspace", work.display()))?,
    )?;
    let mut vocab: Vocabulary =
        serde_json::from_str(&fs::read_to_string(work.join("vocab.json"))?)?;
    vocab.rebuild_index();
    let plan: FoldPlan = serde_json::from_str(&fs::read_to_string(work.join("folds.json"))?)?;
    let raws = corpus::load_triples(&info.data)?;
    let triples = raws
        .iter()
        .map(|r| corpus::encode_triple(r, &vocab, &info.limits))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((info, vocab, plan, triples))
}

fn cmd_train(
    work: &Path,
    fold: usize,
    config: &TrainConfig,
    glove: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<i32> {
    let out = out.unwrap_or_else(|| work.join(format!("train-{}-fold{}", config.mode, fold)));
    let manifest = RunManifest {
        command: "train".into(),
        config: serde_json::to_value(config)?,
        seed: config.seed,
        inputs: vec![
            work.display().to_string(),
            glove.map(|g| g.display().to_string()).unwrap_or_default(),
        ],
        outputs: vec!["checkpoint.bin".into(), "curves.csv".into()],
        created_unix: now_unix(),
    };
    manifest.write(&out)?;

    let (_, vocab, plan, triples) = load_workspace(work)?;
    let Some(split) = plan.folds.get(fold) else {
        bail!("fold {fold} out of range (plan has {})", plan.folds.len());
    };
    let pick = |ids: &[usize]| -> Vec<Triple> { ids.iter().map(|&i| triples[i].clone()).collect() };
    let train = pick(&split.train);
    let validation = pick(&split.validation);

    let pretrained = match glove {
        Some(path) => {
            let (table, coverage) =
                embeddings::load_pretrained(path, &vocab, config.embed_dim, config.seed)?;
            println!("pretrained embedding coverage {:.1}%", coverage * 100.0);
            Some(table)
        }
        None => None,
    };

    let outcome = trainer::train_fold(config, &vocab, &train, &validation, pretrained.as_ref())?;
    checkpoint::save(
        &out.join("checkpoint.bin"),
        &outcome.model,
        &vocab,
        outcome.best_val_rouge_l,
    )?;
    let mut csv = String::from("epoch,train_loss,val_rouge_l\n");
    for s in &outcome.curves {
        csv.push_str(&format!("{},{},{}\n", s.epoch, s.train_loss, s.val_rouge_l));
    }
    fs::write(out.join("curves.csv"), csv)?;
    println!(
        "fold {fold} mode {} best validation ROUGE-L {:.4} ({} epochs)",
        config.mode,
        outcome.best_val_rouge_l,
        outcome.curves.len()
    );
    Ok(0)
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalSummary {
    mode: String,
    fold: usize,
    instances: usize,
    rouge1: f64,
    rouge2: f64,
    rouge_l: f64,
    repetition_count: usize,
}

fn cmd_eval(
    work: &Path,
    fold: usize,
    ckpt: &Path,
    out: Option<PathBuf>,
    max_len: usize,
) -> Result<i32> {
    let (model, vocab, _) = checkpoint::load(ckpt)?;
    let out = out.unwrap_or_else(|| work.join(format!("eval-{}-fold{}", model.config.mode, fold)));
    let manifest = RunManifest {
        command: "eval".into(),
        config: json!({"fold": fold, "max_len": max_len, "mode": model.config.mode.to_string()}),
        seed: 0,
        inputs: vec![work.display().to_string(), ckpt.display().to_string()],
        outputs: vec!["metrics.json".into(), "instances.csv".into()],
        created_unix: now_unix(),
    };
    manifest.write(&out)?;

    // evaluation must encode with the checkpoint's own vocabulary, not
    // whatever the workspace was prepared with
    let info: WorkspaceInfo =
        serde_json::from_str(&fs::read_to_string(work.join("workspace.json"))?)?;
    let plan: FoldPlan = serde_json::from_str(&fs::read_to_string(work.join("folds.json"))?)?;
    let raws = corpus::load_triples(&info.data)?;
    let triples: Vec<Triple> = raws
        .iter()
        .map(|r| corpus::encode_triple(r, &vocab, &info.limits))
        .collect::<Result<Vec<_>, _>>()?;
    let Some(split) = plan.folds.get(fold) else {
        bail!("fold {fold} out of range (plan has {})", plan.folds.len());
    };
    let test: Vec<(usize, &Triple)> = split.test.iter().map(|&i| (i, &triples[i])).collect();
    let report = metrics::evaluate(&model, &vocab, &test, max_len)?;
    let mut csv = fs::File::create(out.join("instances.csv"))?;
    metrics::write_instance_csv(&mut csv, &report)?;
    let summary = EvalSummary {
        mode: model.config.mode.to_string(),
        fold,
        instances: test.len(),
        rouge1: report.rouge1,
        rouge2: report.rouge2,
        rouge_l: report.rouge_l,
        repetition_count: report.repetition_count,
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "fold {fold} mode {}: ROUGE-1 {:.4}  ROUGE-2 {:.4}  ROUGE-L {:.4}  repeated {}",
        summary.mode, summary.rouge1, summary.rouge2, summary.rouge_l, summary.repetition_count
    );
    Ok(0)
}

fn cmd_summarize(ckpt: &Path, query: &str, document: &str, max_len: usize) -> Result<i32> {
    let (model, vocab, _) = checkpoint::load(ckpt)?;
    let limits = Limits::default();
    let raw = corpus::RawTriple {
        query: query.to_string(),
        document: document.to_string(),
        summary: "-".to_string(),
    };
    let triple = corpus::encode_triple(&raw, &vocab, &limits)?;
    let trace = model.greedy_decode(&triple.query_ids, &triple.doc_ids, max_len)?;

    let words = |ids: &[usize]| -> Vec<String> {
        ids.iter().map(|&i| vocab.token(i).to_string()).collect()
    };
    let query_words = words(&triple.query_ids);
    let doc_words = words(&triple.doc_ids);
    let emitted = trace
        .token_ids
        .iter()
        .filter(|&&id| id != corpus::EOS)
        .map(|&id| vocab.token(id).to_string())
        .collect::<Vec<_>>()
        .join(" ");
    println!("summary: {emitted}");
    for (t, id) in trace.token_ids.iter().enumerate() {
        println!("step {} -> {}", t + 1, vocab.token(*id));
        if let Some(qw) = trace.query_weights.get(t) {
            if !qw.is_empty() {
                print_weights("  query", &query_words, qw);
            }
        }
        if let Some(dw) = trace.doc_weights.get(t) {
            print_weights("  doc  ", &doc_words, dw);
        }
    }
    Ok(0)
}

fn print_weights(label: &str, tokens: &[String], weights: &[f64]) {
    let mut ranked: Vec<(usize, f64)> = weights.iter().cloned().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let shown: Vec<String> = ranked
        .iter()
        .take(4)
        .map(|&(i, w)| format!("{}={:.3}", tokens.get(i).map_or("?", |s| s), w))
        .collect();
    println!("{label} {}", shown.join("  "));
}

fn cmd_gradcheck(dims: usize, mode: DiversityMode, seeds: u64, step: f64) -> Result<i32> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let err = model::gradient_audit(mode, dims, seed, step)?;
        if err > worst {
            worst = err;
        }
    }
    println!("mode {mode} dims {dims} seeds {seeds}: max relative error {worst:.3e}");
    if worst < 1e-4 {
        Ok(0)
    } else {
        eprintln!("gradient check failed (threshold 1e-4)");
        Ok(1)
    }
}

/// Reference results at full scale (10-fold, 12,695 triples, hidden
/// 200-400), printed alongside whatever this workspace produced.
const ROUGE_REFERENCE: &[(&str, f64, f64, f64)] = &[
    ("Vanilla", 13.73, 2.06, 12.84),
    ("Query_enc", 20.87, 5.01, 19.27),
    ("Query_att", 29.28, 10.24, 28.11),
    ("B1", 33.06, 12.18, 31.74),
    ("D1", 33.85, 13.65, 32.33),
    ("SD1", 36.91, 15.26, 35.99),
    ("D2", 38.12, 16.76, 36.54),
    ("SD2", 41.26, 18.75, 40.43),
];
const REPETITION_REFERENCE: &[(&str, usize)] =
    &[("Query_att", 498), ("SD1", 352), ("SD2", 344), ("D1", 191), ("D2", 179)];

fn cmd_report(work: &Path) -> Result<i32> {
    // aggregate only artifacts already on disk; no model is ever loaded
    let mut rows: Vec<EvalSummary> = Vec::new();
    for entry in fs::read_dir(work)? {
        let path = entry?.path();
        let metrics = path.join("metrics.json");
        if metrics.is_file() {
            rows.push(serde_json::from_str(&fs::read_to_string(&metrics)?)?);
        }
    }
    if rows.is_empty() {
        bail!("no eval outputs under {}", work.display());
    }
    rows.sort_by(|a, b| (a.mode.clone(), a.fold).cmp(&(b.mode.clone(), b.fold)));

    let mut modes: Vec<String> = rows.iter().map(|r| r.mode.clone()).collect();
    modes.dedup();
    println!("ROUGE (F1, %) averaged over folds; full-scale reference in parentheses");
    println!("{:<12} {:>7} {:>7} {:>7}  folds", "model", "R-1", "R-2", "R-L");
    for mode in &modes {
        let group: Vec<&EvalSummary> = rows.iter().filter(|r| &r.mode == mode).collect();
        let n = group.len() as f64;
        let r1 = group.iter().map(|r| r.rouge1).sum::<f64>() / n * 100.0;
        let r2 = group.iter().map(|r| r.rouge2).sum::<f64>() / n * 100.0;
        let rl = group.iter().map(|r| r.rouge_l).sum::<f64>() / n * 100.0;
        let reference = ROUGE_REFERENCE
            .iter()
            .find(|(m, ..)| m.eq_ignore_ascii_case(mode))
            .map(|(_, a, b, c)| format!("(ref {a:.2}/{b:.2}/{c:.2})"))
            .unwrap_or_default();
        println!(
            "{mode:<12} {r1:>7.2} {r2:>7.2} {rl:>7.2}  {:<3} {reference}",
            group.len()
        );
    }
    println!();
    println!("summaries with a repeated word (totals; full-scale reference in parentheses)");
    for mode in &modes {
        let total: usize = rows
            .iter()
            .filter(|r| &r.mode == mode)
            .map(|r| r.repetition_count)
            .sum();
        let reference = REPETITION_REFERENCE
            .iter()
            .find(|(m, _)| m.eq_ignore_ascii_case(mode))
            .map(|(_, c)| format!("(ref {c})"))
            .unwrap_or_default();
        println!("{mode:<12} {total:>6} {reference}");
    }
    Ok(0)
}
