//! `mathlm` — pipeline driver: ingest → train-vocab → pack → mask →
//! pretrain → finetune → evaluate → report.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mathlm::corpus::{self, Document};
use mathlm::eval::{self, Fixture, SplitSpec, TaskDataset, TaskId};
use mathlm::mlm_data::{self, DatasetHeader};
use mathlm::model::{self, ModelConfig};
use mathlm::tokenizer::{self, Vocabulary};
use mathlm::trainer::{self, Strategy, TrainPlan};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mathlm", version, about = "Domain-adaptive pretraining toolkit")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, env = "MATHLM_CONFIG")]
    config: Option<PathBuf>,
    /// Seed for every random choice; echoed into output headers.
    #[arg(long, global = true, env = "MATHLM_SEED")]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true, env = "MATHLM_JOBS")]
    jobs: Option<usize>,
    /// Output path for the subcommand's artifact.
    #[arg(long, global = true, env = "MATHLM_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Values a JSON config file may provide; any flag overrides these.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    source: Option<String>,
    budget: Option<usize>,
    max_seq: Option<usize>,
    rate: Option<f64>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    steps: Option<usize>,
    epochs: Option<usize>,
    warmup_fraction: Option<f64>,
    model: Option<ModelConfig>,
}

#[derive(Subcommand)]
enum Command {
    /// Read corpus files (txt / jsonl) into a normalized document file.
    Ingest {
        /// Files or directories to read.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        source: Option<String>,
        /// Drop exact-duplicate texts.
        #[arg(long)]
        dedupe: bool,
    },
    /// Print document / token counts per source.
    Stats {
        inputs: Vec<PathBuf>,
    },
    /// Induce a WordPiece vocabulary from corpus files.
    TrainVocab {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        source: Option<String>,
    },
    /// Diff two vocabularies over an inclusive rank tier.
    CompareVocab {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        lo: usize,
        #[arg(long)]
        hi: usize,
    },
    /// Pack corpus files into fixed-length token segments.
    Pack {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        max_seq: Option<usize>,
        #[arg(long)]
        source: Option<String>,
    },
    /// Apply MLM masking to a packed segment file.
    Mask {
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Run MLM pretraining per strategy, writing a checkpoint and log.
    Pretrain {
        /// Masked domain-corpus dataset.
        #[arg(long)]
        data: PathBuf,
        /// Masked task-text dataset (tapt / dapt+tapt).
        #[arg(long)]
        task_data: Option<PathBuf>,
        /// base | tapt | dapt | dapt+tapt
        #[arg(long, default_value = "dapt")]
        strategy: String,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        warmup_fraction: Option<f64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        ffn: Option<usize>,
        #[arg(long)]
        labels: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Fine-tune a checkpoint on a labeled task file (csv / tsv).
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        warmup_fraction: Option<f64>,
    },
    /// Evaluate a checkpoint on the held-out test split of a task file.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// kc | ag | kt
        #[arg(long)]
        task: String,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Render the comparison report from a fixture or a report file.
    Report {
        #[arg(long)]
        fixture: Option<PathBuf>,
        /// Pre-built report JSON (overrides --fixture).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        markdown: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// Expand directories (recursively, sorted) into corpus files.
fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = walkdir::WalkDir::new(input)
                .sort_by_file_name()
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()),
                        Some("txt") | Some("jsonl") | Some("json")
                    )
                })
                .collect();
            files.append(&mut found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

fn hash_files(paths: &[PathBuf]) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in paths {
        hasher.update(std::fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    tokenizer::load_vocab(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    Ok(match s {
        "base" => Strategy::Base,
        "tapt" => Strategy::Tapt,
        "dapt" => Strategy::Dapt,
        "dapt+tapt" | "dapt_plus_tapt" => Strategy::DaptPlusTapt,
        other => bail!("unknown strategy {other:?} (expected base|tapt|dapt|dapt+tapt)"),
    })
}

fn parse_task(s: &str) -> Result<TaskId> {
    Ok(match s {
        "kc" => TaskId::Kc,
        "ag" => TaskId::Ag,
        "kt" => TaskId::Kt,
        other => bail!("unknown task {other:?} (expected kc|ag|kt)"),
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_file_config(&cli.config)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    if let Some(jobs) = cli.jobs.or(cfg.jobs) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .ok();
    }
    let out_or = |default: &str| -> PathBuf {
        cli.out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from(default))
    };

    match cli.command {
        Command::Ingest {
            inputs,
            source,
            dedupe,
        } => {
            let files = collect_inputs(&inputs)?;
            let source = source.or_else(|| cfg.source.clone()).unwrap_or_else(|| "corpus".into());
            let mut docs = corpus::ingest(&files, &source)?;
            if dedupe {
                docs = corpus::dedupe(docs);
            }
            let out = out_or("documents.jsonl");
            write_documents(&out, &docs)?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "ingest",
                    "documents": docs.len(),
                    "input_hash": hash_files(&files)?,
                    "output": out,
                })
            );
        }
        Command::Stats { inputs } => {
            let files = collect_inputs(&inputs)?;
            let docs = corpus::ingest(&files, "corpus")?;
            let stats = corpus::stats(&docs);
            println!("{}", serde_json::to_string(&stats)?);
        }
        Command::TrainVocab {
            inputs,
            budget,
            source,
        } => {
            let files = collect_inputs(&inputs)?;
            let source = source.or_else(|| cfg.source.clone()).unwrap_or_else(|| "corpus".into());
            let docs = corpus::ingest(&files, &source)?;
            let budget = budget.or(cfg.budget).unwrap_or(30_522);
            let vocab = tokenizer::train_vocabulary(&docs, budget)?;
            let out = out_or("vocab.txt");
            tokenizer::save_vocab(&vocab, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "train-vocab",
                    "size": vocab.size(),
                    "vocab_hash": vocab.content_hash(),
                    "input_hash": hash_files(&files)?,
                    "output": out,
                })
            );
        }
        Command::CompareVocab { a, b, lo, hi } => {
            let va = load_vocab(&a)?;
            let vb = load_vocab(&b)?;
            let diff = tokenizer::compare_vocabularies(&va, &vb, lo, hi)?;
            println!("{}", serde_json::to_string(&diff)?);
        }
        Command::Pack {
            inputs,
            vocab,
            max_seq,
            source,
        } => {
            let files = collect_inputs(&inputs)?;
            let source = source.or_else(|| cfg.source.clone()).unwrap_or_else(|| "corpus".into());
            let docs = corpus::ingest(&files, &source)?;
            let vocab = load_vocab(&vocab)?;
            let max_seq = max_seq.or(cfg.max_seq).unwrap_or(128);
            let segments = mlm_data::pack_sequences(&docs, &vocab, max_seq)?;
            let out = out_or("packed.jsonl");
            let header = DatasetHeader {
                format: "packed".into(),
                max_seq,
                vocab_hash: vocab.content_hash(),
                seed: None,
                rate: None,
            };
            mlm_data::write_packed_jsonl(&out, &header, &segments)?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "pack",
                    "segments": segments.len(),
                    "max_seq": max_seq,
                    "input_hash": hash_files(&files)?,
                    "output": out,
                })
            );
        }
        Command::Mask { input, vocab, rate } => {
            let vocab = load_vocab(&vocab)?;
            let (header, segments) = mlm_data::read_packed_jsonl(&input)?;
            if header.vocab_hash != vocab.content_hash() {
                bail!(
                    "vocabulary hash mismatch: packed data was built with {}",
                    header.vocab_hash
                );
            }
            let rate = rate.or(cfg.rate).unwrap_or(0.15);
            let examples =
                mlm_data::mask_segments(&segments, &vocab, header.max_seq, rate, seed);
            let out = out_or("masked.jsonl");
            let masked_header = DatasetHeader {
                format: "masked".into(),
                max_seq: header.max_seq,
                vocab_hash: header.vocab_hash,
                seed: Some(seed),
                rate: Some(rate),
            };
            mlm_data::write_masked_jsonl(&out, &masked_header, &examples)?;
            let masked: usize = examples.iter().map(|e| e.mask_positions.len()).sum();
            println!(
                "{}",
                serde_json::json!({
                    "command": "mask",
                    "examples": examples.len(),
                    "masked_positions": masked,
                    "rate": rate,
                    "seed": seed,
                    "output": out,
                })
            );
        }
        Command::Pretrain {
            data,
            task_data,
            strategy,
            vocab,
            init,
            steps,
            batch_size,
            learning_rate,
            warmup_fraction,
            hidden,
            layers,
            heads,
            ffn,
            labels,
            dropout,
        } => {
            let strategy = parse_strategy(&strategy)?;
            let vocab = load_vocab(&vocab)?;
            let (header, domain) = mlm_data::read_masked_jsonl(&data)?;
            let task = match &task_data {
                Some(p) => mlm_data::read_masked_jsonl(p)?.1,
                None => Vec::new(),
            };
            if matches!(strategy, Strategy::Tapt | Strategy::DaptPlusTapt) && task.is_empty() {
                bail!("strategy {strategy:?} needs --task-data");
            }
            let state = match init {
                Some(p) => model::load_checkpoint(&p)?,
                None => {
                    let base = cfg.model.clone().unwrap_or_default();
                    let config = ModelConfig {
                        vocab_size: vocab.size(),
                        max_seq: header.max_seq,
                        hidden_dim: hidden.unwrap_or(base.hidden_dim),
                        num_layers: layers.unwrap_or(base.num_layers),
                        num_heads: heads.unwrap_or(base.num_heads),
                        ffn_dim: ffn.unwrap_or(base.ffn_dim),
                        num_labels: labels.unwrap_or(base.num_labels),
                        dropout_rate: dropout.unwrap_or(base.dropout_rate),
                    };
                    model::init_model::<f32>(&config, seed)?
                }
            };
            let plan = TrainPlan {
                strategy,
                learning_rate: learning_rate.or(cfg.learning_rate).unwrap_or(1e-3),
                batch_size: batch_size.or(cfg.batch_size).unwrap_or(8),
                max_steps: Some(steps.or(cfg.steps).unwrap_or(100)),
                epochs: None,
                max_seq: header.max_seq,
                seed,
                warmup_fraction: warmup_fraction.or(cfg.warmup_fraction).unwrap_or(0.1),
            };
            let (trained, logs) =
                trainer::run_pretraining_strategy(&state, strategy, &domain, &task, &plan)?;
            let out = out_or("pretrained.ckpt");
            model::save_checkpoint(&trained, &out)?;
            let log_path = out.with_extension("log.jsonl");
            let mut log_text = String::new();
            for log in &logs {
                log_text.push_str(&log.to_jsonl());
            }
            std::fs::write(&log_path, &log_text)?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "pretrain",
                    "strategy": strategy,
                    "final_loss": logs.last().and_then(|l| l.final_loss),
                    "final_accuracy": logs.last().and_then(|l| l.final_accuracy),
                    "seed": seed,
                    "checkpoint_hash": trained.content_hash(),
                    "output": out,
                    "log": log_path,
                })
            );
        }
        Command::Finetune {
            data,
            vocab,
            ckpt,
            epochs,
            batch_size,
            learning_rate,
            warmup_fraction,
        } => {
            let vocab = load_vocab(&vocab)?;
            let state = model::load_checkpoint(&ckpt)?;
            let examples = mlm_data::load_task_csv(&data)?;
            let (train, validate, _test) = eval::split(&examples, &SplitSpec::new(seed))?;
            let num_labels = state.config.num_labels;
            let train_ex =
                mlm_data::build_classify_examples(&train, &vocab, state.config.max_seq, num_labels)?;
            let val_ex = mlm_data::build_classify_examples(
                &validate,
                &vocab,
                state.config.max_seq,
                num_labels,
            )?;
            let plan = TrainPlan {
                strategy: Strategy::Base,
                learning_rate: learning_rate.or(cfg.learning_rate).unwrap_or(1e-3),
                batch_size: batch_size.or(cfg.batch_size).unwrap_or(8),
                max_steps: None,
                epochs: Some(epochs.or(cfg.epochs).unwrap_or(3)),
                max_seq: state.config.max_seq,
                seed,
                warmup_fraction: warmup_fraction.or(cfg.warmup_fraction).unwrap_or(0.1),
            };
            let (tuned, log) = trainer::finetune(&state, &train_ex, &val_ex, &plan)?;
            let out = out_or("finetuned.ckpt");
            model::save_checkpoint(&tuned, &out)?;
            let log_path = out.with_extension("log.jsonl");
            std::fs::write(&log_path, log.to_jsonl())?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "finetune",
                    "best_epoch": log.best_epoch,
                    "validation_accuracy": log.final_accuracy,
                    "seed": seed,
                    "checkpoint_hash": tuned.content_hash(),
                    "output": out,
                    "log": log_path,
                })
            );
        }
        Command::Evaluate {
            data,
            task,
            vocab,
            ckpt,
        } => {
            let task_id = parse_task(&task)?;
            let vocab = load_vocab(&vocab)?;
            let state = model::load_checkpoint(&ckpt)?;
            let examples = mlm_data::load_task_csv(&data)?;
            let dataset = TaskDataset::new(task_id, examples);
            let (_train, _validate, test) = eval::split(&dataset.examples, &SplitSpec::new(seed))?;
            let test_ex = mlm_data::build_classify_examples(
                &test,
                &vocab,
                state.config.max_seq,
                state.config.num_labels,
            )?;
            let metrics = eval::task_metrics(task_id, &state, &test_ex, dataset.num_labels)?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "evaluate",
                    "task": task,
                    "test_examples": test_ex.len(),
                    "seed": seed,
                    "metrics": metrics,
                })
            );
        }
        Command::Report {
            fixture,
            report,
            markdown,
        } => {
            let report_value = match (report, fixture) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading report {}", p.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing report {}", p.display()))?
                }
                (None, Some(p)) => {
                    let text = std::fs::read_to_string(&p)
                        .with_context(|| format!("reading fixture {}", p.display()))?;
                    let fixture: Fixture = serde_json::from_str(&text)
                        .with_context(|| format!("parsing fixture {}", p.display()))?;
                    let deltas = eval::compute_deltas(&fixture.rows)?;
                    eval::EvalReport {
                        rows: fixture.rows,
                        deltas,
                    }
                }
                (None, None) => bail!("report needs --fixture or --report"),
            };
            let rendered = eval::render_report(&report_value, markdown)?;
            let out = out_or(if markdown { "report.md" } else { "report.json" });
            std::fs::write(&out, &rendered)?;
            println!(
                "{}",
                serde_json::json!({
                    "command": "report",
                    "rows": report_value.rows.len(),
                    "deltas": report_value.deltas.len(),
                    "markdown": markdown,
                    "output": out,
                })
            );
        }
    }
    Ok(())
}
