//! Command-line entry point wiring the pipeline stages together.
//!
//! One command per process. Exit codes: 0 success, 1 usage or config error,
//! 2 data error, 3 numeric divergence.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use cellfm::benchmark::{
    self, baseline_task, build_disease_folds, build_donor_task, finetune, linear_probe,
    report_rows, save_task, write_metrics_report, write_summary, EvalTask, ProbeOptions,
    ReportRow, SweepOptions, TaskMetrics,
};
use cellfm::config::{load_config, Manifest, PipelineConfig};
use cellfm::corpus::{
    default_mito_genes, fetch_dataset, gen_synthetic_corpus, load_corpus_dir, load_counts,
    qc_filter, save_counts, AnnotationSchema, CountMatrix, SyntheticSpec,
};
use cellfm::model::{self, checkpoint, init_params, ModelParams};
use cellfm::normalize::{build_median_dictionary, GeneMedianDictionary};
use cellfm::tokenizer::{
    build_vocabulary, cell_rng, read_shards, rng_purpose, tokenize_corpus, write_shards,
    BalanceTables, TokenizedCell, Vocabulary,
};
use cellfm::train::{eval_heldout_loss, fit_power_law, pretrain};
use cellfm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cellfm",
    version,
    about = "Single-cell expression model pipeline: ingest, tokenize, pre-train, benchmark"
)]
struct Cli {
    /// Config file; falls back to $CELLFM_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set train.max_lr=3e-4 (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Cap the worker thread count (does not affect results).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, PartialEq)]
enum TaskArg {
    Diseases,
    Donors,
}

#[derive(ValueEnum, Clone, Copy, PartialEq)]
enum ModeArg {
    Finetune,
    Probe,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Download a dataset archive, optionally verifying its digest.
    Fetch {
        #[arg(long)]
        url: String,
        #[arg(long)]
        dest: PathBuf,
        #[arg(long)]
        digest: Option<String>,
    },
    /// Load a raw count matrix, apply quality-control filters, and save the
    /// corpus directory.
    Ingest {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        genes: PathBuf,
        #[arg(long)]
        cells: PathBuf,
        /// Output corpus directory (default: paths.corpus).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the quality-control filter.
        #[arg(long)]
        skip_qc: bool,
    },
    /// Write a deterministic synthetic corpus for desk-scale runs.
    Synth {
        #[arg(long, default_value_t = 256)]
        cells: usize,
        #[arg(long, default_value_t = 64)]
        genes: usize,
        #[arg(long, default_value_t = 8)]
        donors: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the per-gene non-zero median dictionary.
    BuildMedians {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tokenize a corpus into shard files.
    Tokenize {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        medians: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train a model on tokenized shards.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        shards: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report masked-prediction loss of a checkpoint on a tokenized corpus.
    EvalLoss {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        shards: Option<PathBuf>,
    },
    /// Fit a power law to (parameter count, loss) points.
    FitScaling {
        /// Tab-separated input with a header and `params<TAB>loss` rows.
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write mean-pooled cell embeddings under a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        shards: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a disease-classification benchmark task.
    Benchmark {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Pre-trained checkpoint (unused in baseline mode).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Held-out corpus directory (donors task only).
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate metrics reports into a summary table.
    Report {
        /// One or more metrics TSV files.
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: could not configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let (cfg, snapshot) = match load_config(cli.config.as_deref(), &cli.overrides) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command, &cfg, snapshot) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Diverged { .. } | Error::NonFinite { .. } => 3,
                Error::InvalidConfig(_) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load_corpus(cfg: &PipelineConfig, flag: &Option<PathBuf>) -> Result<(CountMatrix, PathBuf)> {
    let dir = flag.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    let schema = AnnotationSchema::default();
    let counts = load_corpus_dir(&dir, &schema)?;
    Ok((counts, dir))
}

fn load_checkpoint_params(path: &Path) -> Result<ModelParams> {
    Ok(checkpoint::load(path)?.params)
}

/// Tokenized cells for a corpus, in corpus cell order: read shards when the
/// directory matches the corpus, otherwise tokenize on the fly.
fn tokenized_cells(
    cfg: &PipelineConfig,
    counts: &CountMatrix,
    shards: &Option<PathBuf>,
    vocab: &Vocabulary,
) -> Result<Vec<TokenizedCell>> {
    let dir = shards.clone().unwrap_or_else(|| cfg.paths.shards.clone());
    if dir.is_dir() {
        let cells = read_shards(&dir, vocab)?;
        if cells.len() == counts.n_cells {
            return Ok(cells);
        }
    }
    let dict = GeneMedianDictionary::load(&cfg.paths.medians)?;
    tokenize_corpus(counts, &dict, vocab, cfg.variant()?, cfg.tokenizer.context_len)
}

fn manifest_for(cfg: &PipelineConfig, snapshot: serde_json::Value, command: &str) -> Manifest {
    Manifest::new(command, cfg.seed, snapshot)
}

fn write_file_manifest(mut manifest: Manifest, inputs: &[&Path], out: &Path) -> Result<()> {
    for p in inputs {
        manifest.add_input(p)?;
    }
    let dir = if out.is_dir() { out } else { out.parent().unwrap_or(Path::new(".")) };
    manifest.write(dir)?;
    Ok(())
}

fn run(command: &Command, cfg: &PipelineConfig, snapshot: serde_json::Value) -> Result<()> {
    match command {
        Command::Fetch { url, dest, digest } => {
            let path = fetch_dataset(url, dest, digest.as_deref())?;
            write_file_manifest(manifest_for(cfg, snapshot, "fetch"), &[&path], &path)?;
            println!("fetched {}", path.display());
            Ok(())
        }
        Command::Ingest { matrix, genes, cells, out, skip_qc } => {
            let schema = AnnotationSchema::default();
            let raw = load_counts(matrix, genes, cells, &schema)?;
            let kept = if *skip_qc {
                raw
            } else {
                let mito = default_mito_genes(&raw);
                qc_filter(&raw, cfg.qc.min_counts, cfg.qc.max_mito_frac, &mito)
            };
            let out = out.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
            save_counts(&kept, &out)?;
            write_file_manifest(
                manifest_for(cfg, snapshot, "ingest"),
                &[matrix, genes, cells],
                &out,
            )?;
            println!(
                "ingested {} cells x {} genes into {}",
                kept.n_cells,
                kept.n_genes,
                out.display()
            );
            Ok(())
        }
        Command::Synth { cells, genes, donors, out } => {
            let schema = AnnotationSchema::default();
            let spec = SyntheticSpec::new(*cells, *genes, *donors);
            let corpus = gen_synthetic_corpus(&spec, &schema, cfg.seed);
            let out = out.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
            save_counts(&corpus, &out)?;
            write_file_manifest(manifest_for(cfg, snapshot, "synth"), &[], &out)?;
            println!("wrote synthetic corpus to {}", out.display());
            Ok(())
        }
        Command::BuildMedians { corpus, out } => {
            let (counts, dir) = load_corpus(cfg, corpus)?;
            let dict = build_median_dictionary(&counts)?;
            let out = out.clone().unwrap_or_else(|| cfg.paths.medians.clone());
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            dict.save(&out)?;
            write_file_manifest(manifest_for(cfg, snapshot, "build-medians"), &[&dir], &out)?;
            println!("wrote {} gene medians to {}", dict.len(), out.display());
            Ok(())
        }
        Command::Tokenize { corpus, medians, out } => {
            let (counts, dir) = load_corpus(cfg, corpus)?;
            let medians = medians.clone().unwrap_or_else(|| cfg.paths.medians.clone());
            let dict = GeneMedianDictionary::load(&medians)?;
            let schema = AnnotationSchema::default();
            let vocab = build_vocabulary(&counts.gene_ids, &schema)?;
            let cells =
                tokenize_corpus(&counts, &dict, &vocab, cfg.variant()?, cfg.tokenizer.context_len)?;
            let out = out.clone().unwrap_or_else(|| cfg.paths.shards.clone());
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let n = write_shards(cells.into_iter(), &out)?;
            write_file_manifest(
                manifest_for(cfg, snapshot, "tokenize"),
                &[&dir, &medians],
                &out,
            )?;
            println!("wrote {n} tokenized cells to {}", out.display());
            Ok(())
        }
        Command::Pretrain { corpus, shards, out, resume } => {
            let (counts, corpus_dir) = load_corpus(cfg, corpus)?;
            let schema = AnnotationSchema::default();
            let vocab = build_vocabulary(&counts.gene_ids, &schema)?;
            let cells = tokenized_cells(cfg, &counts, shards, &vocab)?;
            let probs = BalanceTables::from_corpus(&counts);
            let train_cfg = cfg.train_config()?;

            // deterministic validation holdout
            let mut order: Vec<usize> = (0..cells.len()).collect();
            {
                use rand::seq::SliceRandom;
                let mut rng = cell_rng(cfg.seed, u64::MAX, 0, rng_purpose::SHUFFLE);
                order.shuffle(&mut rng);
            }
            let n_val = ((cells.len() as f64) * cfg.train.val_frac).round() as usize;
            let (val_idx, train_idx) = order.split_at(n_val.min(cells.len().saturating_sub(1)));
            let train_cells: Vec<TokenizedCell> =
                train_idx.iter().map(|&i| cells[i].clone()).collect();
            let val_cells: Vec<TokenizedCell> =
                val_idx.iter().map(|&i| cells[i].clone()).collect();

            let model_cfg = cfg.model_config(vocab.size())?;
            let (params, resume_ckpt) = match resume {
                Some(path) => {
                    let ckpt = checkpoint::load(path)?;
                    (ckpt.params.clone(), Some(ckpt))
                }
                None => (init_params(&model_cfg, cfg.seed)?, None),
            };
            let out = out.clone().unwrap_or_else(|| cfg.paths.checkpoints.clone());
            let shard_dir = shards.clone().unwrap_or_else(|| cfg.paths.shards.clone());
            let outcome = pretrain(
                params,
                &train_cells,
                &val_cells,
                &vocab,
                &probs,
                &train_cfg,
                &out,
                resume_ckpt,
            )?;
            let mut inputs: Vec<&Path> = vec![&corpus_dir];
            if shard_dir.is_dir() {
                inputs.push(&shard_dir);
            }
            write_file_manifest(manifest_for(cfg, snapshot, "pretrain"), &inputs, &out)?;
            println!(
                "final loss {:.6} (mlm {:.6}, cls {:.6}); checkpoint {}",
                outcome.final_loss.total,
                outcome.final_loss.mlm,
                outcome.final_loss.cls,
                outcome.checkpoint_path.display()
            );
            Ok(())
        }
        Command::EvalLoss { checkpoint: ckpt, corpus, shards } => {
            let (counts, _) = load_corpus(cfg, corpus)?;
            let schema = AnnotationSchema::default();
            let vocab = build_vocabulary(&counts.gene_ids, &schema)?;
            let cells = tokenized_cells(cfg, &counts, shards, &vocab)?;
            let params = load_checkpoint_params(ckpt)?;
            let report = eval_heldout_loss(
                &params,
                &cells,
                &vocab,
                cfg.train.mask_rate,
                cfg.seed,
                cfg.train.batch_size,
            )?;
            println!("total\tmlm\tcls");
            println!("{:?}\t{:?}\t{:?}", report.total, report.mlm, report.cls);
            Ok(())
        }
        Command::FitScaling { points, out } => {
            let data = read_points(points)?;
            let (a, b) = fit_power_law(&data)?;
            println!("a\tb");
            println!("{a:?}\t{b:?}");
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.paths.reports.join("scaling.tsv"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            benchmark::write_scaling_plot_data(&data, (a, b), &out)?;
            write_file_manifest(
                manifest_for(cfg, snapshot, "fit-scaling"),
                &[points.as_path()],
                &out,
            )?;
            Ok(())
        }
        Command::Embed { checkpoint: ckpt, corpus, shards, out } => {
            let (counts, _) = load_corpus(cfg, corpus)?;
            let schema = AnnotationSchema::default();
            let vocab = build_vocabulary(&counts.gene_ids, &schema)?;
            let cells = tokenized_cells(cfg, &counts, shards, &vocab)?;
            let params = load_checkpoint_params(ckpt)?;
            let emb = model::embed_cells(&params, &cells)?;
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.paths.reports.join("embeddings.tsv"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let mut text = String::from("cell_id\tembedding\n");
            for (meta, row) in counts.cells.iter().zip(&emb) {
                let joined: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                text.push_str(&format!("{}\t{}\n", meta.cell_id, joined.join(",")));
            }
            fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
            write_file_manifest(manifest_for(cfg, snapshot, "embed"), &[ckpt.as_path()], &out)?;
            println!("wrote {} embeddings to {}", emb.len(), out.display());
            Ok(())
        }
        Command::Benchmark { task, mode, checkpoint: ckpt, corpus, heldout, out } => {
            run_benchmark(cfg, snapshot, *task, *mode, ckpt, corpus, heldout, out)
        }
        Command::Report { metrics, out } => {
            let mut rows = Vec::new();
            for path in metrics {
                rows.extend(read_metrics(path)?);
            }
            let out = out
                .clone()
                .unwrap_or_else(|| cfg.paths.reports.join("summary.tsv"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_summary(&rows, &out)?;
            let inputs: Vec<&Path> = metrics.iter().map(PathBuf::as_path).collect();
            write_file_manifest(manifest_for(cfg, snapshot, "report"), &inputs, &out)?;
            println!("{}", fs::read_to_string(&out).map_err(|e| Error::io(&out, e))?);
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_benchmark(
    cfg: &PipelineConfig,
    snapshot: serde_json::Value,
    task_arg: TaskArg,
    mode: ModeArg,
    ckpt: &Option<PathBuf>,
    corpus: &Option<PathBuf>,
    heldout: &Option<PathBuf>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let (counts, corpus_dir) = load_corpus(cfg, corpus)?;
    let schema = AnnotationSchema::default();

    let (task, all_counts) = match task_arg {
        TaskArg::Diseases => {
            let task = build_disease_folds(&counts, cfg.benchmark.folds, cfg.seed)?;
            (task, counts)
        }
        TaskArg::Donors => {
            let held_dir = heldout.as_ref().ok_or_else(|| {
                Error::InvalidConfig("--heldout is required for the donors task".into())
            })?;
            let held = load_corpus_dir(held_dir, &schema)?;
            let task = build_donor_task(&counts, &held, cfg.benchmark.train_frac, cfg.seed)?;
            (task, merge_corpora(&counts, &held)?)
        }
    };

    let out = out.clone().unwrap_or_else(|| cfg.paths.reports.clone());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_task(&task, &out.join(format!("{}_task.tsv", task.kind.name())))?;

    let model_name;
    let tm: TaskMetrics = match mode {
        ModeArg::Baseline => {
            model_name = "baseline-hvg-logreg".to_string();
            baseline_task(&all_counts, &task, cfg.benchmark.top_k_genes.min(all_counts.n_genes), &ProbeOptions::default())?
        }
        ModeArg::Probe | ModeArg::Finetune => {
            let ckpt = ckpt.as_ref().ok_or_else(|| {
                Error::InvalidConfig("--checkpoint is required for probe/finetune".into())
            })?;
            let params = load_checkpoint_params(ckpt)?;
            let cells = task_cells(cfg, &all_counts, &task)?;
            if mode == ModeArg::Probe {
                model_name = "linear-probe".to_string();
                let raw = model::embed_cells(&params, &cells)?;
                let d = params.config.d_model;
                let mut emb = Array2::zeros((raw.len(), d));
                for (i, row) in raw.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        emb[[i, j]] = v;
                    }
                }
                linear_probe(&emb, &task, &ProbeOptions::default())?
            } else {
                model_name = "finetune".to_string();
                let opts = SweepOptions {
                    seeds: cfg.benchmark.seeds.clone(),
                    epochs: cfg.benchmark.finetune_epochs,
                    batch_size: cfg.benchmark.finetune_batch_size,
                    ..SweepOptions::default()
                };
                finetune(&params, &cells, &task, &opts)?
            }
        }
    };

    let rows = report_rows(&model_name, task.kind.name(), &tm);
    let metrics_path = out.join(format!("{}_{model_name}_metrics.tsv", task.kind.name()));
    write_metrics_report(&rows, &metrics_path)?;
    write_summary(&rows, &out.join(format!("{}_{model_name}_summary.tsv", task.kind.name())))?;
    write_file_manifest(manifest_for(cfg, snapshot, "benchmark"), &[&corpus_dir], &out)?;
    println!(
        "{model_name} on {}: accuracy {:.4} +/- {:.4}, weighted F1 {:.4} +/- {:.4}",
        task.kind.name(),
        tm.mean_accuracy,
        tm.sd_accuracy,
        tm.mean_weighted_f1,
        tm.sd_weighted_f1
    );
    Ok(())
}

/// Tokenize every task cell, in task order, against the merged corpus.
fn task_cells(
    cfg: &PipelineConfig,
    counts: &CountMatrix,
    task: &EvalTask,
) -> Result<Vec<TokenizedCell>> {
    let schema = AnnotationSchema::default();
    let vocab = build_vocabulary(&counts.gene_ids, &schema)?;
    let dict = GeneMedianDictionary::load(&cfg.paths.medians)?;
    let all = tokenize_corpus(counts, &dict, &vocab, cfg.variant()?, cfg.tokenizer.context_len)?;
    let by_id: HashMap<&str, usize> = counts
        .cells
        .iter()
        .enumerate()
        .map(|(i, m)| (m.cell_id.as_str(), i))
        .collect();
    task.cell_ids
        .iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|&i| all[i].clone())
                .ok_or_else(|| Error::InvalidInput(format!("task cell {id:?} not in corpus")))
        })
        .collect()
}

/// Concatenate two corpora sharing a gene list into one matrix.
fn merge_corpora(a: &CountMatrix, b: &CountMatrix) -> Result<CountMatrix> {
    use cellfm::corpus::Triplet;
    if a.gene_ids != b.gene_ids {
        return Err(Error::InvalidInput(
            "corpora have different gene lists and cannot be merged".into(),
        ));
    }
    let mut entries: Vec<Triplet> = a.entries().to_vec();
    entries.extend(b.entries().iter().map(|t| Triplet {
        cell: t.cell + a.n_cells as u32,
        gene: t.gene,
        count: t.count,
    }));
    let mut cells = a.cells.clone();
    cells.extend(b.cells.iter().cloned());
    CountMatrix::from_triplets(entries, a.gene_ids.clone(), a.gene_symbols.clone(), cells)
}

/// Parse a `params<TAB>loss` table, skipping the header line.
fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut cols = line.split('\t');
        let parse = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected params<TAB>loss".into(),
            })
        };
        out.push((parse(cols.next())?, parse(cols.next())?));
    }
    Ok(out)
}

/// Parse a metrics report written by [`write_metrics_report`].
fn read_metrics(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let fail = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if cols.len() != 6 {
            return Err(fail("expected 6 tab-separated columns"));
        }
        rows.push(ReportRow {
            model: cols[0].to_string(),
            task: cols[1].to_string(),
            fold: cols[2].parse().map_err(|_| fail("bad fold"))?,
            seed: cols[3].parse().map_err(|_| fail("bad seed"))?,
            accuracy: cols[4].parse().map_err(|_| fail("bad accuracy"))?,
            weighted_f1: cols[5].parse().map_err(|_| fail("bad weighted_f1"))?,
        });
    }
    Ok(rows)
}
