//! Command-line driver: dataset synthesis, pretraining, fine-tuning,
//! evaluation, attention export and statistical comparison.

pub mod config;
pub mod error;
pub mod schema;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use cxrlab::corpus::synth::{load_split, read_manifest, write_dataset, Split};
use cxrlab::corpus::text::preprocess_report;
use cxrlab::corpus::vocab::Vocabulary;
use cxrlab::decoding::SearchMode;
use cxrlab::metrics::report::{evaluate, Evaluation, SCORE_NAMES};
use cxrlab::stats::{compare, welch_t_test, SampleGroups};
use cxrlab::train::checkpoint::Checkpoint;
use cxrlab::train::data::{build_vocabulary, Dataset};
use cxrlab::train::finetune::{decode_split, finetune, load_model, WarmStart};
use cxrlab::train::pretrain::{
    pretrain_decoder_lm, pretrain_decoder_mlm, pretrain_encoder_classification, PretrainOutcome,
};
use serde::Serialize;
use serde_json::{json, Value};

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, ErrorKind};

pub const PRETRAIN_CHECKPOINT: &str = "checkpoint.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY: &str = "history.jsonl";
pub const METRICS: &str = "metrics.json";
pub const HYPOTHESES: &str = "hypotheses.tsv";
pub const ATTENTION: &str = "attention.tsv";
pub const COMPARISON: &str = "comparison.json";
pub const COMPARISON_TABLE: &str = "comparison.tsv";

#[derive(Debug, Parser)]
#[command(name = "cxrlab", version, about = "Warm-start experiments for encoder-to-decoder report generation")]
pub struct Cli {
    /// Sectioned TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (1 gives the sequential schedule).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Lm,
    Mlm,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (manifest, records and images per split).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Multi-label classification pretraining of the encoder.
    PretrainEncoder {
        /// Fine-tuning dataset; fixes the vocabulary.
        #[arg(long)]
        data: PathBuf,
        /// Pretraining corpus (defaults to the dataset itself).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Language-model pretraining of the decoder.
    PretrainDecoder {
        #[arg(long, value_enum)]
        objective: Objective,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the captioner with validation-CIDEr early stopping.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        encoder_checkpoint: Option<PathBuf>,
        #[arg(long)]
        decoder_checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a fine-tuned run on a split, or score two report files.
    Evaluate {
        /// Fine-tuning output directory.
        #[arg(long, requires = "data", conflicts_with_all = ["hyps", "refs"])]
        run: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generated reports, one per line (`id<TAB>report` or plain text).
        #[arg(long, requires = "refs")]
        hyps: Option<PathBuf>,
        #[arg(long, requires = "hyps")]
        refs: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the cross-attention maps behind one generated report.
    Attention {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        study: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Levene, Welch ANOVA and Games-Howell over metrics files. Files with
    /// the same label are pooled into one group.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    fs::write(path, text).map_err(|e| CliError::from(e).context(path.display()))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn split_by_name(name: &str) -> CliResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| CliError::config(format!("unknown split {name:?}")))
}

/// Training studies of `dir` and the vocabulary built from them.
fn load_train(dir: &Path) -> CliResult<(Vocabulary, Dataset)> {
    read_manifest(dir).map_err(|e| CliError::from(e).context(dir.display()))?;
    let studies = load_split(dir, Split::Train).map_err(|e| CliError::from(e).context(dir.display()))?;
    let vocab = build_vocabulary(&studies);
    let train = Dataset::from_studies(studies, &vocab);
    Ok((vocab, train))
}

fn load_dataset(dir: &Path, split: Split, vocab: &Vocabulary) -> CliResult<Dataset> {
    let studies = load_split(dir, split).map_err(|e| CliError::from(e).context(dir.display()))?;
    if studies.is_empty() {
        return Err(CliError::data(format!("{}: split {} is empty", dir.display(), split.name())));
    }
    Ok(Dataset::from_studies(studies, vocab))
}

/// History as JSON lines: a header record, one record per epoch, and for
/// fine-tuning a closing summary record.
fn write_history<T: Serialize>(out: &Path, cfg: &ExperimentConfig, ck: &Checkpoint, epochs: &[T], summary: Option<Value>) -> CliResult<()> {
    let header = json!({
        "record": "header",
        "schema": "cxrlab-history",
        "schema_version": schema::SCHEMA_VERSION,
        "config_fingerprint": cfg.fingerprint(),
        "model_fingerprint": ck.fingerprint,
        "seed": ck.meta.seed,
        "task": ck.meta.task,
        "generated_at": { "unix_seconds": unix_now() },
    });
    let mut lines = vec![header.to_string()];
    for e in epochs {
        let mut v = serde_json::to_value(e).map_err(|e| CliError::new(ErrorKind::Internal, e.to_string()))?;
        v["record"] = json!("epoch");
        lines.push(v.to_string());
    }
    if let Some(mut v) = summary {
        v["record"] = json!("summary");
        lines.push(v.to_string());
    }
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(out.join(HISTORY), text)?;
    Ok(())
}

fn save_pretrain(cfg: &ExperimentConfig, out: &Path, o: &PretrainOutcome) -> CliResult<()> {
    cfg.store(out)?;
    o.checkpoint.save(&out.join(PRETRAIN_CHECKPOINT))?;
    write_history(out, cfg, &o.checkpoint, &o.history, None)
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    write_dataset(out, &cfg.data).map_err(|e| CliError::from(e).context(out.display()))?;
    cfg.store(out)
}

fn cmd_pretrain_encoder(cfg: &ExperimentConfig, data: &Path, corpus: &Path, out: &Path) -> CliResult<()> {
    let (vocab, _) = load_train(data)?;
    let train = load_dataset(corpus, Split::Train, &vocab)?;
    let val = load_dataset(corpus, Split::Val, &vocab)?;
    let o = pretrain_encoder_classification(&cfg.encoder, &train, &val, &cfg.preprocess_config(), &cfg.pretrain)?;
    save_pretrain(cfg, out, &o)
}

fn cmd_pretrain_decoder(
    cfg: &ExperimentConfig,
    objective: Objective,
    data: &Path,
    corpus: &Path,
    out: &Path,
) -> CliResult<()> {
    let (vocab, _) = load_train(data)?;
    let tokens = |d: &Dataset| d.examples.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>();
    let train = tokens(&load_dataset(corpus, Split::Train, &vocab)?);
    let val = tokens(&load_dataset(corpus, Split::Val, &vocab)?);
    let dec = cfg.decoder_config(vocab.len());
    let o = match objective {
        Objective::Lm => pretrain_decoder_lm(&dec, &train, &val, &cfg.pretrain)?,
        Objective::Mlm => pretrain_decoder_mlm(&dec, &train, &val, &cfg.pretrain)?,
    };
    save_pretrain(cfg, out, &o)
}

fn cmd_finetune(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    encoder: Option<&Path>,
    decoder: Option<&Path>,
) -> CliResult<()> {
    let warm = WarmStart {
        encoder: encoder.map(load_checkpoint).transpose()?,
        decoder: decoder.map(load_checkpoint).transpose()?,
    };
    let (vocab, train) = load_train(data)?;
    let val = load_dataset(data, Split::Val, &vocab)?;
    let cap = cfg.captioner_config(vocab.len());
    let o = finetune(&cap, &warm, &train, &val, &cfg.preprocess_config(), &vocab, &cfg.train)?;
    cfg.store(out)?;
    o.best.save(&out.join(BEST_CHECKPOINT))?;
    let summary = json!({
        "best_epoch": o.best_epoch,
        "best_val_cider": o.best_val_cider,
        "stopped_early": o.stopped_early,
    });
    write_history(out, cfg, &o.best, &o.history, Some(summary))
}

/// Metrics document for one scored corpus.
pub fn metrics_doc(
    ev: &Evaluation,
    label: &str,
    config_fingerprint: &str,
    model_fingerprint: Option<&str>,
    seed: Option<u64>,
    source: Value,
) -> Value {
    let means: serde_json::Map<String, Value> = ev.summary.iter().map(|s| (s.name.clone(), json!(s.ci.mean))).collect();
    let boot: serde_json::Map<String, Value> = ev.summary.iter().map(|s| (s.name.clone(), json!(s.ci))).collect();
    json!({
        "schema": schema::METRICS_SCHEMA,
        "schema_version": schema::SCHEMA_VERSION,
        "label": label,
        "config_fingerprint": config_fingerprint,
        "model_fingerprint": model_fingerprint,
        "seed": seed,
        "source": source,
        "score_names": SCORE_NAMES,
        "per_example": ev.per_example,
        "means": means,
        "bootstrap": boot,
        "corpus": ev.corpus,
        "ce": ev.ce,
        "generated_at": { "unix_seconds": unix_now() },
    })
}

fn read_reports(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .enumerate()
        .map(|(i, line)| match line.split_once('\t') {
            Some((id, r)) => (id.to_string(), r.to_string()),
            None => (i.to_string(), line.to_string()),
        })
        .collect())
}

fn cmd_evaluate_files(cfg: &ExperimentConfig, hyps: &Path, refs: &Path, label: &str, out: &Path) -> CliResult<()> {
    let h = read_reports(hyps)?;
    let r = read_reports(refs)?;
    if h.len() != r.len() {
        return Err(CliError::data(format!("{} hypotheses but {} references", h.len(), r.len())));
    }
    if let Some((a, b)) = h.iter().zip(&r).find(|(a, b)| a.0 != b.0) {
        return Err(CliError::data(format!("id {:?} is paired with reference id {:?}", a.0, b.0)));
    }
    let ids: Vec<String> = h.iter().map(|x| x.0.clone()).collect();
    // the same normalization the training references receive
    let hyp_text: Vec<String> = h.iter().map(|x| preprocess_report(&x.1)).collect();
    let ref_text: Vec<String> = r.iter().map(|x| preprocess_report(&x.1)).collect();
    let ev = evaluate(&ids, &hyp_text, &ref_text, cfg.eval.bootstrap_seed).map_err(CliError::data)?;
    let source = json!({"kind": "files", "hypotheses": hyps, "references": refs});
    cfg.store(out)?;
    let doc = metrics_doc(&ev, label, &cfg.fingerprint(), None, Some(cfg.eval.bootstrap_seed), source);
    write_json(&out.join(METRICS), &doc)
}

fn cmd_evaluate_run(cfg: &ExperimentConfig, run: &Path, data: &Path, label: &str, out: &Path) -> CliResult<()> {
    let run_cfg = ExperimentConfig::load(run)?;
    let ck = load_checkpoint(&run.join(BEST_CHECKPOINT))?;
    let (vocab, _) = load_train(data)?;
    let split = split_by_name(&cfg.eval.split)?;
    let test = load_dataset(data, split, &vocab)?;
    let cap = run_cfg.captioner_config(vocab.len());
    let (store, model) = load_model(&cap, &ck)?;
    let pre = run_cfg.preprocess_config();
    let hyps = decode_split(&model, &store, &test, &pre, &vocab, SearchMode::Beam(cfg.train.test_beam))?;
    let ids: Vec<String> = test.examples.iter().map(|e| e.id.clone()).collect();
    let refs = test.reports();
    let ev = evaluate(&ids, &hyps, &refs, cfg.eval.bootstrap_seed).map_err(CliError::data)?;
    cfg.store(out)?;
    let mut lines = format!(
        "# config_fingerprint\t{}\n# model_fingerprint\t{}\n# seed\t{}\n",
        run_cfg.fingerprint(),
        ck.fingerprint,
        ck.meta.seed
    );
    lines.extend(ids.iter().zip(&hyps).map(|(i, h)| format!("{i}\t{h}\n")));
    fs::write(out.join(HYPOTHESES), lines)?;
    let source = json!({
        "kind": "run",
        "run": run,
        "run_config_fingerprint": run_cfg.fingerprint(),
        "data": data,
        "split": split.name(),
        "beam": cfg.train.test_beam,
        "best_epoch": ck.meta.epoch,
    });
    let doc = metrics_doc(&ev, label, &cfg.fingerprint(), Some(&ck.fingerprint), Some(ck.meta.seed), source);
    write_json(&out.join(METRICS), &doc)
}

fn cmd_attention(cfg: &ExperimentConfig, run: &Path, data: &Path, study: &str, out: &Path) -> CliResult<()> {
    let run_cfg = ExperimentConfig::load(run)?;
    let ck = load_checkpoint(&run.join(BEST_CHECKPOINT))?;
    let (vocab, _) = load_train(data)?;
    let split = split_by_name(&cfg.eval.split)?;
    let ds = load_dataset(data, split, &vocab)?;
    let i = ds
        .examples
        .iter()
        .position(|e| e.id == study)
        .ok_or_else(|| CliError::data(format!("study {study:?} is not in the {} split", split.name())))?;
    let (store, model) = load_model(&run_cfg.captioner_config(vocab.len()), &ck)?;
    let images = ds.eval_images(i, &run_cfg.preprocess_config());
    let max_len = run_cfg.decoder.max_gen_len;
    let report = model.generate(&store, study, &images, SearchMode::Beam(cfg.train.test_beam), max_len)?;
    let export = model.export_attention(&store, study, &images, &report)?;
    let text = vocab
        .detokenize(report.tokens())
        .map_err(|e| CliError::data(e.to_string()))?;
    cfg.store(out)?;
    let header = format!(
        "# config_fingerprint\t{}\n# model_fingerprint\t{}\n# seed\t{}\n# report\t{}\n",
        cfg.fingerprint(),
        ck.fingerprint,
        ck.meta.seed,
        text
    );
    fs::write(out.join(ATTENTION), header + &export.to_text(Some(&vocab)))?;
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig, files: &[PathBuf], out: &Path) -> CliResult<()> {
    let metric = &cfg.compare.metric;
    let col = SCORE_NAMES
        .iter()
        .position(|n| n == metric)
        .ok_or_else(|| CliError::config(format!("unknown metric {metric:?}; expected one of {SCORE_NAMES:?}")))?;
    let mut labels: Vec<String> = Vec::new();
    let mut runs: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut inputs = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for path in files {
        let doc = read_json(path)?;
        schema::validate_metrics(&doc).map_err(|e| CliError::data(format!("{}: {}", path.display(), e.join("; "))))?;
        let label = doc["label"].as_str().unwrap_or_default().to_string();
        let scores: Vec<f64> = doc["per_example"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|row| row["scores"][col].as_f64())
            .collect();
        let g = *index.entry(label.clone()).or_insert_with(|| {
            labels.push(label.clone());
            runs.push(Vec::new());
            labels.len() - 1
        });
        runs[g].push(scores);
        inputs.push(json!({
            "path": path,
            "label": label,
            "config_fingerprint": doc["config_fingerprint"],
            "model_fingerprint": doc["model_fingerprint"],
            "seed": doc["seed"],
        }));
    }
    let samples = SampleGroups::pooled(labels, &runs, cfg.compare.pooling)?;
    let report = compare(&samples, cfg.compare.levene_center, cfg.compare.alpha)?;
    let welch_t = if samples.len() == 2 {
        Some(welch_t_test(&samples.groups[0], &samples.groups[1])?)
    } else {
        None
    };
    cfg.store(out)?;
    let doc = json!({
        "schema": schema::COMPARISON_SCHEMA,
        "schema_version": schema::SCHEMA_VERSION,
        "config_fingerprint": cfg.fingerprint(),
        "seed": null,
        "metric": metric,
        "pooling": cfg.compare.pooling,
        "inputs": inputs,
        "report": report,
        "welch_t": welch_t,
        "generated_at": { "unix_seconds": unix_now() },
    });
    write_json(&out.join(COMPARISON), &doc)?;
    let table = format!("# config_fingerprint\t{}\n# seed\tnull\n{}", cfg.fingerprint(), report.to_table());
    fs::write(out.join(COMPARISON_TABLE), table)?;
    Ok(())
}

fn with_seed(mut cfg: ExperimentConfig, command: &Command) -> ExperimentConfig {
    match command {
        Command::Synth { seed: Some(s), .. } => cfg.data.seed = *s,
        Command::PretrainEncoder { seed: Some(s), .. } | Command::PretrainDecoder { seed: Some(s), .. } => {
            cfg.pretrain.seed = *s
        }
        Command::Finetune { seed: Some(s), .. } => cfg.train.seed = *s,
        _ => {}
    }
    cfg
}

fn default_label(run: Option<&Path>) -> String {
    run.and_then(|r| r.file_name())
        .map_or_else(|| "hypotheses".to_string(), |n| n.to_string_lossy().into_owned())
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::new(ErrorKind::Usage, "--threads must be at least 1"));
        }
        // a pool that already exists (repeated calls in one process) is kept
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let cfg = with_seed(cfg, &cli.command);
    cfg.validate()?;
    match &cli.command {
        Command::Synth { out, .. } => cmd_synth(&cfg, out),
        Command::PretrainEncoder { data, corpus, out, .. } => {
            cmd_pretrain_encoder(&cfg, data, corpus.as_deref().unwrap_or(data), out)
        }
        Command::PretrainDecoder {
            objective,
            data,
            corpus,
            out,
            ..
        } => cmd_pretrain_decoder(&cfg, *objective, data, corpus.as_deref().unwrap_or(data), out),
        Command::Finetune {
            data,
            out,
            encoder_checkpoint,
            decoder_checkpoint,
            ..
        } => cmd_finetune(&cfg, data, out, encoder_checkpoint.as_deref(), decoder_checkpoint.as_deref()),
        Command::Evaluate {
            run,
            data,
            hyps,
            refs,
            label,
            out,
        } => {
            let label = label.clone().unwrap_or_else(|| default_label(run.as_deref()));
            match (run, data, hyps, refs) {
                (Some(run), Some(data), _, _) => cmd_evaluate_run(&cfg, run, data, &label, out),
                (None, _, Some(h), Some(r)) => cmd_evaluate_files(&cfg, h, r, &label, out),
                _ => Err(CliError::new(
                    ErrorKind::Usage,
                    "evaluate needs either --run with --data, or --hyps with --refs",
                )),
            }
        }
        Command::Attention {
            run,
            data,
            study,
            out,
        } => cmd_attention(&cfg, run, data, study, out),
        Command::Compare { scores, out } => cmd_compare(&cfg, scores, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to stderr as one JSON line.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{}", CliError::new(ErrorKind::Usage, e.to_string().trim()).record());
            return ErrorKind::Usage.code();
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.record());
            e.kind.code()
        }
    }
}
