//! The `train`, `eval` and `sweep` commands.

use std::path::{Path, PathBuf};

use hatemask_core::corpus::{class_distribution, load_labeled_tsv, load_parallel, preprocess_examples, ParallelPair};
use hatemask_core::detect::{
    build_classifier, load_pretrained_embeddings, ClassifierTrainer, EncodedSplit, TrainedClassifier,
};
use hatemask_core::history::{EpochRecord, TrainingHistory};
use hatemask_core::maskgen::{build_seq2seq, evaluate_masker, MaskerReport, MaskerTrainer, TrainedMasker};
use hatemask_core::metrics::fmt2;
use hatemask_core::text::{build_source_vocab, preprocess, NormalizationConfig, Vocabulary};
use hatemask_core::ModelError;
use hatemask_nn::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ModelSection, RunConfig, Task};
use crate::data::{
    all_items, file_sha256, load_detect_data, load_mask_data, not_hate_count, target_normalization, DataSummary,
};
use crate::error::CliError;

pub const REPORT_DIR_ENV: &str = "HSMASK_REPORT_DIR";
pub const DEFAULT_SWEEP_SIZES: [usize; 5] = [6000, 8000, 10000, 12000, 15000];

/// `--report-dir`, then the config file, then the environment, then `reports`.
pub fn resolve_report_dir(flag: Option<PathBuf>, config: Option<&Path>) -> PathBuf {
    flag.or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(REPORT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("reports"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn log_epoch(record: &EpochRecord) {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "epoch {:>3}  train_loss {:.4}  train_acc {}  dev_loss {}  dev_acc {}",
        record.epoch,
        record.train_loss,
        opt(record.train_accuracy),
        opt(record.dev_loss),
        opt(record.dev_accuracy)
    );
}

/// Table 9/10 layout: dataset size, not-hate size, vocabulary, UNK, BLEU 1..4.
pub fn masker_table(rows: &[MaskerReport]) -> String {
    let mut out = format!("{:>8}{:>8}{}\n", "DS", "Not-HS", MaskerReport::header());
    for r in rows {
        out += &format!("{:>8}{:>8}{}\n", r.ds_size, r.not_hs_size, r.row());
    }
    out
}

struct TrainOutcome {
    report: Value,
    masker_test: Option<MaskerReport>,
}

/// Trains the configured model into `dir`, writing the checkpoint, history,
/// vocabularies, resolved config and report.
fn train_into(cfg: &RunConfig, dir: &Path) -> Result<TrainOutcome, CliError> {
    create_dir(dir)?;
    let resolved = cfg.to_value();
    write_json(&dir.join("config.resolved.json"), &resolved)?;
    let checkpoint = cfg.eval.checkpoint.clone().unwrap_or_else(|| dir.join("model.ckpt"));
    let (history, summary, extra, masker_test) = match &cfg.model {
        ModelSection::Detect(model_cfg) => {
            let loaded = load_detect_data(&cfg.data, cfg.seed)?;
            let train_texts: Vec<&str> = loaded.bundle.train.iter().map(|e| e.text.as_str()).collect();
            let vocab = build_source_vocab(&train_texts, cfg.data.vocab_size)?;
            let mut model_cfg = model_cfg.clone();
            model_cfg.vocab_size = vocab.len();
            let mut model = build_classifier(&model_cfg)?;
            let mut coverage = None;
            if let Some(path) = &cfg.data.embeddings {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
                let (table, cov) = load_pretrained_embeddings(path, &vocab, model_cfg.embed_dim, &mut rng)?;
                model.set_embeddings(table)?;
                coverage = Some(json!({"found": cov.found, "total": cov.total, "fraction": cov.fraction()}));
            }
            let parameters = model.parameter_count();
            let train = EncodedSplit::new(&loaded.bundle.train, &vocab, model_cfg.seq_len);
            let dev = EncodedSplit::new(&loaded.bundle.dev, &vocab, model_cfg.seq_len);
            let mut trainer = ClassifierTrainer::new(model, train, dev, &model_cfg.training)?;
            while !trainer.finished() {
                log_epoch(trainer.run_epoch()?);
            }
            let trained = trainer.finish(vocab)?;
            trained.save(&checkpoint)?;
            trained.vocab.save(dir.join("vocab.txt"))?;
            let train_eval = trained.evaluate(&loaded.bundle.train)?;
            let test_eval = match loaded.bundle.test.is_empty() {
                true => None,
                false => Some(trained.evaluate(&loaded.bundle.test)?),
            };
            if let Some(report) = &test_eval {
                println!("{}", report.table());
            }
            let extra = json!({
                "arch": model_cfg.arch.name(),
                "vocab_size": trained.vocab.len(),
                "parameters": parameters,
                "class_distribution": class_distribution(&loaded.bundle),
                "embeddings": coverage,
                "evaluation": {"train": train_eval, "test": test_eval},
            });
            (trained.history, loaded.summary, extra, None)
        }
        ModelSection::Mask(model_cfg) => {
            let loaded = load_mask_data(&cfg.data, cfg.seed)?;
            let (source_vocab, target_vocab) = model_cfg.build_vocabularies(&loaded.bundle.train)?;
            let model = build_seq2seq(model_cfg, source_vocab, target_vocab)?;
            let parameters = model.parameter_count();
            let mut trainer = MaskerTrainer::new(model, &loaded.bundle.train, &loaded.bundle.dev, &model_cfg.training)?;
            while !trainer.finished() {
                log_epoch(trainer.run_epoch()?);
            }
            let trained = trainer.finish()?;
            trained.save(&checkpoint)?;
            trained.model.source_vocab().save(dir.join("source_vocab.txt"))?;
            trained.model.target_vocab().save(dir.join("target_vocab.txt"))?;
            let all = all_items(&loaded.bundle);
            let train_eval = evaluate_masker(&trained.model, &loaded.bundle.train)?;
            let test_eval = match loaded.bundle.test.is_empty() {
                true => None,
                false => Some(with_dataset_sizes(evaluate_masker(&trained.model, &loaded.bundle.test)?, &all)),
            };
            if let Some(report) = &test_eval {
                println!("{}", masker_table(std::slice::from_ref(report)));
            }
            println!("train exact match {}  BLEU-1 {}", fmt2(train_eval.exact_match), fmt2(train_eval.bleu1));
            let extra = json!({
                "source_vocab_size": trained.model.source_vocab().len(),
                "target_vocab_size": trained.model.target_vocab().len(),
                "parameters": parameters,
                "not_hate_pairs": not_hate_count(&all),
                "evaluation": {"train": train_eval, "test": test_eval},
            });
            (trained.history, loaded.summary, extra, test_eval)
        }
    };
    write_json(&dir.join("history.json"), &history)?;
    let report = train_report(cfg, resolved, &summary, &history, &checkpoint, extra)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(TrainOutcome { report, masker_test })
}

/// Relabels a test-split report with the sizes of the whole corpus, as in
/// the published tables.
fn with_dataset_sizes(mut report: MaskerReport, all: &[ParallelPair]) -> MaskerReport {
    report.ds_size = all.len();
    report.not_hs_size = not_hate_count(all);
    report
}

fn train_report(
    cfg: &RunConfig,
    resolved: Value,
    summary: &DataSummary,
    history: &TrainingHistory,
    checkpoint: &Path,
    extra: Value,
) -> Result<Value, CliError> {
    Ok(json!({
        "command": "train",
        "task": cfg.task,
        "config": resolved,
        "corpus_sha256": summary.corpus_sha256,
        "data": summary,
        "checkpoint": checkpoint,
        "checkpoint_sha256": file_sha256(checkpoint)?,
        "history": history,
        "model": extra,
    }))
}

pub fn cmd_train(cfg: &RunConfig, report_dir: &Path) -> Result<(), CliError> {
    let outcome = train_into(cfg, report_dir)?;
    eprintln!("checkpoint {}", outcome.report["checkpoint"].as_str().unwrap_or_default());
    eprintln!("report {}", report_dir.join("report.json").display());
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, sizes: &[usize], report_dir: &Path) -> Result<(), CliError> {
    if cfg.task != Task::Mask {
        return Err(CliError::config(vec!["sweep: task must be \"mask\"".into()]));
    }
    if sizes.is_empty() {
        return Err(CliError::config(vec!["sweep: at least one vocabulary size is required".into()]));
    }
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes.dedup();
    create_dir(report_dir)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &size in &sizes {
        let mut run = cfg.clone();
        run.set_vocab_size(size);
        run.eval.checkpoint = None;
        let dir = report_dir.join(format!("vocab-{size}"));
        eprintln!("vocabulary size {size}");
        let outcome = train_into(&run, &dir)?;
        let row = outcome.masker_test.ok_or(ModelError::EmptySplit("test"))?;
        runs.push(json!({"vocab_size": size, "dir": dir, "report": outcome.report}));
        rows.push(row);
    }
    let table = masker_table(&rows);
    println!("{table}");
    let corpus_sha256 = runs[0]["report"]["corpus_sha256"].clone();
    write_json(
        &report_dir.join("sweep.json"),
        &json!({
            "command": "sweep",
            "config": cfg.to_value(),
            "corpus_sha256": corpus_sha256,
            "sizes": sizes,
            "rows": rows,
            "runs": runs,
        }),
    )?;
    write_text(&report_dir.join("sweep.txt"), &table)
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub test: &'a Path,
    pub vocab: Option<&'a Path>,
    pub target_vocab: Option<&'a Path>,
    pub preprocess: bool,
    pub report_dir: &'a Path,
}

fn check_vocab(expected: &Vocabulary, file: Option<&Path>, what: &str) -> Result<(), CliError> {
    let Some(path) = file else { return Ok(()) };
    let given = Vocabulary::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    if given.tokens() != expected.tokens() {
        let first = given.tokens().iter().zip(expected.tokens()).position(|(a, b)| a != b);
        let detail = match first {
            Some(i) => format!("first difference at id {i}"),
            None => format!("{} tokens vs {}", given.len(), expected.len()),
        };
        return Err(ModelError::VocabMismatch(format!(
            "{} does not match the checkpoint's {what} vocabulary ({detail})",
            path.display()
        ))
        .into());
    }
    Ok(())
}

fn require_file(path: &Path) -> Result<(), CliError> {
    match path.is_file() {
        true => Ok(()),
        false => Err(CliError::data(format!("file not found: {}", path.display()))),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    require_file(args.checkpoint)?;
    require_file(args.test)?;
    let ckpt = Checkpoint::load(args.checkpoint).map_err(|e| CliError::data(format!("{}: {e}", args.checkpoint.display())))?;
    let kind = ckpt.manifest.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
    let norm = NormalizationConfig::default();
    let (config, report, table) = match kind.as_str() {
        "classifier" => {
            let trained = TrainedClassifier::from_checkpoint(&ckpt)?;
            check_vocab(&trained.vocab, args.vocab, "")?;
            let mut test = load_labeled_tsv(args.test)?;
            if args.preprocess {
                test = preprocess_examples(&test, &norm).0;
            }
            let report = trained.evaluate(&test)?;
            let table = report.table();
            (serde_json::to_value(trained.model.config()), serde_json::to_value(&report), table)
        }
        "masker" => {
            let trained = TrainedMasker::from_checkpoint(&ckpt)?;
            check_vocab(trained.model.source_vocab(), args.vocab, "source")?;
            check_vocab(trained.model.target_vocab(), args.target_vocab, "target")?;
            let mut pairs = load_parallel(args.test)?;
            if args.preprocess {
                let tgt = target_normalization(&norm);
                pairs = pairs
                    .iter()
                    .map(|p| ParallelPair::new(preprocess(&p.source, &norm), preprocess(&p.target, &tgt)))
                    .collect();
            }
            let report = evaluate_masker(&trained.model, &pairs)?;
            let table = masker_table(std::slice::from_ref(&report));
            (serde_json::to_value(trained.model.config()), serde_json::to_value(&report), table)
        }
        other => return Err(CliError::data(format!("{}: unknown checkpoint kind {other:?}", args.checkpoint.display()))),
    };
    let to_data = |e: serde_json::Error| CliError::data(e.to_string());
    println!("{table}");
    create_dir(args.report_dir)?;
    let path = args.report_dir.join("eval_report.json");
    write_json(
        &path,
        &json!({
            "command": "eval",
            "task": if kind == "classifier" { "detect" } else { "mask" },
            "config": config.map_err(to_data)?,
            "checkpoint": args.checkpoint,
            "checkpoint_sha256": file_sha256(args.checkpoint)?,
            "corpus": args.test,
            "corpus_sha256": file_sha256(args.test)?,
            "report": report.map_err(to_data)?,
        }),
    )?;
    eprintln!("report {}", path.display());
    Ok(())
}
