//! Run configuration: a JSON file with `data`, `model`, `training` and
//! `eval` sections. Parsing walks the document by hand so that every
//! problem is reported in one pass.

use std::path::{Path, PathBuf};

use hatemask_core::corpus::SplitSpec;
use hatemask_core::detect::{Arch, ClassifierConfig};
use hatemask_core::maskgen::Seq2SeqConfig;
use hatemask_core::text::NormalizationConfig;
use hatemask_nn::TrainingPolicy;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Labeled,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub lexicon_size: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSection {
    pub corpus: Option<PathBuf>,
    pub format: CorpusFormat,
    pub lexicon: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub split: Option<SplitSpec>,
    pub vocab_size: usize,
    pub preprocess: bool,
    pub normalization: NormalizationConfig,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSection {
    pub report_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSection {
    Detect(ClassifierConfig),
    Mask(Seq2SeqConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub eval: EvalSection,
}

const TOP_KEYS: &[&str] = &["task", "seed", "data", "model", "training", "eval"];
const DATA_KEYS: &[&str] =
    &["corpus", "format", "lexicon", "synthetic", "split", "vocab_size", "preprocess", "normalization", "embeddings"];
const DETECT_MODEL_KEYS: &[&str] = &[
    "arch",
    "seq_len",
    "embed_dim",
    "embed_dropout",
    "dropout",
    "conv_filters",
    "conv_kernel",
    "pool_size",
    "lstm_units",
    "dense_units",
];
const MASK_MODEL_KEYS: &[&str] =
    &["seq_len", "embed_dim", "heads", "ff_dim", "encoder_layers", "decoder_layers", "dropout"];
const TRAINING_KEYS: &[&str] = &["batch_size", "max_epochs", "early_stop_patience", "l2_lambda", "learning_rate"];
const EVAL_KEYS: &[&str] = &["report_dir", "checkpoint"];

struct Section<'a> {
    name: &'static str,
    map: Option<&'a Map<String, Value>>,
}

impl<'a> Section<'a> {
    fn of(root: &'a Map<String, Value>, name: &'static str, allowed: &[&str], errors: &mut Vec<String>) -> Self {
        let map = match root.get(name) {
            None | Some(Value::Null) => None,
            Some(Value::Object(m)) => Some(m),
            Some(_) => {
                errors.push(format!("{name}: expected an object"));
                None
            }
        };
        if let Some(m) = map {
            for key in m.keys().filter(|k| !allowed.contains(&k.as_str())) {
                errors.push(format!("{name}.{key}: unknown key"));
            }
        }
        Self { name, map }
    }

    fn get<T: DeserializeOwned>(&self, key: &str, errors: &mut Vec<String>) -> Option<T> {
        let value = self.map?.get(key).filter(|v| !v.is_null())?;
        match serde_json::from_value(value.clone()) {
            Ok(v) => Some(v),
            Err(e) => {
                errors.push(format!("{}.{key}: {e}", self.name));
                None
            }
        }
    }

    fn set<T: DeserializeOwned>(&self, key: &str, slot: &mut T, errors: &mut Vec<String>) {
        if let Some(v) = self.get(key, errors) {
            *slot = v;
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(vec![format!("{}: not valid JSON: {e}", path.display())]))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self, CliError> {
        let mut errors = Vec::new();
        let Some(root) = value.as_object() else {
            return Err(CliError::config(vec!["configuration must be a JSON object".into()]));
        };
        for key in root.keys().filter(|k| !TOP_KEYS.contains(&k.as_str())) {
            errors.push(format!("{key}: unknown key"));
        }
        let task: Option<Task> = match root.get("task") {
            None => {
                errors.push("task: missing; expected \"detect\" or \"mask\"".into());
                None
            }
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|_| errors.push(format!("task: expected \"detect\" or \"mask\", found {v}")))
                .ok(),
        };
        let seed = match root.get("seed") {
            None => 42,
            Some(v) => v.as_u64().unwrap_or_else(|| {
                errors.push(format!("seed: expected a non-negative integer, found {v}"));
                42
            }),
        };

        let data_sec = Section::of(root, "data", DATA_KEYS, &mut errors);
        let model_keys = match task {
            Some(Task::Mask) => MASK_MODEL_KEYS,
            _ => DETECT_MODEL_KEYS,
        };
        let model_sec = Section::of(root, "model", model_keys, &mut errors);
        let training_sec = Section::of(root, "training", TRAINING_KEYS, &mut errors);
        let eval_sec = Section::of(root, "eval", EVAL_KEYS, &mut errors);

        let default_format = match task {
            Some(Task::Mask) => CorpusFormat::Parallel,
            _ => CorpusFormat::Labeled,
        };
        let default_vocab = match task {
            Some(Task::Mask) => 15_000,
            _ => 20_000,
        };
        let data = DataSection {
            corpus: data_sec.get("corpus", &mut errors),
            format: data_sec.get("format", &mut errors).unwrap_or(default_format),
            lexicon: data_sec.get("lexicon", &mut errors),
            synthetic: data_sec.get("synthetic", &mut errors),
            split: data_sec.get("split", &mut errors),
            vocab_size: data_sec.get("vocab_size", &mut errors).unwrap_or(default_vocab),
            preprocess: data_sec.get("preprocess", &mut errors).unwrap_or(true),
            normalization: data_sec.get("normalization", &mut errors).unwrap_or_default(),
            embeddings: data_sec.get("embeddings", &mut errors),
        };
        match (&data.corpus, &data.synthetic) {
            (None, None) => errors.push("data: one of data.corpus or data.synthetic is required".into()),
            (Some(_), Some(_)) => errors.push("data: data.corpus and data.synthetic are mutually exclusive".into()),
            _ => {}
        }
        if task == Some(Task::Mask) && data.format == CorpusFormat::Labeled && data.corpus.is_some() && data.lexicon.is_none() {
            errors.push("data.lexicon: required to derive parallel pairs from a labeled corpus".into());
        }
        if task == Some(Task::Detect) && data.format == CorpusFormat::Parallel {
            errors.push("data.format: the detect task needs a labeled corpus".into());
        }
        if task == Some(Task::Mask) && data.embeddings.is_some() {
            errors.push("data.embeddings: only supported for the detect task".into());
        }

        let model = match task.unwrap_or(Task::Detect) {
            Task::Detect => {
                let arch = match model_sec.get::<String>("arch", &mut errors) {
                    None => Arch::Cnn,
                    Some(name) => name.parse().unwrap_or_else(|e: String| {
                        errors.push(format!("model.arch: {e}"));
                        Arch::Cnn
                    }),
                };
                let mut cfg = ClassifierConfig::paper(arch);
                cfg.vocab_size = data.vocab_size;
                model_sec.set("seq_len", &mut cfg.seq_len, &mut errors);
                model_sec.set("embed_dim", &mut cfg.embed_dim, &mut errors);
                model_sec.set("embed_dropout", &mut cfg.embed_dropout, &mut errors);
                model_sec.set("dropout", &mut cfg.dropout, &mut errors);
                model_sec.set("conv_filters", &mut cfg.conv_filters, &mut errors);
                model_sec.set("conv_kernel", &mut cfg.conv_kernel, &mut errors);
                model_sec.set("pool_size", &mut cfg.pool_size, &mut errors);
                model_sec.set("lstm_units", &mut cfg.lstm_units, &mut errors);
                model_sec.set("dense_units", &mut cfg.dense_units, &mut errors);
                apply_training(&training_sec, &mut cfg.training, seed, &mut errors);
                errors.extend(cfg.validate());
                ModelSection::Detect(cfg)
            }
            Task::Mask => {
                let mut cfg = Seq2SeqConfig {
                    source_vocab_size: data.vocab_size,
                    target_vocab_size: data.vocab_size,
                    ..Seq2SeqConfig::default()
                };
                model_sec.set("seq_len", &mut cfg.seq_len, &mut errors);
                model_sec.set("embed_dim", &mut cfg.embed_dim, &mut errors);
                model_sec.set("heads", &mut cfg.heads, &mut errors);
                model_sec.set("ff_dim", &mut cfg.ff_dim, &mut errors);
                model_sec.set("encoder_layers", &mut cfg.encoder_layers, &mut errors);
                model_sec.set("decoder_layers", &mut cfg.decoder_layers, &mut errors);
                model_sec.set("dropout", &mut cfg.dropout, &mut errors);
                apply_training(&training_sec, &mut cfg.training, seed, &mut errors);
                errors.extend(cfg.validate());
                ModelSection::Mask(cfg)
            }
        };

        let eval = EvalSection {
            report_dir: eval_sec.get("report_dir", &mut errors),
            checkpoint: eval_sec.get("checkpoint", &mut errors),
        };

        match task {
            Some(task) if errors.is_empty() => Ok(Self { task, seed, data, model, eval }),
            _ => Err(CliError::config(errors)),
        }
    }

    /// Applies a `--seed` override to both the run and its training policy.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training_mut().seed = seed;
    }

    pub fn set_vocab_size(&mut self, size: usize) {
        self.data.vocab_size = size;
        match &mut self.model {
            ModelSection::Detect(cfg) => cfg.vocab_size = size,
            ModelSection::Mask(cfg) => {
                cfg.source_vocab_size = size;
                cfg.target_vocab_size = size;
            }
        }
    }

    pub fn training(&self) -> &TrainingPolicy {
        match &self.model {
            ModelSection::Detect(cfg) => &cfg.training,
            ModelSection::Mask(cfg) => &cfg.training,
        }
    }

    pub fn training_mut(&mut self) -> &mut TrainingPolicy {
        match &mut self.model {
            ModelSection::Detect(cfg) => &mut cfg.training,
            ModelSection::Mask(cfg) => &mut cfg.training,
        }
    }

    /// The configuration with every default filled in, in the same shape
    /// the loader accepts.
    pub fn to_value(&self) -> Value {
        let model = match &self.model {
            ModelSection::Detect(c) => json!({
                "arch": c.arch.name(),
                "seq_len": c.seq_len,
                "embed_dim": c.embed_dim,
                "embed_dropout": c.embed_dropout,
                "dropout": c.dropout,
                "conv_filters": c.conv_filters,
                "conv_kernel": c.conv_kernel,
                "pool_size": c.pool_size,
                "lstm_units": c.lstm_units,
                "dense_units": c.dense_units,
            }),
            ModelSection::Mask(c) => json!({
                "seq_len": c.seq_len,
                "embed_dim": c.embed_dim,
                "heads": c.heads,
                "ff_dim": c.ff_dim,
                "encoder_layers": c.encoder_layers,
                "decoder_layers": c.decoder_layers,
                "dropout": c.dropout,
            }),
        };
        let t = self.training();
        json!({
            "task": self.task,
            "seed": self.seed,
            "data": self.data,
            "model": model,
            "training": {
                "batch_size": t.batch_size,
                "max_epochs": t.max_epochs,
                "early_stop_patience": t.early_stop_patience,
                "l2_lambda": t.l2_lambda,
                "learning_rate": t.learning_rate,
            },
            "eval": self.eval,
        })
    }
}

fn apply_training(sec: &Section, policy: &mut TrainingPolicy, seed: u64, errors: &mut Vec<String>) {
    sec.set("batch_size", &mut policy.batch_size, errors);
    sec.set("max_epochs", &mut policy.max_epochs, errors);
    if let Some(map) = sec.map {
        if map.contains_key("early_stop_patience") {
            policy.early_stop_patience = sec.get("early_stop_patience", errors).flatten();
        }
    }
    sec.set("l2_lambda", &mut policy.l2_lambda, errors);
    sec.set("learning_rate", &mut policy.learning_rate, errors);
    policy.seed = seed;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors_of(value: Value) -> Vec<String> {
        match RunConfig::from_value(&value) {
            Err(CliError::Config(errors)) => errors,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_detect_config_takes_published_defaults() {
        let cfg = RunConfig::from_value(&json!({"task": "detect", "data": {"corpus": "x.tsv"}})).unwrap();
        let ModelSection::Detect(model) = &cfg.model else { panic!("wrong task") };
        assert_eq!(model, &ClassifierConfig::paper(Arch::Cnn));
        assert_eq!(cfg.data.format, CorpusFormat::Labeled);
        assert!(cfg.data.preprocess);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::from_value(&json!({
            "task": "mask",
            "seed": 7,
            "data": {"synthetic": {"n": 40, "lexicon_size": 4, "vocab_size": 30}, "vocab_size": 100},
            "model": {"seq_len": 10, "embed_dim": 32, "heads": 4},
            "training": {"early_stop_patience": null, "max_epochs": 3},
        }))
        .unwrap();
        assert_eq!(cfg.training().seed, 7);
        assert_eq!(cfg.training().early_stop_patience, None);
        let again = RunConfig::from_value(&cfg.to_value()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn all_problems_are_reported_together() {
        let errors = errors_of(json!({
            "task": "detect",
            "colour": 1,
            "data": {"corpus": "x.tsv", "vocab": 3},
            "model": {"arch": "LSTM", "dropout": 1.5},
            "training": {"batch_size": "big"},
        }));
        let joined = errors.join("\n");
        for needle in ["colour", "data.vocab", "model.arch", "model.dropout", "training.batch_size"] {
            assert!(joined.contains(needle), "missing {needle} in {joined}");
        }
    }

    #[test]
    fn task_specific_keys_are_checked() {
        let errors = errors_of(json!({"task": "mask", "data": {"corpus": "p.tsv"}, "model": {"arch": "CNN"}}));
        assert_eq!(errors, vec!["model.arch: unknown key".to_string()]);
    }

    #[test]
    fn data_source_is_required_and_exclusive() {
        let none = errors_of(json!({"task": "detect"}));
        assert!(none[0].contains("one of data.corpus or data.synthetic"));
        let both = errors_of(json!({
            "task": "detect",
            "data": {"corpus": "x", "synthetic": {"n": 1, "lexicon_size": 1, "vocab_size": 1}},
        }));
        assert!(both[0].contains("mutually exclusive"));
    }

    #[test]
    fn seed_override_reaches_training_policy() {
        let mut cfg = RunConfig::from_value(&json!({"task": "detect", "data": {"corpus": "x"}})).unwrap();
        cfg.set_seed(99);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.training().seed, 99);
    }
}
