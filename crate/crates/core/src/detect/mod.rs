//! Offensive-text classifiers: stacked BiLSTM, CNN and CNN followed by LSTMs.

mod embeddings;
mod train;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hatemask_nn::layers::{Activation, BiLstm, Conv1d, Dense, Embedding, Lstm};
use hatemask_nn::{Checkpoint, Graph, NnError, ParamStore, Tensor, TrainingPolicy, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabeledExample};
use crate::error::{ModelError, Result};
use crate::history::TrainingHistory;
use crate::metrics::EvalReport;
use crate::text::{encode, Vocabulary};

pub use embeddings::{load_pretrained_embeddings, parse_word2vec, EmbeddingCoverage, OOV_INIT_STD};
pub use train::{train_classifier, ClassifierTrainer, EncodedSplit};

/// Classifier probabilities strictly above this are Offensive.
pub const DECISION_THRESHOLD: f64 = 0.5;
const CHECKPOINT_KIND: &str = "classifier";
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "CNN_RNN")]
    CnnRnn,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Rnn, Arch::Cnn, Arch::CnnRnn];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rnn => "RNN",
            Arch::Cnn => "CNN",
            Arch::CnnRnn => "CNN_RNN",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown architecture {s:?}; expected one of RNN, CNN, CNN_RNN"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: Arch,
    /// Embedding rows, including the special tokens.
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    /// Dropout applied to the embedded sequence.
    pub embed_dropout: f64,
    /// Dropout applied to the remaining hidden layers.
    pub dropout: f64,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub pool_size: usize,
    /// RNN: units of the two stacked BiLSTMs. CNN_RNN: BiLSTM then LSTM units.
    pub lstm_units: [usize; 2],
    pub dense_units: usize,
    pub training: TrainingPolicy,
}

impl ClassifierConfig {
    /// Published hyperparameters for each architecture.
    pub fn paper(arch: Arch) -> Self {
        let (embed_dropout, dropout, lstm_units) = match arch {
            Arch::Rnn => (0.0, 0.5, [128, 64]),
            Arch::Cnn => (0.5, 0.5, [128, 128]),
            Arch::CnnRnn => (0.2, 0.2, [128, 128]),
        };
        Self {
            arch,
            vocab_size: 20_000,
            seq_len: 25,
            embed_dim: 300,
            embed_dropout,
            dropout,
            conv_filters: 128,
            conv_kernel: 7,
            pool_size: 2,
            lstm_units,
            dense_units: 128,
            training: TrainingPolicy {
                batch_size: 1024,
                max_epochs: 30,
                early_stop_patience: None,
                l2_lambda: 0.0,
                learning_rate: 1e-3,
                seed: 42,
            },
        }
    }

    pub fn conv_len(&self) -> usize {
        self.seq_len + 1 - self.conv_kernel.min(self.seq_len + 1)
    }

    pub fn pooled_len(&self) -> usize {
        if self.pool_size == 0 {
            0
        } else {
            self.conv_len() / self.pool_size
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errors.push(msg.to_string());
            }
        };
        need(self.vocab_size >= 2, "model.vocab_size must be >= 2");
        need(self.seq_len >= 1, "model.seq_len must be >= 1");
        need(self.embed_dim >= 1, "model.embed_dim must be >= 1");
        need((0.0..1.0).contains(&self.embed_dropout), "model.embed_dropout must be in [0, 1)");
        need((0.0..1.0).contains(&self.dropout), "model.dropout must be in [0, 1)");
        need(self.lstm_units.iter().all(|&u| u >= 1), "model.lstm_units must be >= 1");
        if self.arch != Arch::Rnn {
            need(self.conv_filters >= 1, "model.conv_filters must be >= 1");
            need(self.conv_kernel >= 1, "model.conv_kernel must be >= 1");
        }
        if self.arch == Arch::Cnn {
            need(self.dense_units >= 1, "model.dense_units must be >= 1");
        }
        if self.arch == Arch::CnnRnn {
            need(self.pool_size >= 1, "model.pool_size must be >= 1");
        }
        errors.extend(self.training.validate());
        errors
    }

    fn check_lengths(&self) -> Result<()> {
        if self.arch != Arch::Rnn && self.seq_len < self.conv_kernel {
            return Err(ModelError::InputTooShort { len: self.seq_len, needed: self.conv_kernel });
        }
        if self.arch == Arch::CnnRnn && self.pooled_len() == 0 {
            return Err(ModelError::InputTooShort { len: self.conv_len(), needed: self.pool_size });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body {
    Rnn { first: BiLstm, second: BiLstm },
    Cnn { conv: Conv1d, dense: Dense },
    CnnRnn { conv: Conv1d, bilstm: BiLstm, lstm: Lstm },
}

/// A classifier's parameters and layer wiring. The output layer produces a
/// logit; probabilities are its sigmoid.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    store: ParamStore,
    embedding: Embedding,
    body: Body,
    output: Dense,
}

fn build_checked(cfg: &ClassifierConfig, expected: Arch) -> Result<Classifier> {
    if cfg.arch != expected {
        return Err(ModelError::ConfigMismatch(format!("config arch is {}, builder expects {expected}", cfg.arch)));
    }
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(ModelError::InvalidConfig(errors));
    }
    cfg.check_lengths()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let mut store = ParamStore::new();
    let embedding = Embedding::new(&mut store, "embedding", cfg.vocab_size, cfg.embed_dim, &mut rng);
    store.get_mut(embedding.table).value.data_mut()[..cfg.embed_dim].fill(0.0);
    let [u1, u2] = cfg.lstm_units;
    let (body, width) = match cfg.arch {
        Arch::Rnn => {
            let first = BiLstm::new(&mut store, "bilstm1", cfg.embed_dim, u1, &mut rng);
            let second = BiLstm::new(&mut store, "bilstm2", 2 * u1, u2, &mut rng);
            (Body::Rnn { first, second }, 2 * u2)
        }
        Arch::Cnn => {
            let conv =
                Conv1d::new(&mut store, "conv", cfg.embed_dim, cfg.conv_filters, cfg.conv_kernel, Activation::Relu, &mut rng);
            let dense = Dense::new(&mut store, "dense", cfg.conv_filters, cfg.dense_units, Activation::Relu, &mut rng);
            (Body::Cnn { conv, dense }, cfg.dense_units)
        }
        Arch::CnnRnn => {
            let conv =
                Conv1d::new(&mut store, "conv", cfg.embed_dim, cfg.conv_filters, cfg.conv_kernel, Activation::Relu, &mut rng);
            let bilstm = BiLstm::new(&mut store, "bilstm", cfg.conv_filters, u1, &mut rng);
            let lstm = Lstm::new(&mut store, "lstm", 2 * u1, u2, &mut rng);
            (Body::CnnRnn { conv, bilstm, lstm }, u2)
        }
    };
    let output = Dense::new(&mut store, "output", width, 1, Activation::Identity, &mut rng);
    Ok(Classifier { config: cfg.clone(), store, embedding, body, output })
}

/// Embedding, BiLSTM returning sequences, BiLSTM returning its final state,
/// dropout and a sigmoid unit.
pub fn build_rnn_model(cfg: &ClassifierConfig) -> Result<Classifier> {
    build_checked(cfg, Arch::Rnn)
}

/// Embedding, dropout, ReLU convolution, global max pooling, dense ReLU
/// layer, dropout and a sigmoid unit.
pub fn build_cnn_model(cfg: &ClassifierConfig) -> Result<Classifier> {
    build_checked(cfg, Arch::Cnn)
}

/// Embedding, dropout, ReLU convolution, max pooling, dropout, BiLSTM
/// returning sequences, LSTM returning its final state, dropout and a
/// sigmoid unit.
pub fn build_cnn_rnn_model(cfg: &ClassifierConfig) -> Result<Classifier> {
    build_checked(cfg, Arch::CnnRnn)
}

/// Builds whichever architecture the config names.
pub fn build_classifier(cfg: &ClassifierConfig) -> Result<Classifier> {
    build_checked(cfg, cfg.arch)
}

/// Names and shapes of intermediate activations for one forward pass.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub label: Label,
}

pub fn label_for(probability: f64) -> Label {
    if probability > DECISION_THRESHOLD {
        Label::Offensive
    } else {
        Label::NotOffensive
    }
}

impl Classifier {
    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    /// Replaces the embedding table, e.g. with pretrained vectors.
    pub fn set_embeddings(&mut self, table: Tensor) -> Result<()> {
        let p = self.store.get_mut(self.embedding.table);
        if p.value.shape() != table.shape() {
            return Err(ModelError::Nn(NnError::ShapeMismatch {
                op: "set_embeddings",
                lhs: p.value.shape().to_vec(),
                rhs: table.shape().to_vec(),
            }));
        }
        p.value = table;
        Ok(())
    }

    fn batch_of(&self, ids: &[usize]) -> Result<usize> {
        let l = self.config.seq_len;
        if ids.is_empty() || ids.len() % l != 0 {
            return Err(ModelError::ConfigMismatch(format!("input of {} ids is not a multiple of seq_len {l}", ids.len())));
        }
        Ok(ids.len() / l)
    }

    /// Records the forward pass for `ids` (`batch * seq_len` ids) and returns
    /// the `[batch x 1]` logits.
    pub(crate) fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        ids: &[usize],
        training: bool,
        rng: &mut R,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let l = cfg.seq_len;
        self.batch_of(ids)?;
        let s = &self.store;
        let mut note = |name: &'static str, g: &Graph, v: Var| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((name, g.shape(v).to_vec()));
            }
        };
        let x = self.embedding.forward(g, s, ids)?;
        note("embedding", g, x);
        let x = g.dropout(x, cfg.embed_dropout, training, rng)?;
        let h = match &self.body {
            Body::Rnn { first, second } => {
                let h = first.run(g, s, x, l, true)?;
                note("bilstm1", g, h);
                let h = second.run(g, s, h, l, false)?;
                note("bilstm2", g, h);
                h
            }
            Body::Cnn { conv, dense } => {
                let c = conv.forward(g, s, x, l)?;
                note("conv", g, c);
                let p = g.global_max_pool(c, cfg.conv_len())?;
                note("global_maxpool", g, p);
                let d = dense.forward(g, s, p)?;
                note("dense", g, d);
                d
            }
            Body::CnnRnn { conv, bilstm, lstm } => {
                let c = conv.forward(g, s, x, l)?;
                note("conv", g, c);
                let p = g.max_pool(c, cfg.conv_len(), cfg.pool_size)?;
                note("maxpool", g, p);
                let p = g.dropout(p, cfg.dropout, training, rng)?;
                let pl = cfg.pooled_len();
                let h = bilstm.run(g, s, p, pl, true)?;
                note("bilstm", g, h);
                let h = lstm.forward(g, s, h, pl, false, false)?;
                note("lstm", g, h);
                h
            }
        };
        let h = g.dropout(h, cfg.dropout, training, rng)?;
        let logits = self.output.forward(g, s, h)?;
        note("output", g, logits);
        Ok(logits)
    }

    /// Shapes of each stage for a batch of encoded inputs.
    pub fn shape_trace(&self, ids: &[usize]) -> Result<ShapeTrace> {
        let mut trace = Vec::new();
        let mut g = Graph::new();
        self.forward(&mut g, ids, false, &mut ChaCha8Rng::seed_from_u64(0), Some(&mut trace))?;
        Ok(trace)
    }

    /// Probabilities for `batch * seq_len` encoded ids, in inference mode.
    pub fn predict_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.batch_of(ids)?;
        let l = self.config.seq_len;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(ids.len() / l);
        for chunk in ids.chunks(EVAL_CHUNK * l) {
            let mut g = Graph::new();
            let logits = self.forward(&mut g, chunk, false, &mut rng, None)?;
            out.extend(g.value(logits).data().iter().map(|&z| hatemask_nn::sigmoid_scalar(z)));
        }
        Ok(out)
    }

    /// Probability and label for one preprocessed text.
    pub fn predict(&self, vocab: &Vocabulary, text: &str) -> Result<Prediction> {
        let ids = encode(text, vocab, self.config.seq_len);
        let probability = self.predict_ids(&ids)?[0];
        Ok(Prediction { probability, label: label_for(probability) })
    }
}

/// Metrics of the classifier's predictions on preprocessed examples.
pub fn evaluate_classifier(model: &Classifier, vocab: &Vocabulary, test: &[LabeledExample]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(ModelError::EmptySplit("test"));
    }
    let split = EncodedSplit::new(test, vocab, model.config.seq_len);
    let preds: Vec<Label> = model.predict_ids(&split.ids)?.into_iter().map(label_for).collect();
    let golds: Vec<Label> = test.iter().map(|e| e.label).collect();
    Ok(EvalReport::from_labels(&preds, &golds)?)
}

/// A classifier together with its vocabulary and training history.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: Classifier,
    pub vocab: Vocabulary,
    pub history: TrainingHistory,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    config: ClassifierConfig,
    vocab: Vec<String>,
    history: TrainingHistory,
}

impl TrainedClassifier {
    pub fn predict(&self, text: &str) -> Result<Prediction> {
        self.model.predict(&self.vocab, text)
    }

    pub fn evaluate(&self, test: &[LabeledExample]) -> Result<EvalReport> {
        evaluate_classifier(&self.model, &self.vocab, test)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let manifest = Manifest {
            kind: CHECKPOINT_KIND.into(),
            config: self.model.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            history: self.history.clone(),
        };
        let manifest = serde_json::to_value(manifest).map_err(|e| ModelError::Format { what: "manifest", message: e.to_string() })?;
        Ok(Checkpoint { manifest, tensors: self.model.store.named_tensors() })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let manifest: Manifest = serde_json::from_value(ckpt.manifest.clone())
            .map_err(|e| ModelError::Format { what: "classifier manifest", message: e.to_string() })?;
        if manifest.kind != CHECKPOINT_KIND {
            return Err(ModelError::ConfigMismatch(format!("checkpoint holds a {}, not a classifier", manifest.kind)));
        }
        let vocab = Vocabulary::from_tokens(manifest.vocab)?;
        if vocab.len() != manifest.config.vocab_size {
            return Err(ModelError::VocabMismatch(format!(
                "vocabulary has {} tokens but the model embeds {}",
                vocab.len(),
                manifest.config.vocab_size
            )));
        }
        let mut model = build_classifier(&manifest.config)?;
        model.store.load_named(&ckpt.tensors)?;
        Ok(Self { model, vocab, history: manifest.history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path.as_ref())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests;
