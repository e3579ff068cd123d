//! Encoder-decoder transformer that rewrites sentences with offensive words
//! replaced by star runs.

mod decode;
mod train;

use std::path::Path;

use hatemask_nn::layers::{Activation, Dense, LayerNorm, MultiHeadAttention, PositionalEmbedding};
use hatemask_nn::{AttentionMask, Checkpoint, Graph, ParamStore, Tensor, TrainingPolicy, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelPair;
use crate::error::{ModelError, Result};
use crate::history::TrainingHistory;
use crate::text::{build_source_vocab, build_word_vocab, encode, encode_wrapped, Vocabulary, PAD_ID};

pub use decode::{evaluate_masker, greedy_decode, greedy_decode_batch, star_run_lint, Decoded, MaskerReport};
pub use train::{train_masker, MaskerTrainer};

const CHECKPOINT_KIND: &str = "masker";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seq2SeqConfig {
    /// Upper bound on the source vocabulary, specials included.
    pub source_vocab_size: usize,
    /// Upper bound on the target vocabulary, specials included.
    pub target_vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub training: TrainingPolicy,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            source_vocab_size: 15_000,
            target_vocab_size: 15_000,
            seq_len: 25,
            embed_dim: 256,
            heads: 8,
            ff_dim: 2048,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: 0.1,
            training: TrainingPolicy {
                batch_size: 64,
                max_epochs: 30,
                early_stop_patience: Some(2),
                l2_lambda: 1e-4,
                learning_rate: 1e-3,
                seed: 42,
            },
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                errors.push(msg.to_string());
            }
        };
        need(self.source_vocab_size >= 3, "model.source_vocab_size must be >= 3");
        need(self.target_vocab_size >= 5, "model.target_vocab_size must be >= 5");
        need(self.seq_len >= 2, "model.seq_len must be >= 2");
        need(self.embed_dim >= 1, "model.embed_dim must be >= 1");
        need(self.heads >= 1 && self.embed_dim % self.heads.max(1) == 0, "model.embed_dim must be divisible by model.heads");
        need(self.ff_dim >= 1, "model.ff_dim must be >= 1");
        need(self.encoder_layers >= 1, "model.encoder_layers must be >= 1");
        need(self.decoder_layers >= 1, "model.decoder_layers must be >= 1");
        need((0.0..1.0).contains(&self.dropout), "model.dropout must be in [0, 1)");
        errors.extend(self.training.validate());
        errors
    }

    /// Source and target vocabularies built from their own sides of `pairs`.
    pub fn build_vocabularies(&self, pairs: &[ParallelPair]) -> Result<(Vocabulary, Vocabulary)> {
        if pairs.is_empty() {
            return Err(ModelError::EmptyPairList);
        }
        let sources: Vec<&str> = pairs.iter().map(|p| p.source.as_str()).collect();
        let targets: Vec<&str> = pairs.iter().map(|p| p.target.as_str()).collect();
        Ok((build_source_vocab(&sources, self.source_vocab_size)?, build_word_vocab(&targets, self.target_vocab_size)?))
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    inner: Dense,
    outer: Dense,
}

impl FeedForward {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            inner: Dense::new(store, &format!("{name}.ff1"), dim, ff, Activation::Relu, rng),
            outer: Dense::new(store, &format!("{name}.ff2"), ff, dim, Activation::Identity, rng),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, s, x)?;
        Ok(self.outer.forward(g, s, h)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_attention: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attention: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// Per-pass settings threaded through the blocks.
struct Pass<'a, R> {
    batch: usize,
    dropout: f64,
    training: bool,
    rng: &'a mut R,
}

impl<R: Rng> Pass<'_, R> {
    /// `norm(x + dropout(sublayer))`.
    fn residual(&mut self, g: &mut Graph, s: &ParamStore, norm: &LayerNorm, x: Var, sub: Var) -> Result<Var> {
        let sub = g.dropout(sub, self.dropout, self.training, self.rng)?;
        let sum = g.add(x, sub)?;
        Ok(norm.forward(g, s, sum)?)
    }
}

impl EncoderBlock {
    fn forward<R: Rng>(&self, g: &mut Graph, s: &ParamStore, x: Var, mask: &AttentionMask, p: &mut Pass<R>) -> Result<Var> {
        let a = self.attention.forward(g, s, x, x, p.batch, mask)?;
        let h = p.residual(g, s, &self.norm1, x, a)?;
        let f = self.ff.forward(g, s, h)?;
        p.residual(g, s, &self.norm2, h, f)
    }
}

impl DecoderBlock {
    fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        x: Var,
        memory: Var,
        self_mask: &AttentionMask,
        cross_mask: &AttentionMask,
        p: &mut Pass<R>,
    ) -> Result<Var> {
        let a = self.self_attention.forward(g, s, x, x, p.batch, self_mask)?;
        let h1 = p.residual(g, s, &self.norm1, x, a)?;
        let c = self.cross_attention.forward(g, s, h1, memory, p.batch, cross_mask)?;
        let h2 = p.residual(g, s, &self.norm2, h1, c)?;
        let f = self.ff.forward(g, s, h2)?;
        p.residual(g, s, &self.norm3, h2, f)
    }
}

/// Transformer parameters plus the two vocabularies they were built for.
#[derive(Debug, Clone)]
pub struct MaskerModel {
    config: Seq2SeqConfig,
    store: ParamStore,
    source_vocab: Vocabulary,
    target_vocab: Vocabulary,
    source_embed: PositionalEmbedding,
    target_embed: PositionalEmbedding,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: Dense,
}

/// Builds an untrained masker. The embedding tables have one row per
/// vocabulary entry; each vocabulary must fit its configured bound.
pub fn build_seq2seq(cfg: &Seq2SeqConfig, source_vocab: Vocabulary, target_vocab: Vocabulary) -> Result<MaskerModel> {
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(ModelError::InvalidConfig(errors));
    }
    if !target_vocab.has_markers() {
        return Err(ModelError::VocabMismatch("target vocabulary lacks [start]/[end]".into()));
    }
    if source_vocab.len() > cfg.source_vocab_size || target_vocab.len() > cfg.target_vocab_size {
        return Err(ModelError::ConfigMismatch(format!(
            "vocabularies of {} and {} tokens exceed the configured {} and {}",
            source_vocab.len(),
            target_vocab.len(),
            cfg.source_vocab_size,
            cfg.target_vocab_size
        )));
    }
    let (d, l) = (cfg.embed_dim, cfg.seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let mut store = ParamStore::new();
    let source_embed = PositionalEmbedding::new(&mut store, "encoder.embed", source_vocab.len(), l, d, &mut rng);
    let mut encoder = Vec::with_capacity(cfg.encoder_layers);
    for i in 0..cfg.encoder_layers {
        let name = format!("encoder.{i}");
        encoder.push(EncoderBlock {
            attention: MultiHeadAttention::new(&mut store, &format!("{name}.attention"), d, cfg.heads, &mut rng)?,
            norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d),
            ff: FeedForward::new(&mut store, &name, d, cfg.ff_dim, &mut rng),
            norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d),
        });
    }
    let target_embed = PositionalEmbedding::new(&mut store, "decoder.embed", target_vocab.len(), l, d, &mut rng);
    let mut decoder = Vec::with_capacity(cfg.decoder_layers);
    for i in 0..cfg.decoder_layers {
        let name = format!("decoder.{i}");
        decoder.push(DecoderBlock {
            self_attention: MultiHeadAttention::new(&mut store, &format!("{name}.self_attention"), d, cfg.heads, &mut rng)?,
            norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), d),
            cross_attention: MultiHeadAttention::new(&mut store, &format!("{name}.cross_attention"), d, cfg.heads, &mut rng)?,
            norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), d),
            ff: FeedForward::new(&mut store, &name, d, cfg.ff_dim, &mut rng),
            norm3: LayerNorm::new(&mut store, &format!("{name}.norm3"), d),
        });
    }
    let output = Dense::new(&mut store, "decoder.output", d, target_vocab.len(), Activation::Identity, &mut rng);
    Ok(MaskerModel {
        config: cfg.clone(),
        store,
        source_vocab,
        target_vocab,
        source_embed,
        target_embed,
        encoder,
        decoder,
        output,
    })
}

/// Token id tensors for teacher-forced training, all batch-major with
/// `seq_len` ids per pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedPairs {
    pub source: Vec<usize>,
    /// `[start] t1 .. t(N-1)`: the wrapped target without its last slot.
    pub decoder_input: Vec<usize>,
    /// The wrapped target shifted left by one.
    pub labels: Vec<usize>,
    /// False where the label is padding.
    pub label_valid: Vec<bool>,
    pub seq_len: usize,
}

impl PreparedPairs {
    pub fn len(&self) -> usize {
        self.source.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub(crate) fn gather(&self, rows: &[usize]) -> PreparedPairs {
        let l = self.seq_len;
        let pick = |v: &[usize]| rows.iter().flat_map(|&r| v[r * l..(r + 1) * l].iter().copied()).collect::<Vec<_>>();
        PreparedPairs {
            source: pick(&self.source),
            decoder_input: pick(&self.decoder_input),
            labels: pick(&self.labels),
            label_valid: rows.iter().flat_map(|&r| self.label_valid[r * l..(r + 1) * l].iter().copied()).collect(),
            seq_len: l,
        }
    }
}

/// Encodes sources to `seq_len` and targets, wrapped in START/END, to
/// `seq_len + 1`, then splits the targets into decoder inputs and labels.
pub fn prepare_pairs(
    pairs: &[ParallelPair],
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    seq_len: usize,
) -> Result<PreparedPairs> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyPairList);
    }
    let n = pairs.len();
    let mut out = PreparedPairs {
        source: Vec::with_capacity(n * seq_len),
        decoder_input: Vec::with_capacity(n * seq_len),
        labels: Vec::with_capacity(n * seq_len),
        label_valid: Vec::with_capacity(n * seq_len),
        seq_len,
    };
    for p in pairs {
        out.source.extend(encode(&p.source, source_vocab, seq_len));
        let target = encode_wrapped(&p.target, target_vocab, seq_len + 1)?;
        out.decoder_input.extend_from_slice(&target[..seq_len]);
        out.labels.extend_from_slice(&target[1..]);
        out.label_valid.extend(target[1..].iter().map(|&id| id != PAD_ID));
    }
    Ok(out)
}

fn key_mask(ids: &[usize], causal: bool) -> AttentionMask {
    AttentionMask { causal, key_valid: Some(ids.iter().map(|&i| i != PAD_ID).collect()) }
}

impl MaskerModel {
    pub fn config(&self) -> &Seq2SeqConfig {
        &self.config
    }

    pub fn source_vocab(&self) -> &Vocabulary {
        &self.source_vocab
    }

    pub fn target_vocab(&self) -> &Vocabulary {
        &self.target_vocab
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

    fn batch_of(&self, ids: &[usize]) -> Result<usize> {
        let l = self.config.seq_len;
        if ids.is_empty() || ids.len() % l != 0 {
            return Err(ModelError::ConfigMismatch(format!("input of {} ids is not a multiple of seq_len {l}", ids.len())));
        }
        Ok(ids.len() / l)
    }

    /// Encoder output `[batch*seq_len x embed_dim]` for source ids.
    pub(crate) fn encode<R: Rng>(&self, g: &mut Graph, source: &[usize], training: bool, rng: &mut R) -> Result<Var> {
        let batch = self.batch_of(source)?;
        let s = &self.store;
        let mut x = self.source_embed.forward(g, s, source, self.config.seq_len)?;
        let mask = key_mask(source, false);
        let mut pass = Pass { batch, dropout: self.config.dropout, training, rng };
        for block in &self.encoder {
            x = block.forward(g, s, x, &mask, &mut pass)?;
        }
        Ok(x)
    }

    /// Decoder logits `[batch*seq_len x target_vocab]` given encoder output.
    pub(crate) fn decode<R: Rng>(
        &self,
        g: &mut Graph,
        memory: Var,
        source: &[usize],
        decoder_input: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let batch = self.batch_of(decoder_input)?;
        if source.len() != decoder_input.len() {
            return Err(ModelError::ConfigMismatch("source and decoder batches differ".into()));
        }
        let s = &self.store;
        let mut x = self.target_embed.forward(g, s, decoder_input, self.config.seq_len)?;
        let self_mask = key_mask(decoder_input, true);
        let cross_mask = key_mask(source, false);
        let mut pass = Pass { batch, dropout: self.config.dropout, training, rng };
        for block in &self.decoder {
            x = block.forward(g, s, x, memory, &self_mask, &cross_mask, &mut pass)?;
        }
        let x = g.dropout(x, self.config.dropout, training, pass.rng)?;
        Ok(self.output.forward(g, s, x)?)
    }

    /// Full teacher-forced forward pass.
    pub(crate) fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        source: &[usize],
        decoder_input: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let memory = self.encode(g, source, training, rng)?;
        self.decode(g, memory, source, decoder_input, training, rng)
    }

    /// Inference-mode logits for id sequences, as a `[batch*seq_len x vocab]` tensor.
    pub fn logits(&self, source: &[usize], decoder_input: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, source, decoder_input, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(g.value(out).clone())
    }

    /// Inference-mode encoder output for source ids.
    pub fn encoder_output(&self, source: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.encode(&mut g, source, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(g.value(out).clone())
    }

    /// Mean masked cross-entropy of a prepared batch in inference mode.
    pub fn loss(&self, batch: &PreparedPairs) -> Result<f64> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, &batch.source, &batch.decoder_input, false, &mut ChaCha8Rng::seed_from_u64(0))?;
        let loss = g.masked_cross_entropy(logits, &batch.labels, &batch.label_valid)?;
        Ok(g.value(loss).item())
    }
}

/// A masker with the history of the run that produced it.
#[derive(Debug, Clone)]
pub struct TrainedMasker {
    pub model: MaskerModel,
    pub history: TrainingHistory,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: String,
    config: Seq2SeqConfig,
    source_vocab: Vec<String>,
    target_vocab: Vec<String>,
    history: TrainingHistory,
}

impl TrainedMasker {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let m = &self.model;
        let manifest = Manifest {
            kind: CHECKPOINT_KIND.into(),
            config: m.config.clone(),
            source_vocab: m.source_vocab.tokens().to_vec(),
            target_vocab: m.target_vocab.tokens().to_vec(),
            history: self.history.clone(),
        };
        let manifest = serde_json::to_value(manifest).map_err(|e| ModelError::Format { what: "manifest", message: e.to_string() })?;
        Ok(Checkpoint { manifest, tensors: m.store.named_tensors() })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let manifest: Manifest = serde_json::from_value(ckpt.manifest.clone())
            .map_err(|e| ModelError::Format { what: "masker manifest", message: e.to_string() })?;
        if manifest.kind != CHECKPOINT_KIND {
            return Err(ModelError::ConfigMismatch(format!("checkpoint holds a {}, not a masker", manifest.kind)));
        }
        let source = Vocabulary::from_tokens(manifest.source_vocab)?;
        let target = Vocabulary::from_tokens(manifest.target_vocab)?;
        let mut model = build_seq2seq(&manifest.config, source, target)?;
        model.store.load_named(&ckpt.tensors)?;
        Ok(Self { model, history: manifest.history })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path.as_ref())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path.as_ref())?)
    }
}
