use hatemask_nn::{adam_step, AdamState, EarlyStopping, Graph, TrainingPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Classifier, TrainedClassifier, EVAL_CHUNK};
use crate::corpus::{DatasetBundle, LabeledExample};
use crate::error::{ModelError, Result};
use crate::history::{shuffled, EpochRecord, TrainingHistory};
use crate::text::{encode, Vocabulary};

/// Examples encoded to fixed-length id rows with 0/1 targets.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSplit {
    pub ids: Vec<usize>,
    pub targets: Vec<f64>,
    pub seq_len: usize,
}

impl EncodedSplit {
    pub fn new(examples: &[LabeledExample], vocab: &Vocabulary, seq_len: usize) -> Self {
        let mut ids = Vec::with_capacity(examples.len() * seq_len);
        for ex in examples {
            ids.extend(encode(&ex.text, vocab, seq_len));
        }
        let targets = examples.iter().map(|e| if e.label.is_offensive() { 1.0 } else { 0.0 }).collect();
        Self { ids, targets, seq_len }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn gather(&self, rows: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let l = self.seq_len;
        let mut ids = Vec::with_capacity(rows.len() * l);
        for &r in rows {
            ids.extend_from_slice(&self.ids[r * l..(r + 1) * l]);
        }
        (ids, rows.iter().map(|&r| self.targets[r]).collect())
    }
}

fn correct(logits: &[f64], targets: &[f64]) -> usize {
    logits.iter().zip(targets).filter(|(&z, &y)| (z > 0.0) == (y > 0.5)).count()
}

/// Mini-batch Adam on binary cross-entropy, one epoch at a time.
pub struct ClassifierTrainer {
    model: Classifier,
    policy: TrainingPolicy,
    train: EncodedSplit,
    dev: EncodedSplit,
    adam: AdamState,
    rng: ChaCha8Rng,
    stopper: Option<EarlyStopping>,
    best: Option<Vec<hatemask_nn::Tensor>>,
    history: TrainingHistory,
}

impl ClassifierTrainer {
    pub fn new(model: Classifier, train: EncodedSplit, dev: EncodedSplit, policy: &TrainingPolicy) -> Result<Self> {
        let errors = policy.validate();
        if !errors.is_empty() {
            return Err(ModelError::InvalidConfig(errors));
        }
        if train.is_empty() {
            return Err(ModelError::EmptySplit("train"));
        }
        if policy.early_stop_patience.is_some() && dev.is_empty() {
            return Err(ModelError::EmptySplit("dev"));
        }
        for split in [&train, &dev] {
            if split.seq_len != model.config.seq_len {
                return Err(ModelError::ConfigMismatch(format!(
                    "split encoded to length {}, model expects {}",
                    split.seq_len, model.config.seq_len
                )));
            }
        }
        let adam = AdamState::new(model.params(), policy.adam());
        Ok(Self {
            model,
            policy: policy.clone(),
            train,
            dev,
            adam,
            rng: ChaCha8Rng::seed_from_u64(policy.seed.wrapping_add(1)),
            stopper: policy.early_stop_patience.map(EarlyStopping::new),
            best: None,
            history: TrainingHistory::default(),
        })
    }

    pub fn model(&self) -> &Classifier {
        &self.model
    }

    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    /// True once `max_epochs` have run or patience is exhausted.
    pub fn finished(&self) -> bool {
        self.history.epochs.len() >= self.policy.max_epochs || self.history.stopped_early
    }

    /// Mean loss and accuracy over a split in inference mode.
    pub fn loss_and_accuracy(model: &Classifier, split: &EncodedSplit) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut hits = 0;
        let rows: Vec<usize> = (0..split.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in rows.chunks(EVAL_CHUNK) {
            let (ids, targets) = split.gather(chunk);
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &ids, false, &mut rng, None)?;
            hits += correct(g.value(logits).data(), &targets);
            let l = g.bce_with_logits(logits, &targets)?;
            loss += g.value(l).item() * chunk.len() as f64;
        }
        let n = split.len() as f64;
        Ok((loss / n, hits as f64 / n))
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let order = shuffled(self.train.len(), &mut self.rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for batch in order.chunks(self.policy.batch_size) {
            let (ids, targets) = self.train.gather(batch);
            self.model.params_mut().zero_grads();
            let mut g = Graph::new();
            let logits = self.model.forward(&mut g, &ids, true, &mut self.rng, None)?;
            hits += correct(g.value(logits).data(), &targets);
            let data_loss = g.bce_with_logits(logits, &targets)?;
            loss_sum += g.value(data_loss).item() * batch.len() as f64;
            let total = if self.policy.l2_lambda > 0.0 {
                let penalty = g.l2_penalty(self.model.params(), self.policy.l2_lambda)?;
                g.add(data_loss, penalty)?
            } else {
                data_loss
            };
            let grads = g.backward(total)?;
            grads.accumulate_into(self.model.params_mut());
            adam_step(self.model.params_mut(), &mut self.adam)?;
        }
        let n = self.train.len() as f64;
        let epoch = self.history.epochs.len() + 1;
        let (dev_loss, dev_accuracy) = if self.dev.is_empty() {
            (None, None)
        } else {
            let (l, a) = Self::loss_and_accuracy(&self.model, &self.dev)?;
            (Some(l), Some(a))
        };
        if let (Some(stopper), Some(loss)) = (self.stopper.as_mut(), dev_loss) {
            if stopper.record(epoch, loss) {
                self.best = Some(self.model.params().snapshot());
                self.history.best_epoch = Some(epoch);
            }
            if stopper.should_stop() {
                self.history.stopped_early = true;
            }
        }
        self.history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: Some(hits as f64 / n),
            dev_loss,
            dev_accuracy,
        });
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    /// Ends training, restoring the best weights when early stopping was on.
    pub fn finish(mut self, vocab: Vocabulary) -> Result<TrainedClassifier> {
        if let Some(best) = self.best.take() {
            self.model.params_mut().restore(best)?;
        }
        Ok(TrainedClassifier { model: self.model, vocab, history: self.history })
    }
}

/// Trains on `bundle.train`, monitoring `bundle.dev` loss. Texts must already
/// be preprocessed.
pub fn train_classifier(
    model: Classifier,
    vocab: Vocabulary,
    bundle: &DatasetBundle<LabeledExample>,
    policy: &TrainingPolicy,
) -> Result<TrainedClassifier> {
    let seq_len = model.config().seq_len;
    let train = EncodedSplit::new(&bundle.train, &vocab, seq_len);
    let dev = EncodedSplit::new(&bundle.dev, &vocab, seq_len);
    let mut trainer = ClassifierTrainer::new(model, train, dev, policy)?;
    while !trainer.finished() {
        trainer.run_epoch()?;
    }
    trainer.finish(vocab)
}
