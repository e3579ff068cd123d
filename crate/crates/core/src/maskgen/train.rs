use hatemask_nn::{adam_step, AdamState, EarlyStopping, Graph, Tensor, TrainingPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{prepare_pairs, MaskerModel, PreparedPairs, TrainedMasker};
use crate::corpus::ParallelPair;
use crate::error::{ModelError, Result};
use crate::history::{shuffled, EpochRecord, TrainingHistory};

const EVAL_CHUNK: usize = 64;

/// Token-level argmax hits and valid-token count for one batch of logits.
fn token_hits(logits: &Tensor, labels: &[usize], valid: &[bool]) -> (usize, usize) {
    let mut hits = 0;
    let mut count = 0;
    for (i, (&label, &ok)) in labels.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        count += 1;
        if super::decode::argmax(logits.row(i)) == label {
            hits += 1;
        }
    }
    (hits, count)
}

/// Teacher-forced Adam training on masked cross-entropy plus L2, one epoch
/// at a time, with optional patience on dev loss.
pub struct MaskerTrainer {
    model: MaskerModel,
    policy: TrainingPolicy,
    train: PreparedPairs,
    dev: Option<PreparedPairs>,
    adam: AdamState,
    rng: ChaCha8Rng,
    stopper: Option<EarlyStopping>,
    best: Option<Vec<Tensor>>,
    history: TrainingHistory,
}

impl MaskerTrainer {
    pub fn new(model: MaskerModel, train: &[ParallelPair], dev: &[ParallelPair], policy: &TrainingPolicy) -> Result<Self> {
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
        let l = model.config().seq_len;
        let train = prepare_pairs(train, model.source_vocab(), model.target_vocab(), l)?;
        let dev = if dev.is_empty() { None } else { Some(prepare_pairs(dev, model.source_vocab(), model.target_vocab(), l)?) };
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

    pub fn model(&self) -> &MaskerModel {
        &self.model
    }

    pub fn history(&self) -> &TrainingHistory {
        &self.history
    }

    pub fn finished(&self) -> bool {
        self.history.epochs.len() >= self.policy.max_epochs || self.history.stopped_early
    }

    /// Token-weighted mean loss and token accuracy in inference mode.
    pub fn loss_and_accuracy(model: &MaskerModel, data: &PreparedPairs) -> Result<(f64, f64)> {
        let rows: Vec<usize> = (0..data.len()).collect();
        let (mut loss, mut hits, mut count) = (0.0, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in rows.chunks(EVAL_CHUNK) {
            let b = data.gather(chunk);
            if !b.label_valid.iter().any(|&v| v) {
                continue;
            }
            let mut g = Graph::new();
            let logits = model.forward(&mut g, &b.source, &b.decoder_input, false, &mut rng)?;
            let (h, c) = token_hits(g.value(logits), &b.labels, &b.label_valid);
            let l = g.masked_cross_entropy(logits, &b.labels, &b.label_valid)?;
            loss += g.value(l).item() * c as f64;
            hits += h;
            count += c;
        }
        let count = count.max(1) as f64;
        Ok((loss / count, hits as f64 / count))
    }

    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let order = shuffled(self.train.len(), &mut self.rng);
        let (mut loss_sum, mut hits, mut count) = (0.0, 0, 0);
        for rows in order.chunks(self.policy.batch_size) {
            let b = self.train.gather(rows);
            if !b.label_valid.iter().any(|&v| v) {
                continue;
            }
            self.model.params_mut().zero_grads();
            let mut g = Graph::new();
            let logits = self.model.forward(&mut g, &b.source, &b.decoder_input, true, &mut self.rng)?;
            let (h, c) = token_hits(g.value(logits), &b.labels, &b.label_valid);
            let data_loss = g.masked_cross_entropy(logits, &b.labels, &b.label_valid)?;
            loss_sum += g.value(data_loss).item() * c as f64;
            hits += h;
            count += c;
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
        let epoch = self.history.epochs.len() + 1;
        let (dev_loss, dev_accuracy) = match &self.dev {
            Some(dev) => {
                let (l, a) = Self::loss_and_accuracy(&self.model, dev)?;
                (Some(l), Some(a))
            }
            None => (None, None),
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
        let count = count.max(1) as f64;
        self.history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count,
            train_accuracy: Some(hits as f64 / count),
            dev_loss,
            dev_accuracy,
        });
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    /// Ends training, restoring the weights of the best dev epoch when
    /// early stopping was on.
    pub fn finish(mut self) -> Result<TrainedMasker> {
        if let Some(best) = self.best.take() {
            self.model.params_mut().restore(best)?;
        }
        Ok(TrainedMasker { model: self.model, history: self.history })
    }
}

/// Trains until `max_epochs` or until dev loss has not improved for
/// `early_stop_patience` epochs, then restores the best weights.
pub fn train_masker(
    model: MaskerModel,
    train: &[ParallelPair],
    dev: &[ParallelPair],
    policy: &TrainingPolicy,
) -> Result<TrainedMasker> {
    let mut trainer = MaskerTrainer::new(model, train, dev, policy)?;
    while !trainer.finished() {
        trainer.run_epoch()?;
    }
    trainer.finish()
}
