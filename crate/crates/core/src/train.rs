//! Memorization training: full fine-tuning of every parameter on the
//! output tokens of the training splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{LabeledSequence, ParameterSet, TransformerModel};
use crate::tensor::{argmax, AdamW, OptimizerConfig, Tape};

/// Splits the model is trained on. HOLDOUT stays unseen so it can serve as
/// the non-member population.
pub const TRAINING_SPLITS: [Split; 3] = [Split::Forget, Split::Retain, Split::Utility];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Upper bound on passes over the training set.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Stop once this fraction of training sequences is reproduced exactly
    /// under teacher forcing.
    pub target_accuracy: f64,
    /// Epoch interval between accuracy checks.
    pub check_every: usize,
    /// Linear warmup length; afterwards the rate follows a cosine down to
    /// `min_lr_fraction` of the base rate at `max_epochs`.
    pub warmup_epochs: usize,
    pub min_lr_fraction: f64,
    /// Global gradient-norm cap.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 16,
            optimizer: OptimizerConfig { learning_rate: 2e-3, ..OptimizerConfig::default() },
            target_accuracy: 1.0,
            check_every: 5,
            warmup_epochs: 2,
            min_lr_fraction: 0.1,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate at optimizer step `step` of `total` steps.
    pub fn learning_rate_at(&self, step: usize, total: usize, steps_per_epoch: usize) -> f64 {
        let base = self.optimizer.learning_rate;
        let warmup = self.warmup_epochs * steps_per_epoch;
        if step < warmup {
            return base * (step + 1) as f64 / warmup as f64;
        }
        let span = total.saturating_sub(warmup).max(1);
        let progress = ((step - warmup) as f64 / span as f64).min(1.0);
        let floor = self.min_lr_fraction;
        base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 || self.check_every == 0 {
            return Err(Error::Contract("max_epochs, batch_size and check_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) || self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Contract("min_lr_fraction must lie in [0, 1] and grad_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::Contract(format!("target_accuracy {} outside [0, 1]", self.target_accuracy)));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    /// Mean over batches of the per-sequence output NLL.
    pub mean_loss: f64,
    /// Teacher-forced exact-reproduction rate, on check epochs.
    pub accuracy: Option<f64>,
}

pub fn training_sequences(corpus: &Corpus) -> Result<Vec<LabeledSequence>> {
    let mut seqs = Vec::new();
    for split in TRAINING_SPLITS {
        seqs.extend(corpus.labeled_split(split)?);
    }
    Ok(seqs)
}

/// Fraction of `seqs` whose every output token is the argmax under teacher
/// forcing. For such a sequence greedy decoding reproduces the output
/// exactly.
pub fn teacher_forced_accuracy(model: &TransformerModel, seqs: &[&LabeledSequence]) -> Result<f64> {
    const CHUNK: usize = 32;
    if seqs.is_empty() {
        return Err(Error::Contract("no sequences to score".into()));
    }
    let mut exact = 0usize;
    for chunk in seqs.chunks(CHUNK) {
        let tape = Tape::new();
        let (logits, targets, owners) = model.output_logits(&tape, &ParameterSet::default(), chunk)?;
        let z = logits.value();
        let mut ok = vec![true; chunk.len()];
        for (r, (&t, &o)) in targets.iter().zip(&owners).enumerate() {
            if argmax(z.row(r)) != t {
                ok[o] = false;
            }
        }
        exact += ok.iter().filter(|&&b| b).count();
    }
    Ok(exact as f64 / seqs.len() as f64)
}

/// Trains every parameter on `seqs` with shuffled mini-batches until the
/// target accuracy or the epoch limit is reached.
pub fn train_memorization(
    model: &mut TransformerModel,
    seqs: &[LabeledSequence],
    config: &TrainConfig,
) -> Result<Vec<TrainEpoch>> {
    config.validate()?;
    if seqs.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let all = model.all_parameters();
    let mut opt = AdamW::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let refs: Vec<&LabeledSequence> = seqs.iter().collect();
    let steps_per_epoch = seqs.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.max_epochs;
    let mut step = 0;
    let mut history = Vec::new();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledSequence> = idx.iter().map(|&i| &seqs[i]).collect();
            let tape = Tape::new();
            let loss = model.mean_sequence_nll(&tape, &all, &batch)?;
            total += loss.value().item();
            batches += 1;
            let mut grads = tape.backward(loss)?;
            if let Some(c) = config.grad_clip {
                grads.clip_global_norm(c);
            }
            opt.set_learning_rate(config.learning_rate_at(step, total_steps, steps_per_epoch))?;
            opt.step(model.params_mut(&all), &grads)?;
            step += 1;
        }
        let mean_loss = total / batches as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Model(format!("training diverged at epoch {epoch}")));
        }
        let last = epoch + 1 == config.max_epochs;
        let accuracy = if (epoch + 1) % config.check_every == 0 || last {
            Some(teacher_forced_accuracy(model, &refs)?)
        } else {
            None
        };
        log::info!(
            "train epoch {epoch}: loss {mean_loss:.4}{}",
            accuracy.map(|a| format!(", exact {a:.3}")).unwrap_or_default()
        );
        history.push(TrainEpoch { epoch, mean_loss, accuracy });
        if accuracy.is_some_and(|a| a >= config.target_accuracy) {
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn learns_a_tiny_lookup_table() {
        let cfg = ModelConfig { num_layers: 1, d_model: 16, num_heads: 2, d_mlp: 32, vocab_size: 12, max_seq_len: 8, seed: 1 };
        let mut model = TransformerModel::new(cfg).unwrap();
        let seqs: Vec<LabeledSequence> = (1..5u32)
            .map(|i| LabeledSequence::new(&[i, 5], &[6 + i, 0]).unwrap())
            .collect();
        let config = TrainConfig {
            max_epochs: 300,
            batch_size: 4,
            optimizer: OptimizerConfig { learning_rate: 1e-2, ..OptimizerConfig::default() },
            check_every: 10,
            ..TrainConfig::default()
        };
        let hist = train_memorization(&mut model, &seqs, &config).unwrap();
        assert_eq!(hist.last().unwrap().accuracy, Some(1.0));
        for s in &seqs {
            let out = model.greedy_generate(&s.tokens[..2], 4).unwrap();
            assert_eq!(out[2..], s.tokens[2..3]);
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = TrainConfig { warmup_epochs: 2, min_lr_fraction: 0.1, ..TrainConfig::default() };
        let base = c.optimizer.learning_rate;
        assert!((c.learning_rate_at(0, 100, 10) - base / 20.0).abs() < 1e-18);
        assert!((c.learning_rate_at(19, 100, 10) - base).abs() < 1e-18);
        assert!((c.learning_rate_at(20, 100, 10) - base).abs() < 1e-18);
        assert!((c.learning_rate_at(100, 100, 10) - 0.1 * base).abs() < 1e-15);
        let mid = c.learning_rate_at(60, 100, 10);
        assert!((mid - 0.55 * base).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_training_set() {
        let mut model = TransformerModel::new(crate::model::tests::tiny_config()).unwrap();
        assert!(train_memorization(&mut model, &[], &TrainConfig::default()).is_err());
    }
}
