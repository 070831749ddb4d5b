#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use std::sync::OnceLock;

use unlearn_lab::corpus::{generate_corpus, Corpus, SplitCounts};
use unlearn_lab::model::{ModelConfig, TransformerModel};
use unlearn_lab::tensor::OptimizerConfig;
use unlearn_lab::train::{train_memorization, training_sequences, TrainConfig};

pub fn small_counts() -> SplitCounts {
    SplitCounts { forget: 8, retain: 8, holdout: 4, utility: 4, completions: 2 }
}

/// A small corpus and a model trained on it until it reproduces every
/// training sequence.
pub fn fixture() -> &'static (Corpus, TransformerModel) {
    static FIXTURE: OnceLock<(Corpus, TransformerModel)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let corpus = generate_corpus(5, &small_counts()).unwrap();
        let cfg = ModelConfig {
            num_layers: 3,
            d_model: 32,
            num_heads: 2,
            d_mlp: 64,
            vocab_size: corpus.tokenizer.vocab_size(),
            max_seq_len: 64,
            seed: 5,
        };
        let mut model = TransformerModel::new(cfg).unwrap();
        let train = TrainConfig {
            max_epochs: 300,
            batch_size: 8,
            check_every: 10,
            optimizer: OptimizerConfig { learning_rate: 3e-3, ..OptimizerConfig::default() },
            ..TrainConfig::default()
        };
        let history = train_memorization(&mut model, &training_sequences(&corpus).unwrap(), &train).unwrap();
        let acc = history.iter().rev().find_map(|e| e.accuracy).unwrap();
        assert!(acc >= 0.9, "fixture model only reached {acc}");
        (corpus, model)
    })
}
