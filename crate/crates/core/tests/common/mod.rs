#![allow(dead_code)]

use cbit_core::data::{EvalCase, EvalSplit, InteractionDataset, FIRST_ITEM};
use cbit_core::encoder::ModelConfig;
use cbit_core::objectives::ObjectiveConfig;
use cbit_core::training::TrainConfig;

/// User `u` walks the catalogue cyclically from item `u mod items`, for
/// `8 + u mod 5` steps, so the next item is always the successor.
pub fn cyclic_dataset(users: usize, items: usize) -> InteractionDataset {
    let seqs = (0..users)
        .map(|u| {
            let start = u % items;
            (0..8 + u % 5).map(|k| FIRST_ITEM + (start + k) % items).collect()
        })
        .collect();
    InteractionDataset::from_dense(seqs, items).unwrap()
}

/// Predict the last training item from the ones before it.
pub fn training_target_cases(split: &EvalSplit) -> Vec<EvalCase> {
    split
        .train
        .iter()
        .enumerate()
        .map(|(u, s)| EvalCase {
            user: u,
            context: s[..s.len() - 1].to_vec(),
            target: s[s.len() - 1],
        })
        .collect()
}

pub fn small_model(num_items: usize) -> ModelConfig {
    ModelConfig {
        max_len: 8,
        dim: 32,
        layers: 2,
        heads: 2,
        num_items,
        dropout: 0.1,
        key_padding_mask: false,
        init_std: 0.02,
    }
}

pub fn small_training(epochs: usize, views: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        learning_rate: 5e-3,
        decay_every: 1000,
        objective: ObjectiveConfig {
            num_views: views,
            ..ObjectiveConfig::default()
        },
        seed,
        ..TrainConfig::default()
    }
}
