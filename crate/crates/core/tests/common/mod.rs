#![allow(dead_code)]

use moe_embed::data::{generate_conflict_dataset, ConflictSpec, PairDataset};
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind, LayerMask, RoutingSignature};
use moe_embed::numcore::{RngState, Tensor};
use moe_embed::trainer::{LossKind, TrainConfig};

pub fn tiny_encoder(num_layers: usize) -> Encoder {
    Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 8,
        num_layers,
        ffn_dim: 16,
        max_seq_len: 8,
        ..EncoderConfig::default()
    })
    .unwrap()
}

pub fn tiny_data(per_task: usize, seed: u64) -> PairDataset {
    generate_conflict_dataset(&ConflictSpec::new(2, per_task, 64, seed)).unwrap()
}

pub fn tiny_train(kind: AdapterKind, experts: usize, loss: LossKind, steps: usize, t_warmup: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-3,
        total_steps: steps,
        batch_size: 6,
        t_warmup,
        loss,
        adapter: AdapterConfig {
            kind,
            num_experts: experts,
            rank: 2,
            alpha: 4.0,
            gate_init_std: 0.5,
            ..AdapterConfig::default()
        },
        temperature: 0.1,
        seed: 3,
        ..TrainConfig::default()
    }
}

/// Random signature: every slot a normalized positive vector, or one-hot.
pub fn random_signature(l: usize, g: usize, n: usize, rng: &mut RngState) -> RoutingSignature {
    let mut values = Vec::with_capacity(l * g * n);
    for _ in 0..l * g {
        let raw: Vec<f64> = (0..n).map(|_| rng.next_f64() + 1e-9).collect();
        let s: f64 = raw.iter().sum();
        values.extend(raw.iter().map(|v| v / s));
    }
    RoutingSignature {
        values: Tensor::new(vec![l, g, n], values).unwrap(),
        layer_mask: LayerMask::all(l),
    }
}

pub fn one_hot_signature(l: usize, g: usize, n: usize, hot: usize) -> RoutingSignature {
    let values = (0..l * g * n).map(|i| if i % n == hot { 1.0 } else { 0.0 }).collect();
    RoutingSignature {
        values: Tensor::new(vec![l, g, n], values).unwrap(),
        layer_mask: LayerMask::all(l),
    }
}

/// `rows` unit vectors of dimension `d`.
pub fn unit_rows(rows: usize, d: usize, rng: &mut RngState) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let r: Vec<f64> = (0..d).map(|_| rng.normal_pair().0).collect();
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(r.iter().map(|x| x / n));
    }
    Tensor::new(vec![rows, d], data).unwrap()
}
