//! Sweeps the share of deepest layers whose routing enters the negative
//! weights, on a four-layer encoder.

use moe_embed::data::{evaluate, generate_conflict_dataset, ConflictSpec};
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind};
use moe_embed::trainer::{run, LossKind, RunOptions, TrainConfig};

fn main() -> moe_embed::Result<()> {
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 100, 64, 4))?;
    let enc = Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 16,
        num_layers: 4,
        ffn_dim: 32,
        max_seq_len: 8,
        ..EncoderConfig::default()
    })?;
    for coverage in [25.0, 50.0, 75.0, 100.0] {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            total_steps: 120,
            batch_size: 16,
            t_warmup: 40,
            loss: LossKind::Staged,
            layer_coverage: coverage,
            adapter: AdapterConfig { kind: AdapterKind::Moe, num_experts: 4, rank: 2, alpha: 4.0, gate_init_std: 0.5, ..AdapterConfig::default() },
            ..TrainConfig::default()
        };
        let out = run(&enc, &cfg, &data, &RunOptions { checkpoint_every: 120, ..Default::default() })?;
        let res = evaluate(&enc, Some(&out.state.adapters), &data, &[1])?;
        let weighted: Vec<_> = out.metrics.iter().filter(|m| m.stage == "eans").collect();
        let max_w = weighted.iter().map(|m| m.max_w).fold(0.0, f64::max);
        println!("coverage {coverage:>5}%: hit@1 {:.3}  largest negative weight {max_w:.3}", res.overall.hit_at_1);
    }
    Ok(())
}
