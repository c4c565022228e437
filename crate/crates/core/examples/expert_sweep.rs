//! Sweeps the number of experts under the staged objective.

use moe_embed::data::{evaluate, generate_conflict_dataset, ConflictSpec};
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind};
use moe_embed::trainer::{run, LossKind, RunOptions, TrainConfig};

fn main() -> moe_embed::Result<()> {
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 100, 64, 3))?;
    let enc = Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 16,
        num_layers: 2,
        ffn_dim: 32,
        max_seq_len: 8,
        ..EncoderConfig::default()
    })?;
    for experts in [1, 2, 4, 8] {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            total_steps: 150,
            batch_size: 16,
            t_warmup: 50,
            loss: LossKind::Staged,
            adapter: AdapterConfig { kind: AdapterKind::Moe, num_experts: experts, rank: 2, alpha: 4.0, ..AdapterConfig::default() },
            ..TrainConfig::default()
        };
        let out = run(&enc, &cfg, &data, &RunOptions { checkpoint_every: 150, ..Default::default() })?;
        let res = evaluate(&enc, Some(&out.state.adapters), &data, &[1, 5])?;
        let last = out.metrics.last().expect("at least one step");
        println!(
            "experts {experts}: params {:>5}  hit@1 {:.3}  final loss {:.4}  router entropy {:.3?}",
            out.state.adapters.num_params(),
            res.overall.hit_at_1,
            last.loss,
            last.router_entropy
        );
    }
    Ok(())
}
