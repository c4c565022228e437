//! Runs the staged objective: InfoNCE for the first `t_warmup` steps, then
//! the routing-weighted loss. Prints the per-step log around the switch.

use moe_embed::data::{generate_conflict_dataset, ConflictSpec};
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind};
use moe_embed::trainer::{run, LossKind, RunOptions, TrainConfig};

fn main() -> moe_embed::Result<()> {
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 100, 64, 1))?;
    let enc = Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 16,
        num_layers: 2,
        ffn_dim: 32,
        max_seq_len: 8,
        ..EncoderConfig::default()
    })?;
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        total_steps: 60,
        batch_size: 16,
        t_warmup: 30,
        loss: LossKind::Staged,
        adapter: AdapterConfig { kind: AdapterKind::Moe, num_experts: 4, rank: 2, alpha: 4.0, gate_init_std: 0.5, ..AdapterConfig::default() },
        ..TrainConfig::default()
    };
    let out = run(&enc, &cfg, &data, &RunOptions { checkpoint_every: 60, ..Default::default() })?;
    for m in out.metrics.iter().filter(|m| m.step % 5 == 0 || (28..33).contains(&m.step)) {
        println!(
            "step {:>3} {:<7} loss {:.4} lr {:.2e} mean_w {:.3} max_w {:.3}",
            m.step, m.stage, m.loss, m.lr, m.mean_w, m.max_w
        );
    }
    Ok(())
}
