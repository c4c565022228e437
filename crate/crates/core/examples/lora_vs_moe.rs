//! Trains a single LoRA adapter and a two-expert MoE-LoRA on the same
//! two-task conflict data and compares retrieval.

use moe_embed::data::{evaluate, generate_conflict_dataset, ConflictSpec};
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind};
use moe_embed::trainer::{run, LossKind, RunOptions, TrainConfig};

fn main() -> moe_embed::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 200, 64, 0))?;
    let enc = Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 32,
        num_layers: 2,
        ffn_dim: 64,
        max_seq_len: 8,
        ..EncoderConfig::default()
    })?;
    let base = evaluate(&enc, None, &data, &[1, 5])?;
    println!("frozen      hit@1 {:.3}", base.overall.hit_at_1);
    for (name, kind, experts) in [("lora", AdapterKind::Lora, 1), ("moe-lora x2", AdapterKind::Moe, 2)] {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            total_steps: steps,
            batch_size: 32,
            t_warmup: steps,
            loss: LossKind::InfoNce,
            adapter: AdapterConfig { kind, num_experts: experts, rank: 2, alpha: 4.0, ..AdapterConfig::default() },
            ..TrainConfig::default()
        };
        let out = run(&enc, &cfg, &data, &RunOptions { checkpoint_every: steps, ..Default::default() })?;
        let res = evaluate(&enc, Some(&out.state.adapters), &data, &[1, 5])?;
        let per_task: Vec<String> = res.per_task.values().map(|m| format!("{:.3}", m.hit_at_1)).collect();
        println!("{name:<11} hit@1 {:.3}  per task [{}]", res.overall.hit_at_1, per_task.join(", "));
    }
    Ok(())
}
