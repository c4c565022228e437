//! One seed of the conflict experiment: joint LoRA, joint MoE-LoRA and one
//! LoRA per task, followed by per-task expert utilization of the MoE model.
//! Usage: conflict_experiment [seed] [steps]

use moe_embed::data::{evaluate, generate_conflict_dataset, ConflictSpec, PairDataset};
use moe_embed::diagnostics::expert_utilization;
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind, AdapterSet, SignaturePooling};
use moe_embed::trainer::{run, LossKind, RunOptions, TrainConfig};

fn main() -> moe_embed::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 200, 64, seed))?;
    let enc = Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 32,
        num_layers: 2,
        ffn_dim: 64,
        max_seq_len: 8,
        init_seed: seed,
        ..EncoderConfig::default()
    })?;
    let train = |kind, experts, d: &PairDataset| -> moe_embed::Result<AdapterSet> {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            total_steps: steps,
            batch_size: 32,
            t_warmup: steps,
            loss: LossKind::InfoNce,
            adapter: AdapterConfig { kind, num_experts: experts, rank: 2, alpha: 4.0, ..AdapterConfig::default() },
            temperature: 0.05,
            seed,
            ..TrainConfig::default()
        };
        Ok(run(&enc, &cfg, d, &RunOptions { checkpoint_every: steps, ..Default::default() })?.state.adapters)
    };
    let hit = |a: &AdapterSet, d: &PairDataset| evaluate(&enc, Some(a), d, &[1]).map(|r| r.overall.hit_at_1);

    let lora = train(AdapterKind::Lora, 1, &data)?;
    let moe = train(AdapterKind::Moe, 2, &data)?;
    println!("joint pool: lora {:.3}  moe {:.3}", hit(&lora, &data)?, hit(&moe, &data)?);
    for t in 0..2 {
        let sub = data.task_subset(t);
        let own = train(AdapterKind::Lora, 1, &sub)?;
        println!("task {t} pool: task-specific {:.3}  joint lora {:.3}", hit(&own, &sub)?, hit(&lora, &sub)?);
    }
    let rep = expert_utilization(&enc, &moe, &data, SignaturePooling::Mean)?;
    for t in &rep.tasks {
        println!("task {} dominant experts {:?} entropy {:.3?}", t.task_id, t.dominant_expert, t.entropy);
    }
    println!("dominant expert differs at {:.2} of sites", rep.dominant_disagreement(0, 1).unwrap_or(0.0));
    Ok(())
}
