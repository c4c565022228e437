//! Stops a run halfway, reloads the checkpoint from disk and finishes it,
//! then checks the result against an uninterrupted run.

use moe_embed::data::{generate_conflict_dataset, ConflictSpec};
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind};
use moe_embed::trainer::{checkpoint_path, config_digest, run, run_from, Checkpoint, LossKind, RunOptions, TrainConfig, TrainState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 50, 64, 5))?;
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
        total_steps: 40,
        batch_size: 8,
        t_warmup: 10,
        loss: LossKind::Staged,
        adapter: AdapterConfig { kind: AdapterKind::Moe, num_experts: 2, rank: 2, alpha: 4.0, ..AdapterConfig::default() },
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let opts = RunOptions { checkpoint_every: 10, out_dir: Some(dir.path().to_path_buf()), ..Default::default() };

    let full = run(&enc, &cfg, &data, &RunOptions { out_dir: None, ..opts.clone() })?;
    run(&enc, &cfg, &data, &RunOptions { stop_at: Some(20), ..opts.clone() })?;
    let path = checkpoint_path(dir.path(), 20);
    let ckpt = Checkpoint::load_compatible(&path, &config_digest(enc.config(), &cfg))?;
    println!("loaded {} ({} records)", path.display(), ckpt.records.len());
    let resumed = run_from(&enc, &cfg, &data, TrainState::from_checkpoint(&ckpt, enc.config(), &cfg)?, &RunOptions { out_dir: None, ..opts })?;

    let same = resumed.state == full.state;
    println!("final loss uninterrupted {:.6}  resumed {:.6}", full.metrics[39].loss, resumed.metrics.last().unwrap().loss);
    println!("parameters identical: {same}");
    Ok(())
}
