//! Trains two MoE-LoRA runs from different seeds, projects their checkpoint
//! trajectories onto two principal components and compares them layer by layer.
//! CSV goes to stdout.

use moe_embed::data::{generate_conflict_dataset, ConflictSpec};
use moe_embed::diagnostics::{
    convergence_export, layer_cosine, project_runs, series_from_evals, write_convergence_csv, write_similarity_csv,
    write_trajectory_csv, RunTrajectory,
};
use moe_embed::encoder::{Encoder, EncoderConfig};
use moe_embed::moe_lora::{AdapterConfig, AdapterKind};
use moe_embed::trainer::{adapters_from_checkpoint, run, LossKind, RunOptions, TrainConfig};

fn main() -> moe_embed::Result<()> {
    let data = generate_conflict_dataset(&ConflictSpec::new(2, 100, 64, 2))?;
    let enc = Encoder::build_frozen(EncoderConfig {
        vocab_size: 64,
        model_dim: 16,
        num_layers: 2,
        ffn_dim: 32,
        max_seq_len: 8,
        ..EncoderConfig::default()
    })?;
    let mut trajectories = Vec::new();
    let mut finals = Vec::new();
    let mut series = Vec::new();
    for seed in [1, 2] {
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            total_steps: 100,
            batch_size: 16,
            t_warmup: 50,
            loss: LossKind::Staged,
            adapter: AdapterConfig { kind: AdapterKind::Moe, num_experts: 2, rank: 2, alpha: 4.0, ..AdapterConfig::default() },
            seed,
            ..TrainConfig::default()
        };
        let opts = RunOptions { checkpoint_every: 20, keep_checkpoints: true, eval_data: Some(&data), ..Default::default() };
        let out = run(&enc, &cfg, &data, &opts)?;
        let label = format!("seed{seed}");
        let mut points = Vec::new();
        for (step, ckpt) in out.checkpoint_steps.iter().zip(&out.checkpoints) {
            points.push((*step, adapters_from_checkpoint(ckpt, enc.config(), &cfg)?.flatten()));
        }
        trajectories.push(RunTrajectory { label: label.clone(), checkpoints: points });
        series.extend(series_from_evals(&label, &out.evals));
        finals.push((label, out.state.adapters));
    }

    let proj = project_runs(&trajectories)?;
    eprintln!("explained variance {:.3}", proj.explained_variance);
    write_trajectory_csv(&proj, std::io::stdout())?;
    let sim = layer_cosine(&finals[0].1, &finals[1].1)?;
    write_similarity_csv(&[(finals[0].0.clone(), finals[1].0.clone(), sim)], std::io::stdout())?;
    write_convergence_csv(&convergence_export(&series, false)?, std::io::stdout())?;
    Ok(())
}
