mod common;

use moe_embed::data::{evaluate_embeddings, generate_conflict_dataset, ConflictSpec};
use moe_embed::moe_lora::AdapterKind;
use moe_embed::numcore::{RngState, Tensor};
use moe_embed::trainer::{
    config_digest, read_metrics_jsonl, run, run_from, Checkpoint, LossKind, RunOptions, TrainState,
};
use moe_embed::Error;

#[test]
fn step_zero_loss_matches_across_adapter_kinds() {
    let enc = common::tiny_encoder(2);
    let data = common::tiny_data(8, 2);
    let opts = RunOptions { checkpoint_every: 1, stop_at: Some(1), ..Default::default() };
    let mut losses = Vec::new();
    for (kind, n) in [(AdapterKind::Lora, 1), (AdapterKind::Moe, 2), (AdapterKind::Moe, 4)] {
        let cfg = common::tiny_train(kind, n, LossKind::InfoNce, 5, 5);
        losses.push(run(&enc, &cfg, &data, &opts).unwrap().metrics[0].loss);
    }
    assert!(losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{losses:?}");
}

#[test]
fn frozen_backbone_is_untouched() {
    let enc = common::tiny_encoder(2);
    let before = enc.frozen_checksum();
    let cfg = common::tiny_train(AdapterKind::Moe, 2, LossKind::Staged, 6, 3);
    run(&enc, &cfg, &common::tiny_data(8, 2), &RunOptions { checkpoint_every: 2, ..Default::default() }).unwrap();
    assert_eq!(enc.frozen_checksum(), before);
}

#[test]
fn interval_arithmetic_gives_six_checkpoints() {
    let enc = common::tiny_encoder(1);
    let mut cfg = common::tiny_train(AdapterKind::Lora, 1, LossKind::InfoNce, 500, 500);
    cfg.batch_size = 2;
    let out = run(&enc, &cfg, &common::tiny_data(4, 1), &RunOptions { checkpoint_every: 100, ..Default::default() }).unwrap();
    assert_eq!(out.checkpoint_steps, vec![0, 100, 200, 300, 400, 500]);
}

#[test]
fn stage_flag_flips_once_at_warmup() {
    let enc = common::tiny_encoder(2);
    let cfg = common::tiny_train(AdapterKind::Moe, 2, LossKind::Staged, 10, 4);
    let out = run(&enc, &cfg, &common::tiny_data(8, 2), &RunOptions { checkpoint_every: 5, ..Default::default() }).unwrap();
    let stages: Vec<&str> = out.metrics.iter().map(|m| m.stage.as_str()).collect();
    assert_eq!(stages, [["infonce"; 4].as_slice(), ["eans"; 6].as_slice()].concat());
    for (t, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.step, t);
        assert!((m.lr - cfg.learning_rate * (1.0 - t as f64 / 10.0)).abs() < 1e-12);
    }
}

#[test]
fn single_expert_weights_are_uniform() {
    let enc = common::tiny_encoder(2);
    let cfg = common::tiny_train(AdapterKind::Moe, 1, LossKind::Eans, 5, 0);
    let out = run(&enc, &cfg, &common::tiny_data(8, 2), &RunOptions { checkpoint_every: 5, ..Default::default() }).unwrap();
    for m in &out.metrics {
        assert_eq!(m.stage, "eans");
        assert!((m.mean_w - 1.0).abs() < 1e-12 && (m.max_w - 1.0).abs() < 1e-12, "{m:?}");
    }
}

#[test]
fn metric_log_and_checkpoints_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let enc = common::tiny_encoder(1);
    let data = common::tiny_data(4, 1);
    let cfg = common::tiny_train(AdapterKind::Moe, 2, LossKind::Staged, 4, 2);
    let opts = RunOptions {
        checkpoint_every: 2,
        out_dir: Some(dir.path().to_path_buf()),
        eval_data: Some(&data),
        ..Default::default()
    };
    let out = run(&enc, &cfg, &data, &opts).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(read_metrics_jsonl(&text).unwrap(), out.metrics);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "stage", "loss", "lr", "mean_w", "max_w", "router_entropy"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let evals = std::fs::read_to_string(dir.path().join("reports/evals.jsonl")).unwrap();
    assert_eq!(evals.lines().count(), 3);
    let digest = config_digest(enc.config(), &cfg);
    let last = Checkpoint::load_compatible(dir.path().join("checkpoints/step_000004.ckpt"), &digest).unwrap();
    assert_eq!(last, out.final_checkpoint);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let enc = common::tiny_encoder(2);
    let data = common::tiny_data(8, 4);
    let cfg = common::tiny_train(AdapterKind::Moe, 2, LossKind::Staged, 12, 6);
    let full = run(&enc, &cfg, &data, &RunOptions { checkpoint_every: 4, ..Default::default() }).unwrap();
    let half = run(&enc, &cfg, &data, &RunOptions { checkpoint_every: 4, stop_at: Some(5), ..Default::default() }).unwrap();
    let bytes = half.state.to_checkpoint(config_digest(enc.config(), &cfg)).to_bytes();
    let state = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), enc.config(), &cfg).unwrap();
    let rest = run_from(&enc, &cfg, &data, state, &RunOptions { checkpoint_every: 4, ..Default::default() }).unwrap();
    let joined: Vec<_> = half.metrics.iter().chain(&rest.metrics).cloned().collect();
    assert_eq!(joined, full.metrics);
    assert_eq!(rest.state, full.state);
}

#[test]
fn digest_mismatch_is_incompatible() {
    let enc = common::tiny_encoder(1);
    let cfg = common::tiny_train(AdapterKind::Moe, 2, LossKind::InfoNce, 2, 2);
    let state = TrainState::init(enc.config(), &cfg).unwrap();
    let ckpt = state.to_checkpoint([7; 32]);
    let err = TrainState::from_checkpoint(&ckpt, enc.config(), &cfg).unwrap_err();
    assert!(matches!(err, Error::IncompatibleCheckpoint(_)));
}

#[test]
fn random_embeddings_hit_at_one_near_chance() {
    let pool = 10;
    let trials = 400;
    let mut rng = RngState::new(2024);
    let mut per_trial = Vec::with_capacity(trials);
    for _ in 0..trials {
        let q = common::unit_rows(pool, 6, &mut rng);
        let p = common::unit_rows(pool, 6, &mut rng);
        let rows = |t: &Tensor| -> Vec<Tensor> { (0..pool).map(|i| Tensor::vector(t.row(i).to_vec())).collect() };
        let r = evaluate_embeddings(&rows(&q), &rows(&p), &vec![0; pool], &[1]).unwrap();
        per_trial.push(r.overall.hit_at_1);
    }
    let mean = per_trial.iter().sum::<f64>() / trials as f64;
    let var = per_trial.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let se = (var / trials as f64).sqrt();
    let p0 = 1.0 / pool as f64;
    assert!((mean - p0).abs() < 3.0 * se, "mean {mean}, expected {p0} +- {}", 3.0 * se);
}

#[test]
fn conflict_generator_needs_vocab() {
    let err = generate_conflict_dataset(&ConflictSpec::new(2, 200, 40, 0)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}
