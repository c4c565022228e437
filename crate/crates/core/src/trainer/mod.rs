//! Two-stage optimization loop, checkpointing and deterministic resume.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{AdamW, AdamWSettings};

use crate::data::{evaluate, PairDataset};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::loss::{eans_with_weights, infonce, ContrastiveBatch, EansParams, Stage};
use crate::moe_lora::{extract_signature, AdapterConfig, AdapterSet, LayerMask, RoutingSignature, SignaturePooling};
use crate::numcore::{RngState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    InfoNce,
    Eans,
    /// InfoNCE before `t_warmup`, routing-weighted afterwards.
    Staged,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(Self::InfoNce),
            "eans" => Ok(Self::Eans),
            "staged" => Ok(Self::Staged),
            other => Err(Error::invalid(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub t_warmup: usize,
    pub loss: LossKind,
    pub adapter: AdapterConfig,
    pub eans: EansParams,
    /// Contrastive temperature.
    pub temperature: f64,
    pub optimizer: AdamWSettings,
    pub linear_decay: bool,
    /// Percentage of the deepest layers whose routing enters signature distances.
    pub layer_coverage: f64,
    pub signature_pooling: SignaturePooling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            total_steps: 2000,
            batch_size: 64,
            t_warmup: 600,
            loss: LossKind::Staged,
            adapter: AdapterConfig::default(),
            eans: EansParams::default(),
            temperature: 0.05,
            optimizer: AdamWSettings::default(),
            linear_decay: true,
            layer_coverage: 100.0,
            signature_pooling: SignaturePooling::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_warmup > self.total_steps {
            return Err(Error::invalid(format!(
                "t_warmup {} exceeds total_steps {}",
                self.t_warmup, self.total_steps
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2"));
        }
        if !(self.learning_rate >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::invalid("learning_rate must be >= 0 and temperature > 0"));
        }
        if self.adapter.rank == 0 || self.adapter.num_experts == 0 {
            return Err(Error::invalid("rank and num_experts must be positive"));
        }
        self.eans.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.linear_decay && self.total_steps > 0 {
            self.learning_rate * (1.0 - step as f64 / self.total_steps as f64)
        } else {
            self.learning_rate
        }
    }

    pub fn stage_at(&self, step: usize) -> Stage {
        match self.loss {
            LossKind::InfoNce => Stage::Warmup,
            LossKind::Eans => Stage::Refinement,
            LossKind::Staged => Stage::at(step, self.t_warmup),
        }
    }
}

/// SHA-256 over the JSON encoding of both configurations.
pub fn config_digest(encoder: &EncoderConfig, config: &TrainConfig) -> [u8; 32] {
    let json = serde_json::to_string(&(encoder, config)).expect("configs serialize");
    Sha256::digest(json.as_bytes()).into()
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub adapters: AdapterSet,
    pub optimizer: AdamW,
    pub rng: RngState,
}

impl TrainState {
    pub fn init(encoder: &EncoderConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let adapters = AdapterSet::init(encoder, &config.adapter, config.seed)?;
        let sizes: Vec<usize> = adapters.named_params().iter().map(|(_, t)| t.len()).collect();
        Ok(Self {
            step: 0,
            adapters,
            optimizer: AdamW::new(config.optimizer, &sizes),
            rng: RngState::derive(config.seed, "batches", 0),
        })
    }

    pub fn to_checkpoint(&self, digest: [u8; 32]) -> Checkpoint {
        let split = |x: u64| [(x >> 32) as f64, (x & 0xFFFF_FFFF) as f64];
        let mut rng = Vec::with_capacity(4);
        rng.extend(split(self.rng.seed));
        rng.extend(split(self.rng.counter));
        let mut records = vec![
            ("step".to_string(), Tensor::scalar(self.step as f64)),
            ("rng".to_string(), Tensor::vector(rng)),
            ("adam.t".to_string(), Tensor::scalar(self.optimizer.t as f64)),
        ];
        let named = self.adapters.named_params();
        for (name, t) in &named {
            records.push((format!("adapter.{name}"), (*t).clone()));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            let shape = t.shape().to_vec();
            records.push((
                format!("adam.m.{name}"),
                Tensor::new(shape.clone(), self.optimizer.m[i].clone()).expect("moment shape"),
            ));
            records.push((
                format!("adam.v.{name}"),
                Tensor::new(shape, self.optimizer.v[i].clone()).expect("moment shape"),
            ));
        }
        Checkpoint {
            step: self.step,
            config_digest: digest,
            records,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, encoder: &EncoderConfig, config: &TrainConfig) -> Result<Self> {
        let digest = config_digest(encoder, config);
        if ckpt.config_digest != digest {
            return Err(Error::IncompatibleCheckpoint(
                "configuration digest does not match this run's configuration".into(),
            ));
        }
        let mut state = Self::init(encoder, config)?;
        state.step = ckpt.step;
        let rng = ckpt.require("rng")?;
        if rng.len() != 4 {
            return Err(Error::format(None, "rng record must hold 4 values"));
        }
        let join = |hi: f64, lo: f64| ((hi as u64) << 32) | (lo as u64);
        state.rng = RngState {
            seed: join(rng.data()[0], rng.data()[1]),
            counter: join(rng.data()[2], rng.data()[3]),
        };
        state.optimizer.t = ckpt.require("adam.t")?.item() as u64;
        let names: Vec<String> = state.adapters.named_params().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            let m = ckpt.require(&format!("adam.m.{name}"))?;
            let v = ckpt.require(&format!("adam.v.{name}"))?;
            state.optimizer.m[i] = m.data().to_vec();
            state.optimizer.v[i] = v.data().to_vec();
        }
        for (name, param) in names.iter().zip(state.adapters.params_mut()) {
            let stored = ckpt.require(&format!("adapter.{name}"))?;
            if stored.shape() != param.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    stored.shape(),
                    param.shape()
                )));
            }
            param.data_mut().copy_from_slice(stored.data());
        }
        Ok(state)
    }
}

/// Adapter parameters stored in a checkpoint.
pub fn adapters_from_checkpoint(ckpt: &Checkpoint, encoder: &EncoderConfig, config: &TrainConfig) -> Result<AdapterSet> {
    Ok(TrainState::from_checkpoint(ckpt, encoder, config)?.adapters)
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    pub mean_w: f64,
    pub max_w: f64,
    pub router_entropy: Vec<f64>,
}

/// Mean (over samples) routing entropy at each site.
fn site_entropies(signatures: &[RoutingSignature]) -> Vec<f64> {
    let Some(first) = signatures.first() else { return Vec::new() };
    let (l, g, _) = first.dims();
    (0..l * g)
        .map(|s| {
            signatures.iter().map(|sig| crate::diagnostics::entropy(sig.slot(s / g, s % g))).sum::<f64>() / signatures.len() as f64
        })
        .collect()
}

fn param_summary(adapters: &AdapterSet) -> String {
    adapters
        .named_params()
        .iter()
        .map(|(n, t)| {
            let max = t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            format!("{n}:max|x|={max:.3e}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// One optimization step on the batch of dataset rows `batch`.
pub fn train_step(
    encoder: &Encoder,
    config: &TrainConfig,
    state: &mut TrainState,
    dataset: &PairDataset,
    batch: &[usize],
) -> Result<StepMetrics> {
    let step = state.step;
    let lr = config.lr_at(step);
    let stage = config.stage_at(step);
    let mask = LayerMask::deepest_fraction(encoder.config().num_layers, config.layer_coverage)?;

    let tape = Tape::new();
    let bound = encoder.bind(&tape);
    let adapters = state.adapters.bind(&tape, true);
    let mut q_rows: Vec<Var<'_>> = Vec::with_capacity(batch.len());
    let mut t_rows = Vec::with_capacity(batch.len());
    let mut q_sigs = Vec::with_capacity(batch.len());
    let mut t_sigs = Vec::with_capacity(batch.len());
    for &i in batch {
        let rec = dataset
            .records
            .get(i)
            .ok_or_else(|| Error::invalid(format!("batch index {i} out of range")))?;
        for (sample, rows, sigs) in [(&rec.query, &mut q_rows, &mut q_sigs), (&rec.positive, &mut t_rows, &mut t_sigs)] {
            let (emb, routing) = bound.embed(sample, Some(&adapters))?;
            rows.push(emb);
            sigs.push(extract_signature(&routing, sample.tokens.len(), &mask, config.signature_pooling)?);
        }
    }
    let queries = Var::concat_rows(&q_rows)?;
    let targets = Var::concat_rows(&t_rows)?;
    let entropies = {
        let mut all = q_sigs.clone();
        all.extend(t_sigs.iter().cloned());
        site_entropies(&all)
    };
    let cb = ContrastiveBatch::new(queries, targets, q_sigs, t_sigs, config.temperature)?;
    let (loss, weights) = match stage {
        Stage::Warmup => (infonce(&cb)?, None),
        Stage::Refinement => {
            let (l, w) = eans_with_weights(&cb, &config.eans)?;
            (l, Some(w))
        }
    };
    let loss_value = loss.item();
    if !loss_value.is_finite() {
        let dump = format!(
            "non-finite loss {loss_value} at step {step} (stage {}, lr {lr:e}); adapters: {}",
            stage.as_str(),
            param_summary(&state.adapters)
        );
        log::error!("{dump}");
        return Err(Error::NumericFailure(dump));
    }
    let (mean_w, max_w) = match &weights {
        None => (1.0, 1.0),
        Some(w) => {
            let off: Vec<f64> = w
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| *j != i).map(|(_, &v)| v))
                .collect();
            (off.iter().sum::<f64>() / off.len() as f64, off.iter().cloned().fold(f64::MIN, f64::max))
        }
    };
    tape.backward(loss)?;
    let grads = adapters.grads();
    drop(adapters);
    state.optimizer.step(&mut state.adapters.params_mut(), &grads, lr)?;
    state.step += 1;
    Ok(StepMetrics {
        step,
        stage: stage.as_str().to_string(),
        loss: loss_value,
        lr,
        mean_w,
        max_w,
        router_entropy: entropies,
    })
}

/// Draws the next batch from the state's generator.
pub fn next_batch(state: &mut TrainState, dataset_len: usize, batch_size: usize) -> Vec<usize> {
    state.rng.sample_indices(dataset_len, batch_size)
}

/// hit@1 recorded at a checkpoint step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub hit_at_1: f64,
    pub per_task: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub checkpoint_every: usize,
    /// Writes `metrics.jsonl`, `checkpoints/` and `reports/evals.jsonl` here.
    pub out_dir: Option<PathBuf>,
    /// Evaluated at every checkpoint step.
    pub eval_data: Option<&'a PairDataset>,
    pub keep_checkpoints: bool,
    /// Stop after this many completed steps instead of `total_steps`.
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: TrainState,
    pub final_checkpoint: Checkpoint,
    /// Populated when `keep_checkpoints` is set.
    pub checkpoints: Vec<Checkpoint>,
    pub checkpoint_steps: Vec<usize>,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
}

pub fn metrics_to_jsonl(metrics: &[StepMetrics]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

pub fn read_metrics_jsonl(text: &str) -> Result<Vec<StepMetrics>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(Some(i + 1), e.to_string())))
        .collect()
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Trains from a fresh state.
pub fn run(encoder: &Encoder, config: &TrainConfig, dataset: &PairDataset, options: &RunOptions<'_>) -> Result<RunOutput> {
    let state = TrainState::init(encoder.config(), config)?;
    run_from(encoder, config, dataset, state, options)
}

/// Continues training from `state` until `total_steps` (or `stop_at`).
pub fn run_from(
    encoder: &Encoder,
    config: &TrainConfig,
    dataset: &PairDataset,
    mut state: TrainState,
    options: &RunOptions<'_>,
) -> Result<RunOutput> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::invalid("training needs at least 2 records"));
    }
    dataset.validate(encoder.config())?;
    let digest = config_digest(encoder.config(), config);
    let every = options.checkpoint_every.max(1);
    let end = options.stop_at.unwrap_or(config.total_steps).min(config.total_steps);

    let mut metrics_file = None;
    let mut evals_file = None;
    if let Some(dir) = &options.out_dir {
        for sub in ["checkpoints", "reports"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let open = |p: PathBuf| std::fs::File::create(&p).map(std::io::BufWriter::new).map_err(|e| Error::io(p, e));
        metrics_file = Some(open(dir.join("metrics.jsonl"))?);
        if options.eval_data.is_some() {
            evals_file = Some(open(dir.join("reports").join("evals.jsonl"))?);
        }
    }

    let mut out = RunOutput {
        final_checkpoint: state.to_checkpoint(digest),
        state: state.clone(),
        checkpoints: Vec::new(),
        checkpoint_steps: Vec::new(),
        metrics: Vec::new(),
        evals: Vec::new(),
    };

    let at_boundary = |state: &TrainState, out: &mut RunOutput, evals_file: &mut Option<std::io::BufWriter<std::fs::File>>| -> Result<()> {
        let ckpt = state.to_checkpoint(digest);
        if let Some(dir) = &options.out_dir {
            ckpt.save(checkpoint_path(dir, state.step))?;
        }
        if let Some(data) = options.eval_data {
            let r = evaluate(encoder, Some(&state.adapters), data, &[1])?;
            let point = EvalPoint {
                step: state.step,
                hit_at_1: r.overall.hit_at_1,
                per_task: r.per_task.iter().map(|(t, m)| (*t, m.hit_at_1)).collect(),
            };
            if let Some(f) = evals_file {
                let line = serde_json::to_string(&point).expect("eval point serializes");
                writeln!(f, "{line}").map_err(|e| Error::io("evals.jsonl", e))?;
            }
            out.evals.push(point);
        }
        out.checkpoint_steps.push(state.step);
        if options.keep_checkpoints {
            out.checkpoints.push(ckpt.clone());
        }
        out.final_checkpoint = ckpt;
        Ok(())
    };

    if state.step % every == 0 || state.step == end {
        at_boundary(&state, &mut out, &mut evals_file)?;
    }
    while state.step < end {
        let batch = next_batch(&mut state, dataset.len(), config.batch_size);
        let m = train_step(encoder, config, &mut state, dataset, &batch).map_err(|e| e.at_step(state.step))?;
        if let Some(f) = &mut metrics_file {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(f, "{line}").map_err(|e| Error::io("metrics.jsonl", e).at_step(m.step))?;
        }
        out.metrics.push(m);
        if state.step % every == 0 || state.step == end {
            at_boundary(&state, &mut out, &mut evals_file).map_err(|e| e.at_step(state.step))?;
        }
    }
    for f in [&mut metrics_file, &mut evals_file].into_iter().flatten() {
        f.flush().map_err(|e| Error::io("run output", e))?;
    }
    out.state = state;
    Ok(out)
}
