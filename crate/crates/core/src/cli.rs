//! Command-line front end: `gen-data`, `train`, `eval` and `diagnose`.
//!
//! Every training run owns a directory holding `manifest.json`,
//! `config.json`, `metrics.jsonl`, `checkpoints/` and `reports/`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{evaluate, generate_conflict_dataset, ConflictSpec, PairDataset};
use crate::diagnostics::{
    convergence_export, expert_utilization, layer_cosine, project_runs, series_from_evals, write_convergence_csv,
    write_similarity_csv, write_trajectory_csv, RunTrajectory,
};
use crate::encoder::{Encoder, EncoderConfig, Projection};
use crate::error::{Error, Result};
use crate::loss::EansParams;
use crate::moe_lora::{AdapterConfig, AdapterKind, SignaturePooling};
use crate::numcore::RngState;
use crate::trainer::{self, AdamWSettings, Checkpoint, EvalPoint, LossKind, RunOptions, TrainConfig, TrainState};

/// Default output root when `--out` is absent.
pub const OUT_ROOT_ENV: &str = "MOE_EMBED_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "moe-embed", version, about = "Train and inspect mixture-of-LoRA embedding adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic task-conflict dataset as JSONL.
    GenData {
        #[arg(long)]
        tasks: usize,
        #[arg(long = "per-task")]
        per_task: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        /// Flat config of the run; defaults to the run directory's `config.json`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trajectory PCA, layer similarity, expert utilization or convergence tables.
    Diagnose {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: DiagnoseMode,
        #[arg(long)]
        out: PathBuf,
        /// Utilization data; defaults to the first run's training data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Interpolate convergence series onto a shared step grid.
        #[arg(long)]
        resample: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiagnoseMode {
    Trajectory,
    Similarity,
    Utilization,
    Convergence,
}

#[derive(Debug, Clone, clap::Args)]
pub struct TrainArgs {
    /// Flat JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<String>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long = "t-warmup")]
    pub t_warmup: Option<usize>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `experts=2,4,6,8` or `layers=25,50,75,100`; one run per value.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Skip hit@1 evaluation at checkpoints.
    #[arg(long)]
    pub no_eval: bool,
}

/// The flat key set accepted in config files. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlatConfig {
    pub vocab_size: Option<usize>,
    pub model_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub projections: Option<Vec<Projection>>,
    pub ffn_dim: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub eos_id: Option<u32>,
    pub encoder_seed: Option<u64>,

    pub adapter: Option<AdapterKind>,
    pub num_experts: Option<usize>,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub router_temperature: Option<f64>,
    pub gate_init_std: Option<f64>,

    pub learning_rate: Option<f64>,
    pub total_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub t_warmup: Option<usize>,
    pub loss: Option<LossKind>,
    pub temperature: Option<f64>,
    pub w_min: Option<f64>,
    pub w_max: Option<f64>,
    pub sigma: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub linear_decay: Option<bool>,
    pub layer_coverage: Option<f64>,
    pub signature_pooling: Option<SignaturePooling>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn sets_eans_params(&self) -> bool {
        self.w_min.is_some() || self.w_max.is_some() || self.sigma.is_some()
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let e = EncoderConfig::default();
        let encoder = EncoderConfig {
            vocab_size: self.vocab_size.unwrap_or(e.vocab_size),
            model_dim: self.model_dim.unwrap_or(e.model_dim),
            num_layers: self.num_layers.unwrap_or(e.num_layers),
            projections: self.projections.clone().unwrap_or(e.projections),
            ffn_dim: self.ffn_dim.unwrap_or(e.ffn_dim),
            max_seq_len: self.max_seq_len.unwrap_or(e.max_seq_len),
            eos_id: self.eos_id.unwrap_or(e.eos_id),
            init_seed: self.encoder_seed.unwrap_or(e.init_seed),
        };
        encoder.validate()?;
        let t = TrainConfig::default();
        let a = AdapterConfig::default();
        let p = EansParams::default();
        let o = AdamWSettings::default();
        let train = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(t.learning_rate),
            total_steps: self.total_steps.unwrap_or(t.total_steps),
            batch_size: self.batch_size.unwrap_or(t.batch_size),
            t_warmup: self.t_warmup.unwrap_or(t.t_warmup),
            loss: self.loss.unwrap_or(t.loss),
            adapter: AdapterConfig {
                kind: self.adapter.unwrap_or(a.kind),
                num_experts: self.num_experts.unwrap_or(a.num_experts),
                rank: self.rank.unwrap_or(a.rank),
                alpha: self.alpha.unwrap_or(a.alpha),
                router_temperature: self.router_temperature.unwrap_or(a.router_temperature),
                gate_init_std: self.gate_init_std.unwrap_or(a.gate_init_std),
            },
            eans: EansParams {
                w_min: self.w_min.unwrap_or(p.w_min),
                w_max: self.w_max.unwrap_or(p.w_max),
                sigma: self.sigma.unwrap_or(p.sigma),
            },
            temperature: self.temperature.unwrap_or(t.temperature),
            optimizer: AdamWSettings {
                beta1: self.beta1.unwrap_or(o.beta1),
                beta2: self.beta2.unwrap_or(o.beta2),
                eps: self.eps.unwrap_or(o.eps),
                weight_decay: self.weight_decay.unwrap_or(o.weight_decay),
            },
            linear_decay: self.linear_decay.unwrap_or(t.linear_decay),
            layer_coverage: self.layer_coverage.unwrap_or(t.layer_coverage),
            signature_pooling: self.signature_pooling.unwrap_or(t.signature_pooling),
            seed: self.seed.unwrap_or(t.seed),
        };
        train.validate()?;
        Ok(Resolved {
            encoder,
            train,
            checkpoint_every: self.checkpoint_every.unwrap_or(100),
        })
    }

    /// Every key filled in from resolved settings.
    pub fn from_resolved(r: &Resolved) -> Self {
        let (e, t) = (&r.encoder, &r.train);
        Self {
            vocab_size: Some(e.vocab_size),
            model_dim: Some(e.model_dim),
            num_layers: Some(e.num_layers),
            projections: Some(e.projections.clone()),
            ffn_dim: Some(e.ffn_dim),
            max_seq_len: Some(e.max_seq_len),
            eos_id: Some(e.eos_id),
            encoder_seed: Some(e.init_seed),
            adapter: Some(t.adapter.kind),
            num_experts: Some(t.adapter.num_experts),
            rank: Some(t.adapter.rank),
            alpha: Some(t.adapter.alpha),
            router_temperature: Some(t.adapter.router_temperature),
            gate_init_std: Some(t.adapter.gate_init_std),
            learning_rate: Some(t.learning_rate),
            total_steps: Some(t.total_steps),
            batch_size: Some(t.batch_size),
            t_warmup: Some(t.t_warmup),
            loss: Some(t.loss),
            temperature: Some(t.temperature),
            w_min: Some(t.eans.w_min),
            w_max: Some(t.eans.w_max),
            sigma: Some(t.eans.sigma),
            beta1: Some(t.optimizer.beta1),
            beta2: Some(t.optimizer.beta2),
            eps: Some(t.optimizer.eps),
            weight_decay: Some(t.optimizer.weight_decay),
            linear_decay: Some(t.linear_decay),
            layer_coverage: Some(t.layer_coverage),
            signature_pooling: Some(t.signature_pooling),
            seed: Some(t.seed),
            checkpoint_every: Some(r.checkpoint_every),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: FlatConfig,
    pub data: PathBuf,
    pub dataset_digest: String,
    pub layout: Vec<String>,
    pub frozen_checksum: String,
    pub unix_time: u64,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(None, format!("{}: {e}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn cmd_gen_data(tasks: usize, per_task: usize, seed: u64, vocab: usize, out: &Path) -> Result<String> {
    let data = generate_conflict_dataset(&ConflictSpec::new(tasks, per_task, vocab, seed))?;
    data.save_jsonl(out)?;
    Ok(data.digest())
}

fn apply_overrides(flat: &mut FlatConfig, args: &TrainArgs) -> Result<()> {
    if let Some(a) = &args.adapter {
        flat.adapter = Some(a.parse()?);
    }
    if let Some(l) = &args.loss {
        flat.loss = Some(l.parse()?);
    }
    flat.num_experts = args.experts.or(flat.num_experts);
    flat.t_warmup = args.t_warmup.or(flat.t_warmup);
    flat.seed = args.seed.or(flat.seed);
    flat.total_steps = args.steps.or(flat.total_steps);
    Ok(())
}

fn parse_sweep(spec: &str) -> Result<(String, Vec<f64>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("sweep {spec:?} is not key=v1,v2,...")))?;
    if key != "experts" && key != "layers" {
        return Err(Error::invalid(format!("unknown sweep key {key:?}; use experts or layers")));
    }
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad sweep value {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    Ok((key.to_string(), values))
}

/// Trains one run into `run_dir`.
pub fn train_run(resolved: &Resolved, data_path: &Path, run_dir: &Path, eval: bool, command: Vec<String>) -> Result<trainer::RunOutput> {
    let dataset = PairDataset::load_jsonl(data_path)?;
    if dataset.is_empty() {
        return Err(Error::invalid(format!("{} holds no records", data_path.display())));
    }
    let encoder = Encoder::build_frozen(resolved.encoder.clone())?;
    let flat = FlatConfig::from_resolved(resolved);
    write_text(&run_dir.join("config.json"), &pretty(&flat))?;
    let manifest = RunManifest {
        command,
        config: flat,
        data: std::fs::canonicalize(data_path).unwrap_or_else(|_| data_path.to_path_buf()),
        dataset_digest: dataset.digest(),
        layout: ["manifest.json", "config.json", "metrics.jsonl", "checkpoints/", "reports/"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        frozen_checksum: encoder.frozen_checksum(),
        unix_time: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    write_text(&run_dir.join("manifest.json"), &pretty(&manifest))?;
    let options = RunOptions {
        checkpoint_every: resolved.checkpoint_every,
        out_dir: Some(run_dir.to_path_buf()),
        eval_data: eval.then_some(&dataset),
        ..RunOptions::default()
    };
    trainer::run(&encoder, &resolved.train, &dataset, &options)
}

pub fn cmd_train(args: &TrainArgs, command: Vec<String>) -> Result<Vec<PathBuf>> {
    let mut flat = match &args.config {
        Some(p) => FlatConfig::load(p)?,
        None => FlatConfig::default(),
    };
    apply_overrides(&mut flat, args)?;
    let base = flat.resolve()?;
    if base.train.loss == LossKind::InfoNce && flat.sets_eans_params() {
        log::warn!("loss is infonce; w_min, w_max and sigma are ignored");
    }
    let default_name = || {
        let t = &base.train;
        let kind = match t.adapter.kind {
            AdapterKind::Lora => "lora".to_string(),
            AdapterKind::Moe => format!("moe{}", t.adapter.num_experts),
        };
        let loss = serde_json::to_value(t.loss).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        format!("{kind}-{loss}-seed{}", t.seed)
    };
    let root = args.out.clone().unwrap_or_else(|| out_root().join(default_name()));

    let Some(sweep) = &args.sweep else {
        train_run(&base, &args.data, &root, !args.no_eval, command)?;
        return Ok(vec![root]);
    };
    let (key, values) = parse_sweep(sweep)?;
    let mut dirs = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let mut f = flat.clone();
        f.seed = Some(RngState::derive(base.train.seed, "sweep", i as u64).next_u64());
        let name = match key.as_str() {
            "experts" => {
                if v.fract() != 0.0 || *v < 1.0 {
                    return Err(Error::invalid(format!("expert count {v} is not a positive integer")));
                }
                f.num_experts = Some(*v as usize);
                f.adapter = Some(AdapterKind::Moe);
                format!("experts-{v}")
            }
            _ => {
                f.layer_coverage = Some(*v);
                format!("layers-{v}")
            }
        };
        let resolved = f.resolve()?;
        let dir = root.join(name);
        train_run(&resolved, &args.data, &dir, !args.no_eval, command.clone())?;
        dirs.push(dir);
    }
    Ok(dirs)
}

fn run_dir_of_checkpoint(ckpt: &Path) -> Option<PathBuf> {
    ckpt.parent()?.parent().map(Path::to_path_buf)
}

/// Resolves a run's settings from its `config.json`.
pub fn load_run_config(run_dir: &Path) -> Result<Resolved> {
    FlatConfig::load(&run_dir.join("config.json"))?.resolve()
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, ks: &[usize], config: Option<&Path>) -> Result<serde_json::Value> {
    let resolved = match config {
        Some(p) => FlatConfig::load(p)?.resolve()?,
        None => {
            let dir = run_dir_of_checkpoint(checkpoint)
                .ok_or_else(|| Error::invalid("cannot locate the run directory of this checkpoint; pass --config"))?;
            load_run_config(&dir)?
        }
    };
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = TrainState::from_checkpoint(&ckpt, &resolved.encoder, &resolved.train)?;
    let encoder = Encoder::build_frozen(resolved.encoder)?;
    let dataset = PairDataset::load_jsonl(data)?;
    let report = evaluate(&encoder, Some(&state.adapters), &dataset, ks)?;
    let mut json = report.to_json();
    json["step"] = serde_json::json!(ckpt.step);
    Ok(json)
}

/// Every checkpoint of a run, sorted by step.
pub fn load_run_checkpoints(run_dir: &Path) -> Result<Vec<Checkpoint>> {
    let dir = run_dir.join("checkpoints");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|x| x == "ckpt") {
            out.push(Checkpoint::load(&path)?);
        }
    }
    out.sort_by_key(|c| c.step);
    if out.is_empty() {
        return Err(Error::invalid(format!("{} holds no checkpoints", dir.display())));
    }
    Ok(out)
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn final_adapters(run: &Path) -> Result<(Resolved, crate::moe_lora::AdapterSet)> {
    let resolved = load_run_config(run)?;
    let last = load_run_checkpoints(run)?.pop().expect("non-empty");
    let adapters = trainer::adapters_from_checkpoint(&last, &resolved.encoder, &resolved.train)?;
    Ok((resolved, adapters))
}

/// Runs one diagnostic and returns the paths it wrote plus a summary line.
pub fn cmd_diagnose(
    runs: &[PathBuf],
    mode: DiagnoseMode,
    out: &Path,
    data: Option<&Path>,
    resample: bool,
) -> Result<(Vec<PathBuf>, String)> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let file = |name: &str| -> Result<(PathBuf, std::fs::File)> {
        let p = out.join(name);
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok((p, f))
    };
    match mode {
        DiagnoseMode::Trajectory => {
            let mut trajectories = Vec::new();
            for run in runs {
                let resolved = load_run_config(run)?;
                let checkpoints = load_run_checkpoints(run)?
                    .iter()
                    .map(|c| {
                        let a = trainer::adapters_from_checkpoint(c, &resolved.encoder, &resolved.train)?;
                        Ok((c.step, a.flatten()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                trajectories.push(RunTrajectory { label: run_label(run), checkpoints });
            }
            let proj = project_runs(&trajectories)?;
            let (csv_path, f) = file("trajectory.csv")?;
            write_trajectory_csv(&proj, f)?;
            let json_path = out.join("trajectory.json");
            write_text(&json_path, &pretty(&proj))?;
            let line = format!(
                "explained_variance={:.6}{}",
                proj.explained_variance,
                if proj.degenerate { " (degenerate)" } else { "" }
            );
            Ok((vec![csv_path, json_path], line))
        }
        DiagnoseMode::Similarity => {
            let loaded = runs.iter().map(|r| final_adapters(r)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<String> = runs.iter().map(|r| run_label(r)).collect();
            let pairs: Vec<(usize, usize)> = if loaded.len() == 1 {
                vec![(0, 0)]
            } else {
                (0..loaded.len()).flat_map(|i| (i + 1..loaded.len()).map(move |j| (i, j))).collect()
            };
            let mut profiles = Vec::new();
            for (i, j) in pairs {
                profiles.push((labels[i].clone(), labels[j].clone(), layer_cosine(&loaded[i].1, &loaded[j].1)?));
            }
            let (p, f) = file("similarity.csv")?;
            write_similarity_csv(&profiles, f)?;
            Ok((vec![p], format!("{} run pair(s)", profiles.len())))
        }
        DiagnoseMode::Utilization => {
            let mut reports = Vec::new();
            for run in runs {
                let (resolved, adapters) = final_adapters(run)?;
                let data_path = match data {
                    Some(d) => d.to_path_buf(),
                    None => RunManifest::load(run)?.data,
                };
                let dataset = PairDataset::load_jsonl(&data_path)?;
                let encoder = Encoder::build_frozen(resolved.encoder.clone())?;
                let rep = expert_utilization(&encoder, &adapters, &dataset, resolved.train.signature_pooling)?;
                reports.push(serde_json::json!({ "run": run_label(run), "report": rep.to_json() }));
            }
            let p = out.join("utilization.json");
            write_text(&p, &pretty(&reports))?;
            Ok((vec![p], format!("{} run(s)", reports.len())))
        }
        DiagnoseMode::Convergence => {
            let mut series = Vec::new();
            for run in runs {
                let path = run.join("reports").join("evals.jsonl");
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let evals = text
                    .lines()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(i, l)| serde_json::from_str::<EvalPoint>(l).map_err(|e| Error::format(Some(i + 1), e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                series.extend(series_from_evals(&run_label(run), &evals));
            }
            let table = convergence_export(&series, resample)?;
            let (p, f) = file("convergence.csv")?;
            write_convergence_csv(&table, f)?;
            Ok((vec![p], format!("{} steps x {} series", table.steps.len(), table.columns.len())))
        }
    }
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::InvalidArgument(_) | Error::Format { .. } | Error::IncompatibleCheckpoint(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<()> {
    match cli.command {
        Command::GenData { tasks, per_task, seed, vocab, out } => {
            let digest = cmd_gen_data(tasks, per_task, seed, vocab, &out)?;
            println!("{digest}  {}", out.display());
        }
        Command::Train(args) => {
            for dir in cmd_train(&args, argv)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval { checkpoint, data, k, config, out } => {
            let report = cmd_eval(&checkpoint, &data, &k, config.as_deref())?;
            let text = pretty(&report);
            let dest = out.or_else(|| {
                let step = report["step"].as_u64().unwrap_or(0);
                run_dir_of_checkpoint(&checkpoint).map(|d| d.join("reports").join(format!("eval_step_{step:06}.json")))
            });
            if let Some(p) = dest {
                write_text(&p, &text)?;
            }
            print!("{text}");
        }
        Command::Diagnose { runs, mode, out, data, resample } => {
            let (paths, line) = cmd_diagnose(&runs, mode, &out, data.as_deref(), resample)?;
            for p in paths {
                println!("{}", p.display());
            }
            println!("{line}");
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
