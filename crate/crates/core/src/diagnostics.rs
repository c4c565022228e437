//! Trajectory PCA, layer-wise adapter similarity, expert utilization and
//! convergence tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{embed_all, PairDataset};
use crate::encoder::{Encoder, Sample};
use crate::error::{Error, Result};
use crate::moe_lora::{AdapterSet, RoutingSignature, SignaturePooling};
use crate::trainer::EvalPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub label: String,
    pub step: usize,
    pub coords: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryProjection {
    pub points: Vec<TrajectoryPoint>,
    /// `(l1 + l2) / sum(l)` of the centered covariance.
    pub explained_variance: f64,
    pub degenerate: bool,
}

/// A run's checkpoints, each a flattened adapter vector with its step.
#[derive(Debug, Clone)]
pub struct RunTrajectory {
    pub label: String,
    pub checkpoints: Vec<(usize, Vec<f64>)>,
}

/// Unlabeled projection of raw vectors; coordinates keep input order.
pub fn pca_project(vectors: &[Vec<f64>]) -> Result<TrajectoryProjection> {
    let run = RunTrajectory {
        label: String::new(),
        checkpoints: vectors.iter().cloned().enumerate().collect(),
    };
    project_runs(std::slice::from_ref(&run))
}

/// Fits one basis over every checkpoint of every run.
pub fn project_runs(runs: &[RunTrajectory]) -> Result<TrajectoryProjection> {
    let rows: Vec<(&str, usize, &[f64])> = runs
        .iter()
        .flat_map(|r| r.checkpoints.iter().map(move |(s, v)| (r.label.as_str(), *s, v.as_slice())))
        .collect();
    let n = rows.len();
    if n < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 checkpoints, got {n}")));
    }
    let dim = rows[0].2.len();
    if dim == 0 || rows.iter().any(|r| r.2.len() != dim) {
        return Err(Error::invalid("checkpoint vectors must share one non-zero length"));
    }
    let mut mean = vec![0.0; dim];
    for (_, _, v) in &rows {
        for (m, x) in mean.iter_mut().zip(*v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, _, v)| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&centered[i], &centered[j]));
    let total: f64 = (0..n).map(|i| gram[(i, i)]).sum();
    let make = |coords: Vec<[f64; 2]>, ev: f64, degenerate: bool| TrajectoryProjection {
        points: rows
            .iter()
            .zip(coords)
            .map(|((label, step, _), coords)| TrajectoryPoint {
                label: label.to_string(),
                step: *step,
                coords,
            })
            .collect(),
        explained_variance: ev,
        degenerate,
    };
    if !(total > 0.0) {
        return Ok(make(vec![[0.0; 2]; n], 0.0, true));
    }

    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let tol = top * 1e-12;
    let mut coords = vec![[0.0; 2]; n];
    let mut kept = 0.0;
    for (c, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol {
            continue;
        }
        kept += lambda;
        let u = eig.eigenvectors.column(idx);
        let mut loading = vec![0.0; dim];
        for (i, row) in centered.iter().enumerate() {
            for (l, x) in loading.iter_mut().zip(row) {
                *l += u[i] * x;
            }
        }
        let norm = dot(&loading, &loading).sqrt();
        let pivot = loading.iter().fold(0.0f64, |best, &x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        loading.iter_mut().for_each(|l| *l *= sign / norm);
        for (i, row) in centered.iter().enumerate() {
            coords[i][c] = dot(row, &loading);
        }
    }
    Ok(make(coords, (kept / total).clamp(0.0, 1.0), false))
}

/// Per-layer cosine between two adapter sets; `None` where either side is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityProfile {
    pub values: Vec<Option<f64>>,
}

fn layer_delta(set: &AdapterSet, layer: usize) -> Vec<f64> {
    (0..set.sites_per_layer)
        .flat_map(|g| set.site(layer, g).experts().iter().flat_map(|e| e.delta().into_data()))
        .collect()
}

fn check_same_architecture(a: &AdapterSet, b: &AdapterSet) -> Result<()> {
    let shapes = |s: &AdapterSet| -> Vec<Vec<usize>> { s.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect() };
    if a.num_layers != b.num_layers || a.sites_per_layer != b.sites_per_layer || shapes(a) != shapes(b) {
        return Err(Error::invalid("adapter sets have different architectures"));
    }
    Ok(())
}

/// Cosine of the concatenated dense deltas `(alpha/r) B A` of each layer's sites.
/// Mixture sites contribute every expert's delta in expert order.
pub fn layer_cosine(a: &AdapterSet, b: &AdapterSet) -> Result<SimilarityProfile> {
    check_same_architecture(a, b)?;
    let values = (0..a.num_layers)
        .map(|l| {
            let (x, y) = (layer_delta(a, l), layer_delta(b, l));
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return None;
            }
            let c = x.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny);
            Some(c.clamp(-1.0, 1.0))
        })
        .collect();
    Ok(SimilarityProfile { values })
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h + 0.0
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUtilization {
    pub task_id: usize,
    pub samples: usize,
    /// One mean distribution per site, layer-major.
    pub mean_routing: Vec<Vec<f64>>,
    pub dominant_expert: Vec<usize>,
    pub entropy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    pub num_layers: usize,
    pub sites_per_layer: usize,
    pub num_experts: usize,
    pub tasks: Vec<TaskUtilization>,
}

impl UtilizationReport {
    pub fn task(&self, task_id: usize) -> Option<&TaskUtilization> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Fraction of sites whose dominant expert differs between two tasks.
    pub fn dominant_disagreement(&self, a: usize, b: usize) -> Option<f64> {
        let (ta, tb) = (self.task(a)?, self.task(b)?);
        let n = ta.dominant_expert.len();
        let differ = ta.dominant_expert.iter().zip(&tb.dominant_expert).filter(|(x, y)| x != y).count();
        Some(differ as f64 / n as f64)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// Averages query routing signatures per task.
pub fn expert_utilization(
    encoder: &Encoder,
    adapters: &AdapterSet,
    dataset: &PairDataset,
    pooling: SignaturePooling,
) -> Result<UtilizationReport> {
    let queries: Vec<&Sample> = dataset.records.iter().map(|r| &r.query).collect();
    let embedded = embed_all(encoder, Some(adapters), &queries, pooling)?;
    let signatures = embedded
        .into_iter()
        .map(|e| e.signature.ok_or_else(|| Error::InconsistentState("missing signature".into())))
        .collect::<Result<Vec<_>>>()?;
    let tasks: Vec<usize> = dataset.records.iter().map(|r| r.task_id).collect();
    utilization_from_signatures(&tasks, &signatures, dataset.task_count)
}

pub fn utilization_from_signatures(
    tasks: &[usize],
    signatures: &[RoutingSignature],
    task_count: usize,
) -> Result<UtilizationReport> {
    if tasks.len() != signatures.len() {
        return Err(Error::invalid("one task id per signature required"));
    }
    let Some(first) = signatures.first() else {
        return Err(Error::invalid("no signatures to summarize"));
    };
    let (l, g, n) = first.dims();
    let mut sums: BTreeMap<usize, (usize, Vec<f64>)> = BTreeMap::new();
    for (&task, sig) in tasks.iter().zip(signatures) {
        if sig.dims() != (l, g, n) {
            return Err(Error::invalid("signatures disagree on shape"));
        }
        let entry = sums.entry(task).or_insert_with(|| (0, vec![0.0; l * g * n]));
        entry.0 += 1;
        for (acc, v) in entry.1.iter_mut().zip(sig.values.data()) {
            *acc += v;
        }
    }
    for t in 0..task_count {
        if !sums.contains_key(&t) {
            log::warn!("task {t} has no records; excluded from utilization report");
        }
    }
    let tasks = sums
        .into_iter()
        .map(|(task_id, (count, total))| {
            let mean_routing: Vec<Vec<f64>> =
                total.chunks(n).map(|c| c.iter().map(|v| v / count as f64).collect()).collect();
            TaskUtilization {
                task_id,
                samples: count,
                dominant_expert: mean_routing.iter().map(|p| argmax(p)).collect(),
                entropy: mean_routing.iter().map(|p| entropy(p)).collect(),
                mean_routing,
            }
        })
        .collect();
    Ok(UtilizationReport {
        num_layers: l,
        sites_per_layer: g,
        num_experts: n,
        tasks,
    })
}

/// One plotted line: a metric sampled at increasing steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

/// Joint and per-task hit@1 series from an evaluation log.
pub fn series_from_evals(label: &str, evals: &[EvalPoint]) -> Vec<Series> {
    let mut out = vec![Series {
        name: format!("{label}/joint"),
        points: evals.iter().map(|e| (e.step, e.hit_at_1)).collect(),
    }];
    let tasks: BTreeSet<usize> = evals.iter().flat_map(|e| e.per_task.keys().copied()).collect();
    for t in tasks {
        out.push(Series {
            name: format!("{label}/task{t}"),
            points: evals.iter().filter_map(|e| e.per_task.get(&t).map(|v| (e.step, *v))).collect(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub columns: Vec<String>,
    pub steps: Vec<usize>,
    /// `rows[i][j]` is series `j` at `steps[i]`; `None` outside that series' range.
    pub rows: Vec<Vec<Option<f64>>>,
}

fn interpolate(points: &[(usize, f64)], step: usize) -> Option<f64> {
    let i = points.partition_point(|p| p.0 < step);
    let hi = points.get(i)?;
    if hi.0 == step {
        return Some(hi.1);
    }
    let lo = points.get(i.checked_sub(1)?)?;
    let f = (step - lo.0) as f64 / (hi.0 - lo.0) as f64;
    Some(lo.1 + f * (hi.1 - lo.1))
}

/// Merges series onto the union of their steps.
pub fn convergence_export(series: &[Series], resample: bool) -> Result<ConvergenceTable> {
    let mut sorted = Vec::with_capacity(series.len());
    for s in series {
        let mut p = s.points.clone();
        p.sort_by_key(|x| x.0);
        if p.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!("series {} repeats a step", s.name)));
        }
        sorted.push(p);
    }
    let steps: Vec<usize> = sorted.iter().flatten().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
    if !resample {
        if let Some(s) = series.iter().zip(&sorted).find(|(_, p)| p.len() != steps.len()) {
            return Err(Error::invalid(format!(
                "series {} does not share the common step grid; enable resampling",
                s.0.name
            )));
        }
    }
    let rows = steps
        .iter()
        .map(|&step| sorted.iter().map(|p| interpolate(p, step)).collect())
        .collect();
    Ok(ConvergenceTable {
        columns: series.iter().map(|s| s.name.clone()).collect(),
        steps,
        rows,
    })
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("csv output", std::io::Error::other(e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_trajectory_csv<W: Write>(p: &TrajectoryProjection, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["run", "step", "pc1", "pc2"]).map_err(csv_err)?;
    for pt in &p.points {
        w.write_record([pt.label.clone(), pt.step.to_string(), num(pt.coords[0]), num(pt.coords[1])])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

pub fn write_similarity_csv<W: Write>(pairs: &[(String, String, SimilarityProfile)], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["run_a", "run_b", "layer", "cosine"]).map_err(csv_err)?;
    for (a, b, prof) in pairs {
        for (l, v) in prof.values.iter().enumerate() {
            w.write_record([a.clone(), b.clone(), l.to_string(), v.map(num).unwrap_or_default()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

pub fn write_convergence_csv<W: Write>(t: &ConvergenceTable, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend(t.columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (step, row) in t.steps.iter().zip(&t.rows) {
        let mut rec = vec![step.to_string()];
        rec.extend(row.iter().map(|v| v.map(num).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::moe_lora::{AdapterConfig, AdapterKind, SiteAdapter};
    use crate::numcore::{randn, RngState, Tensor};

    #[test]
    fn collinear_points_have_full_variance() {
        let dir: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let pts: Vec<Vec<f64>> = [-2.0, 0.5, 1.0, 3.0].iter().map(|t| dir.iter().map(|d| 1.0 + t * d).collect()).collect();
        let p = pca_project(&pts).unwrap();
        assert!((p.explained_variance - 1.0).abs() < 1e-12);
        assert!(p.points.iter().all(|q| q.coords[1].abs() < 1e-9));
        let mean: f64 = p.points.iter().map(|q| q.coords[0]).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let p = pca_project(&vec![vec![1.0, 2.0]; 4]).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.explained_variance, 0.0);
        assert!(p.points.iter().all(|q| q.coords == [0.0, 0.0]));
    }

    #[test]
    fn duplication_leaves_projection_unchanged() {
        let pts = vec![vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 1.0], vec![2.0, 1.0, 0.0], vec![1.0, 1.0, 1.5]];
        let once = pca_project(&pts).unwrap();
        let twice: Vec<Vec<f64>> = pts.iter().flat_map(|p| [p.clone(), p.clone()]).collect();
        let dup = pca_project(&twice).unwrap();
        assert!((once.explained_variance - dup.explained_variance).abs() < 1e-12);
        for (i, p) in once.points.iter().enumerate() {
            for c in 0..2 {
                assert!((p.coords[c] - dup.points[2 * i].coords[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_rejects_too_few_or_ragged() {
        assert!(pca_project(&[vec![1.0], vec![2.0]]).is_err());
        assert!(pca_project(&[vec![1.0], vec![2.0], vec![1.0, 2.0]]).is_err());
    }

    fn random_set(seed: u64, kind: AdapterKind) -> AdapterSet {
        let enc = EncoderConfig { model_dim: 6, num_layers: 2, ..EncoderConfig::default() };
        let cfg = AdapterConfig { kind, num_experts: 2, rank: 2, alpha: 4.0, ..AdapterConfig::default() };
        let mut set = AdapterSet::init(&enc, &cfg, seed).unwrap();
        let mut rng = RngState::new(seed ^ 99);
        for p in set.params_mut() {
            *p = randn(p.shape(), 1.0, &mut rng).unwrap();
        }
        set
    }

    #[test]
    fn cosine_self_and_negation() {
        let a = random_set(1, AdapterKind::Lora);
        let mut neg = a.clone();
        for site in &mut neg.sites {
            if let SiteAdapter::Lora(e) = site {
                e.b = e.b.scale(-1.0);
            }
        }
        let same = layer_cosine(&a, &a).unwrap();
        let opp = layer_cosine(&a, &neg).unwrap();
        for (s, o) in same.values.iter().zip(&opp.values) {
            assert!((s.unwrap() - 1.0).abs() < 1e-12);
            assert!((o.unwrap() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_zero_is_undefined_and_mismatch_fails() {
        let a = random_set(1, AdapterKind::Lora);
        let enc = EncoderConfig { model_dim: 6, num_layers: 2, ..EncoderConfig::default() };
        let zero = AdapterSet::init(&enc, &AdapterConfig { kind: AdapterKind::Lora, rank: 2, alpha: 4.0, ..AdapterConfig::default() }, 0).unwrap();
        assert_eq!(layer_cosine(&a, &zero).unwrap().values, vec![None, None]);
        assert!(layer_cosine(&a, &random_set(1, AdapterKind::Moe)).is_err());
    }

    #[test]
    fn entropy_closed_form() {
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[0.0, 1.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn untrained_router_is_uniform() {
        use crate::data::{generate_conflict_dataset, ConflictSpec};
        let spec = ConflictSpec::new(2, 8, 64, 3);
        let data = generate_conflict_dataset(&spec).unwrap();
        let enc = Encoder::build_frozen(EncoderConfig { vocab_size: 64, model_dim: 8, num_layers: 2, ffn_dim: 16, max_seq_len: 8, ..EncoderConfig::default() }).unwrap();
        let set = AdapterSet::init(enc.config(), &AdapterConfig { num_experts: 4, rank: 2, ..AdapterConfig::default() }, 0).unwrap();
        let rep = expert_utilization(&enc, &set, &data, SignaturePooling::Mean).unwrap();
        assert_eq!(rep.tasks.len(), 2);
        for t in &rep.tasks {
            for (p, h) in t.mean_routing.iter().zip(&t.entropy) {
                assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-12));
                assert!((h - 4f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_routing_has_zero_entropy() {
        use crate::moe_lora::{LayerMask, RoutingSignature};
        let sig = |e: usize| RoutingSignature {
            values: Tensor::new(vec![1, 2, 3], (0..6).map(|i| if i % 3 == e { 1.0 } else { 0.0 }).collect()).unwrap(),
            layer_mask: LayerMask::all(1),
        };
        let rep = utilization_from_signatures(&[0, 0, 1], &[sig(2), sig(2), sig(1)], 3).unwrap();
        assert_eq!(rep.tasks.len(), 2);
        assert_eq!(rep.task(0).unwrap().dominant_expert, vec![2, 2]);
        assert_eq!(rep.task(1).unwrap().dominant_expert, vec![1, 1]);
        assert!(rep.tasks.iter().all(|t| t.entropy.iter().all(|&h| h == 0.0)));
        assert_eq!(rep.dominant_disagreement(0, 1), Some(1.0));
    }

    #[test]
    fn convergence_passthrough_and_grid_errors() {
        let a = Series { name: "a".into(), points: vec![(0, 0.1), (100, 0.5)] };
        let b = Series { name: "b".into(), points: vec![(0, 0.2), (100, 0.4)] };
        let t = convergence_export(&[a.clone()], false).unwrap();
        assert_eq!(t.rows, vec![vec![Some(0.1)], vec![Some(0.5)]]);
        let t = convergence_export(&[a.clone(), b], false).unwrap();
        assert_eq!(t.steps, vec![0, 100]);
        assert_eq!(t.columns.len(), 2);

        let c = Series { name: "c".into(), points: vec![(0, 0.0), (50, 0.3), (100, 1.0)] };
        assert!(convergence_export(&[a.clone(), c.clone()], false).is_err());
        let t = convergence_export(&[a, c], true).unwrap();
        assert_eq!(t.steps, vec![0, 50, 100]);
        assert!((t.rows[1][0].unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn csv_headers() {
        let t = ConvergenceTable { columns: vec!["x".into()], steps: vec![0], rows: vec![vec![None]] };
        let mut buf = Vec::new();
        write_convergence_csv(&t, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,x\n0,\n");
    }
}
