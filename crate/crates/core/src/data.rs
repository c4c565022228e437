//! Pair datasets, the synthetic task-conflict generator and retrieval metrics.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{hex, Encoder, EncoderConfig, Sample};
use crate::error::{Error, Result};
use crate::moe_lora::{extract_signature, AdapterSet, LayerMask, RoutingSignature, SignaturePooling};
use crate::numcore::{RngState, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairRecord {
    pub task_id: usize,
    pub query: Sample,
    pub positive: Sample,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    task_id: usize,
    query: Vec<u32>,
    positive: Vec<u32>,
}

impl PairRecord {
    pub fn new(task_id: usize, query: Vec<u32>, positive: Vec<u32>) -> Self {
        Self {
            task_id,
            query: Sample::new(task_id, query),
            positive: Sample::new(task_id, positive),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub task_count: usize,
}

impl PairDataset {
    pub fn new(records: Vec<PairRecord>) -> Self {
        let task_count = records.iter().map(|r| r.task_id + 1).max().unwrap_or(0);
        Self { records, task_count }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.task_id >= self.task_count {
                return Err(Error::invalid(format!("record {i}: task {} >= {}", r.task_id, self.task_count)));
            }
            r.query
                .validate(config)
                .and_then(|_| r.positive.validate(config))
                .map_err(|e| Error::invalid(format!("record {i}: {e}")))?;
        }
        Ok(())
    }

    /// Records of one task, keeping the global task count.
    pub fn task_subset(&self, task_id: usize) -> Self {
        Self {
            records: self.records.iter().filter(|r| r.task_id == task_id).cloned().collect(),
            task_count: self.task_count,
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let rec = JsonRecord {
                task_id: r.task_id,
                query: r.query.tokens.clone(),
                positive: r.positive.tokens.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the JSONL encoding.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<reader>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::format(Some(i + 1), e.to_string()))?;
            records.push(PairRecord::new(rec.task_id, rec.query, rec.positive));
        }
        Ok(Self::new(records))
    }
}

/// Token layout of the synthetic conflict corpus.
///
/// Every query is `[marker, marker, key, instance, eos]` and every positive
/// is `[marker, mapped_key, instance, eos]`. Markers are drawn from a pool
/// private to the task; `mapped_key = perm_task(key)` with a different
/// permutation per task, so the same `(key, instance)` content maps to a
/// different positive under each task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictSpec {
    pub tasks: usize,
    pub samples_per_task: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub num_keys: usize,
    pub markers_per_task: usize,
    pub query_markers: usize,
    pub eos_id: u32,
}

impl ConflictSpec {
    pub fn new(tasks: usize, samples_per_task: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            tasks,
            samples_per_task,
            vocab_size,
            seed,
            num_keys: 8,
            markers_per_task: 8,
            query_markers: 2,
            eos_id: 0,
        }
    }

    pub fn num_instances(&self) -> usize {
        self.samples_per_task.div_ceil(self.num_keys.max(1))
    }

    pub fn query_key_token(&self, key: usize) -> u32 {
        (1 + key) as u32
    }

    pub fn positive_key_token(&self, key: usize) -> u32 {
        (1 + self.num_keys + key) as u32
    }

    pub fn instance_token(&self, inst: usize) -> u32 {
        (1 + 2 * self.num_keys + inst) as u32
    }

    pub fn marker_token(&self, task: usize, i: usize) -> u32 {
        (1 + 2 * self.num_keys + self.num_instances() + task * self.markers_per_task + i) as u32
    }

    pub fn tokens_needed(&self) -> usize {
        1 + 2 * self.num_keys + self.num_instances() + self.tasks * self.markers_per_task
    }

    /// Sequence length of the longest generated sample.
    pub fn max_len(&self) -> usize {
        self.query_markers + 3
    }
}

/// Per-task bijections used by [`generate_conflict_dataset`].
pub fn conflict_permutations(spec: &ConflictSpec) -> Vec<Vec<usize>> {
    let n = spec.num_keys;
    let mut rng = RngState::derive(spec.seed, "conflict-perm", 0);
    let mut relabel: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut relabel);
    let mut outer: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut outer);
    let mut shifts: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut shifts);
    // Distinct cyclic shifts keep every key's image distinct across tasks.
    (0..spec.tasks)
        .map(|t| (0..n).map(|k| outer[(relabel[k] + shifts[t]) % n]).collect())
        .collect()
}

pub fn generate_conflict_dataset(spec: &ConflictSpec) -> Result<PairDataset> {
    if spec.tasks < 2 {
        return Err(Error::invalid(format!("need at least 2 tasks, got {}", spec.tasks)));
    }
    if spec.samples_per_task == 0 || spec.num_keys < 2 || spec.markers_per_task == 0 {
        return Err(Error::invalid("samples_per_task, num_keys and markers_per_task must be positive (num_keys >= 2)"));
    }
    if spec.tasks > spec.num_keys {
        return Err(Error::invalid(format!(
            "{} tasks need at least as many keys, got {}",
            spec.tasks, spec.num_keys
        )));
    }
    if spec.tokens_needed() > spec.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary of {} is too small; the layout needs {} ids",
            spec.vocab_size,
            spec.tokens_needed()
        )));
    }
    let perms = conflict_permutations(spec);
    let instances = spec.num_instances();
    let mut records = Vec::with_capacity(spec.tasks * spec.samples_per_task);
    for (task, perm) in perms.iter().enumerate() {
        let mut rng = RngState::derive(spec.seed, "conflict-task", task as u64);
        let mut content: Vec<(usize, usize)> = (0..spec.num_keys)
            .flat_map(|k| (0..instances).map(move |c| (k, c)))
            .collect();
        rng.shuffle(&mut content);
        for &(key, inst) in content.iter().take(spec.samples_per_task) {
            let mut query: Vec<u32> = (0..spec.query_markers)
                .map(|_| spec.marker_token(task, rng.below(spec.markers_per_task)))
                .collect();
            query.extend([spec.query_key_token(key), spec.instance_token(inst), spec.eos_id]);
            let positive = vec![
                spec.marker_token(task, rng.below(spec.markers_per_task)),
                spec.positive_key_token(perm[key]),
                spec.instance_token(inst),
                spec.eos_id,
            ];
            records.push(PairRecord::new(task, query, positive));
        }
    }
    Ok(PairDataset {
        records,
        task_count: spec.tasks,
    })
}

/// Retrieval metrics for one group of queries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub queries: usize,
    pub hit_at_1: f64,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl Metrics {
    fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mut recall = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            recall.insert(k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n);
            ndcg.insert(k, ranks.iter().map(|&r| ndcg_single(r, k)).sum::<f64>() / n);
        }
        Self {
            queries: ranks.len(),
            hit_at_1: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
            recall,
            ndcg,
        }
    }

    /// `hit@1` plus `recall@k` and `ndcg@k` for every requested `k > 1`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("queries".into(), self.queries.into());
        m.insert("hit@1".into(), self.hit_at_1.into());
        for (k, v) in &self.recall {
            if *k > 1 {
                m.insert(format!("recall@{k}"), (*v).into());
            }
        }
        for (k, v) in &self.ndcg {
            if *k > 1 {
                m.insert(format!("ndcg@{k}"), (*v).into());
            }
        }
        serde_json::Value::Object(m)
    }
}

/// Single-relevant-item NDCG: `1 / log2(1 + rank)` inside the cutoff.
pub fn ndcg_single(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / (1.0 + rank as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalResult {
    pub pool_size: usize,
    pub overall: Metrics,
    pub per_task: BTreeMap<usize, Metrics>,
}

impl EvalResult {
    pub fn to_json(&self) -> serde_json::Value {
        let per_task: serde_json::Map<String, serde_json::Value> = self
            .per_task
            .iter()
            .map(|(t, m)| (t.to_string(), m.to_json()))
            .collect();
        serde_json::json!({
            "pool_size": self.pool_size,
            "overall": self.overall.to_json(),
            "per_task": per_task,
        })
    }
}

/// 1-based rank of candidate `own` given its similarity row; ties go to the lower index.
pub fn rank_of(sims: &[f64], own: usize) -> usize {
    let s = sims[own];
    1 + sims
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < own))
        .count()
}

/// Ranks every query against the full positive pool.
pub fn evaluate_embeddings(
    queries: &[Tensor],
    positives: &[Tensor],
    task_ids: &[usize],
    ks: &[usize],
) -> Result<EvalResult> {
    if queries.len() != positives.len() || queries.len() != task_ids.len() {
        return Err(Error::invalid("queries, positives and task ids must align"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut ks: Vec<usize> = ks.iter().copied().filter(|&k| k > 0).collect();
    ks.sort_unstable();
    ks.dedup();
    let ranks: Vec<usize> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let sims: Vec<f64> = positives.iter().map(|p| q.dot(p)).collect();
            rank_of(&sims, i)
        })
        .collect();
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&t, &r) in task_ids.iter().zip(&ranks) {
        buckets.entry(t).or_default().push(r);
    }
    Ok(EvalResult {
        pool_size: positives.len(),
        overall: Metrics::from_ranks(&ranks, &ks),
        per_task: buckets
            .into_iter()
            .map(|(t, r)| (t, Metrics::from_ranks(&r, &ks)))
            .collect(),
    })
}

/// Embedding, routing signature and task of one sample.
#[derive(Debug, Clone)]
pub struct Embedded {
    pub embedding: Tensor,
    pub signature: Option<RoutingSignature>,
}

/// Embeds samples in chunks that share one tape for the frozen weights.
pub fn embed_all(
    encoder: &Encoder,
    adapters: Option<&AdapterSet>,
    samples: &[&Sample],
    pooling: SignaturePooling,
) -> Result<Vec<Embedded>> {
    const CHUNK: usize = 64;
    let mask = LayerMask::all(encoder.config().num_layers);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(CHUNK) {
        let tape = Tape::new();
        let bound = encoder.bind(&tape);
        let bound_adapters = adapters.map(|a| a.bind(&tape, false));
        for s in chunk {
            let (emb, routing) = bound.embed(s, bound_adapters.as_ref())?;
            let signature = match adapters {
                Some(_) => Some(extract_signature(&routing, s.tokens.len(), &mask, pooling)?),
                None => None,
            };
            let embedding = emb.value();
            let d = embedding.len();
            out.push(Embedded {
                embedding: embedding.reshape(vec![d])?,
                signature,
            });
        }
    }
    Ok(out)
}

/// Embeds the dataset in a canonical record order and ranks each query against all positives.
pub fn evaluate(
    encoder: &Encoder,
    adapters: Option<&AdapterSet>,
    dataset: &PairDataset,
    ks: &[usize],
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut records: Vec<&PairRecord> = dataset.records.iter().collect();
    records.sort();
    let queries: Vec<&Sample> = records.iter().map(|r| &r.query).collect();
    let positives: Vec<&Sample> = records.iter().map(|r| &r.positive).collect();
    let q = embed_all(encoder, adapters, &queries, SignaturePooling::Mean)?;
    let p = embed_all(encoder, adapters, &positives, SignaturePooling::Mean)?;
    let tasks: Vec<usize> = records.iter().map(|r| r.task_id).collect();
    evaluate_embeddings(
        &q.into_iter().map(|e| e.embedding).collect::<Vec<_>>(),
        &p.into_iter().map(|e| e.embedding).collect::<Vec<_>>(),
        &tasks,
        ks,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    #[test]
    fn generator_is_deterministic() {
        let spec = ConflictSpec::new(2, 50, 256, 3);
        assert_eq!(generate_conflict_dataset(&spec).unwrap(), generate_conflict_dataset(&spec).unwrap());
    }

    #[test]
    fn same_content_maps_differently_per_task() {
        let spec = ConflictSpec::new(3, 40, 256, 1);
        let ds = generate_conflict_dataset(&spec).unwrap();
        // content = (key, instance) tokens; markers only identify the task.
        let mut images: HashMap<(u32, u32), HashMap<usize, u32>> = HashMap::new();
        for r in &ds.records {
            let n = r.query.tokens.len();
            let content = (r.query.tokens[n - 3], r.query.tokens[n - 2]);
            images.entry(content).or_default().insert(r.task_id, r.positive.tokens[1]);
        }
        let shared: Vec<_> = images.values().filter(|m| m.len() > 1).collect();
        assert!(!shared.is_empty());
        for m in shared {
            let distinct: HashSet<_> = m.values().collect();
            assert_eq!(distinct.len(), m.len());
        }
    }

    #[test]
    fn mapping_is_bijection_within_task() {
        let spec = ConflictSpec::new(2, 200, 256, 9);
        let ds = generate_conflict_dataset(&spec).unwrap();
        for task in 0..2 {
            let sub = ds.task_subset(task);
            assert_eq!(sub.len(), 200);
            let positives: HashSet<_> = sub.records.iter().map(|r| r.positive.tokens[1..].to_vec()).collect();
            assert_eq!(positives.len(), 200);
            let mut key_map: HashMap<u32, HashSet<u32>> = HashMap::new();
            for r in &sub.records {
                key_map.entry(r.query.tokens[2]).or_default().insert(r.positive.tokens[1]);
            }
            assert!(key_map.values().all(|s| s.len() == 1));
            let images: HashSet<u32> = key_map.values().flatten().copied().collect();
            assert_eq!(images.len(), key_map.len());
        }
    }

    #[test]
    fn generator_validation() {
        assert!(generate_conflict_dataset(&ConflictSpec::new(1, 10, 256, 0)).is_err());
        assert!(matches!(
            generate_conflict_dataset(&ConflictSpec::new(2, 200, 40, 0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let ds = generate_conflict_dataset(&ConflictSpec::new(2, 5, 64, 2)).unwrap();
        let back = PairDataset::read_jsonl(ds.to_jsonl().as_bytes()).unwrap();
        assert_eq!(back, ds);

        let text = "{\"task_id\":0,\"query\":[1,0],\"positive\":[2,0]}\n{\"task_id\":1,\"query\":[1,0]}\n";
        match PairDataset::read_jsonl(text.as_bytes()) {
            Err(Error::Format { line, message }) => {
                assert_eq!(line, Some(2));
                assert!(message.contains("positive"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let empty = PairDataset::read_jsonl("".as_bytes()).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn ndcg_second_of_ten() {
        assert!((ndcg_single(2, 5) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((ndcg_single(2, 5) - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_single(6, 5), 0.0);
        assert_eq!(ndcg_single(1, 1), 1.0);
    }

    #[test]
    fn single_pair_pool() {
        let q = vec![Tensor::vector(vec![1.0, 0.0])];
        let r = evaluate_embeddings(&q, &q, &[0], &[1, 5]).unwrap();
        assert_eq!(r.overall.hit_at_1, 1.0);
        assert_eq!(r.overall.ndcg[&5], 1.0);
        assert_eq!(r.overall.recall[&5], 1.0);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 0), 1);
        assert_eq!(rank_of(&[0.5, 0.5, 0.1], 1), 2);
        assert_eq!(rank_of(&[0.1, 0.9, 0.1], 2), 3);
    }

    #[test]
    fn report_for_k1_has_hit_only() {
        let q = vec![Tensor::vector(vec![1.0, 0.0]), Tensor::vector(vec![0.0, 1.0])];
        let r = evaluate_embeddings(&q, &q, &[0, 1], &[1]).unwrap();
        let json = r.overall.to_json();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["hit@1".to_string(), "queries".to_string()]);
    }
}
