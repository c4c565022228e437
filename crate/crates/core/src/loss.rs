//! In-batch contrastive objectives.
//!
//! For query `i` the positive is target `i` and the negatives are the other
//! `B - 1` targets. The routing-aware variant scales each negative term in
//! the softmax denominator by a weight that decays with the L1 distance
//! between the query's and the negative's routing signatures; the weights are
//! renormalized to sum to the number of negatives and are constants for
//! differentiation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe_lora::RoutingSignature;
use crate::numcore::{Tensor, Var};

/// In-batch negative-weighting parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EansParams {
    pub w_min: f64,
    pub w_max: f64,
    pub sigma: f64,
}

impl Default for EansParams {
    fn default() -> Self {
        Self {
            w_min: 0.1,
            w_max: 10.0,
            sigma: 0.002,
        }
    }
}

impl EansParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min >= 0.0) || !(self.w_max > self.w_min) {
            return Err(Error::invalid(format!(
                "need 0 <= w_min < w_max, got w_min={} w_max={}",
                self.w_min, self.w_max
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Embeddings and signatures for one batch of `B` query/target pairs.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'t> {
    /// `B x d`, rows L2-normalized.
    pub queries: Var<'t>,
    /// `B x d`, rows L2-normalized.
    pub targets: Var<'t>,
    /// Empty when only the unweighted objective is needed.
    pub query_signatures: Vec<RoutingSignature>,
    pub target_signatures: Vec<RoutingSignature>,
    pub temperature: f64,
}

impl<'t> ContrastiveBatch<'t> {
    pub fn new(
        queries: Var<'t>,
        targets: Var<'t>,
        query_signatures: Vec<RoutingSignature>,
        target_signatures: Vec<RoutingSignature>,
        temperature: f64,
    ) -> Result<Self> {
        let qs = queries.shape();
        let ts = targets.shape();
        if qs.len() != 2 || qs != ts {
            return Err(Error::invalid(format!("query {qs:?} and target {ts:?} shapes must match")));
        }
        if qs[0] < 2 {
            return Err(Error::invalid("a batch needs at least 2 pairs"));
        }
        if query_signatures.len() != target_signatures.len()
            || (!query_signatures.is_empty() && query_signatures.len() != qs[0])
        {
            return Err(Error::invalid("signature counts must match the batch size"));
        }
        for (name, v) in [("query", &queries), ("target", &targets)] {
            let bad = v.with_value(|t| {
                (0..t.rows()).find(|&i| {
                    let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    (n - 1.0).abs() > 1e-6
                })
            });
            if let Some(i) = bad {
                return Err(Error::invalid(format!("{name} row {i} is not L2-normalized")));
            }
        }
        Ok(Self {
            queries,
            targets,
            query_signatures,
            target_signatures,
            temperature,
        })
    }

    pub fn size(&self) -> usize {
        self.queries.shape()[0]
    }
}

/// `mean_i -log( exp(s_ii/t) / sum_j w_ij exp(s_ij/t) )` with `w_ii = 1`.
///
/// `weights[i][j]` for `j != i` multiplies negative `j` of query `i`; the
/// diagonal is ignored.
pub fn weighted_infonce<'t>(batch: &ContrastiveBatch<'t>, weights: &[Vec<f64>]) -> Result<Var<'t>> {
    let tau = batch.temperature;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let b = batch.size();
    if weights.len() != b || weights.iter().any(|r| r.len() != b) {
        return Err(Error::invalid("weight matrix must be B x B"));
    }
    let logits = batch.queries.matmul_t(&batch.targets)?.scale(1.0 / tau);
    let mut log_w = vec![0.0; b * b];
    for i in 0..b {
        for j in (0..b).filter(|&j| j != i) {
            log_w[i * b + j] = weights[i][j].ln();
        }
    }
    let tape = logits.tape();
    let shifted = logits.add(&tape.constant_owned(Tensor::new(vec![b, b], log_w)?))?;
    let diag: Vec<usize> = (0..b).collect();
    let positive = logits.pick_per_row(&diag)?;
    Ok(shifted.log_sum_exp_rows()?.sub(&positive)?.mean())
}

/// Standard in-batch InfoNCE.
pub fn infonce<'t>(batch: &ContrastiveBatch<'t>) -> Result<Var<'t>> {
    let b = batch.size();
    weighted_infonce(batch, &vec![vec![1.0; b]; b])
}

/// Mean absolute difference of two signatures over the included layers.
pub fn routing_distance(a: &RoutingSignature, b: &RoutingSignature) -> Result<f64> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::invalid(format!(
            "signature shapes differ: {:?} vs {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    if a.layer_mask != b.layer_mask {
        return Err(Error::invalid("signature layer masks differ"));
    }
    let (l, g, n) = a.dims();
    let included = a.layer_mask.included();
    if included == 0 {
        return Err(Error::invalid("layer mask selects no layers"));
    }
    let per_layer = g * n;
    let mut total = 0.0;
    for layer in (0..l).filter(|&i| a.layer_mask.0[i]) {
        let r = layer * per_layer..(layer + 1) * per_layer;
        total += a.values.data()[r.clone()]
            .iter()
            .zip(&b.values.data()[r])
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    }
    Ok(total / (included * per_layer) as f64)
}

/// `w_min + (w_max - w_min) exp(-d / sigma)`.
pub fn decay_weight(d: f64, params: &EansParams) -> f64 {
    params.w_min + (params.w_max - params.w_min) * (-d / params.sigma).exp()
}

/// Rescales `w` so it sums to its length.
pub fn normalize_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::invalid("no weights to normalize"));
    }
    if let Some(bad) = w.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("weights must be positive and finite, got {bad}")));
    }
    let sum: f64 = w.iter().sum();
    let m = w.len() as f64;
    Ok(w.iter().map(|v| v * m / sum).collect())
}

/// Normalized negative weights; row `i` holds query `i`, diagonal set to 1.
pub fn negative_weights(batch: &ContrastiveBatch<'_>, params: &EansParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    let b = batch.size();
    if batch.query_signatures.len() != b {
        return Err(Error::invalid("routing-aware loss needs a signature for every sample"));
    }
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let raw = (0..b)
            .filter(|&j| j != i)
            .map(|j| {
                routing_distance(&batch.query_signatures[i], &batch.target_signatures[j])
                    .map(|d| decay_weight(d, params))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut norm = normalize_weights(&raw)?.into_iter();
        out.push((0..b).map(|j| if j == i { 1.0 } else { norm.next().expect("b-1 weights") }).collect());
    }
    Ok(out)
}

/// Routing-aware loss together with the weights it used.
pub fn eans_with_weights<'t>(
    batch: &ContrastiveBatch<'t>,
    params: &EansParams,
) -> Result<(Var<'t>, Vec<Vec<f64>>)> {
    let w = negative_weights(batch, params)?;
    Ok((weighted_infonce(batch, &w)?, w))
}

pub fn eans<'t>(batch: &ContrastiveBatch<'t>, params: &EansParams) -> Result<Var<'t>> {
    eans_with_weights(batch, params).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Unweighted InfoNCE.
    Warmup,
    /// Routing-weighted negatives.
    Refinement,
}

impl Stage {
    pub fn at(step: usize, t_warmup: usize) -> Self {
        if step < t_warmup {
            Stage::Warmup
        } else {
            Stage::Refinement
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Warmup => "infonce",
            Stage::Refinement => "eans",
        }
    }
}

/// InfoNCE before `t_warmup`, routing-weighted from `t_warmup` on.
pub fn staged_loss<'t>(
    batch: &ContrastiveBatch<'t>,
    params: &EansParams,
    step: usize,
    t_warmup: usize,
) -> Result<Var<'t>> {
    match Stage::at(step, t_warmup) {
        Stage::Warmup => infonce(batch),
        Stage::Refinement => eans(batch, params),
    }
}
