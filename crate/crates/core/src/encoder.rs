//! Frozen toy transformer encoder.
//!
//! Token embeddings plus sinusoidal positions feed `L` pre-norm blocks of
//! causal single-head attention and a SiLU feed-forward. The embedding of a
//! sequence is the L2-normalized final hidden state at its last
//! (end-of-sequence) position. Adapters attach to the projections listed in
//! [`EncoderConfig::projections`]; each `(layer, projection)` pair is one
//! injection site.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::moe_lora::{AdapterSet, BoundAdapters, TokenRouting};
use crate::numcore::{randn, RngState, Tape, Tensor, Var};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Projection {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "k")]
    Key,
    #[serde(rename = "v")]
    Value,
    #[serde(rename = "o")]
    Output,
}

impl std::str::FromStr for Projection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" => Ok(Self::Query),
            "k" => Ok(Self::Key),
            "v" => Ok(Self::Value),
            "o" => Ok(Self::Output),
            other => Err(Error::invalid(format!("unknown projection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    /// Projections that carry an adapter; `G` is its length.
    pub projections: Vec<Projection>,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub eos_id: u32,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            model_dim: 64,
            num_layers: 4,
            projections: vec![Projection::Query, Projection::Key, Projection::Value],
            ffn_dim: 128,
            max_seq_len: 32,
            eos_id: 0,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 1 {
            return Err(Error::invalid("num_layers must be >= 1"));
        }
        if self.projections.is_empty() {
            return Err(Error::invalid("at least one adapter projection is required"));
        }
        let mut seen = self.projections.clone();
        seen.sort_by_key(|p| *p as u8);
        seen.dedup();
        if seen.len() != self.projections.len() {
            return Err(Error::invalid("adapter projections must be distinct"));
        }
        if self.model_dim < 2 {
            return Err(Error::invalid("model_dim must be >= 2"));
        }
        if self.vocab_size < 2 || self.eos_id as usize >= self.vocab_size {
            return Err(Error::invalid("eos_id must lie inside the vocabulary"));
        }
        if self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("ffn_dim and max_seq_len must be positive"));
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.num_layers * self.projections.len()
    }

    fn slot_of(&self, p: Projection) -> Option<usize> {
        self.projections.iter().position(|&q| q == p)
    }
}

/// One input sequence, terminated by the end-of-sequence id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub task_id: usize,
    pub tokens: Vec<u32>,
}

impl Sample {
    pub fn new(task_id: usize, tokens: Vec<u32>) -> Self {
        Self { task_id, tokens }
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let last = *self
            .tokens
            .last()
            .ok_or_else(|| Error::invalid("sample has no tokens"))?;
        if last != config.eos_id {
            return Err(Error::invalid(format!(
                "sample must end with eos id {}, ends with {last}",
                config.eos_id
            )));
        }
        if let Some(&bad) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary of {}",
                config.vocab_size
            )));
        }
        if self.tokens.len() > config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                self.tokens.len(),
                config.max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
}

/// Backbone whose weights never change after [`Encoder::build_frozen`].
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    token_embedding: Tensor,
    positions: Tensor,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn build_frozen(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = RngState::derive(config.init_seed, "encoder", 0);
        let token_embedding = randn(&[config.vocab_size, d], 1.0, &mut rng)?;
        let proj_scale = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| {
                Ok(Block {
                    wq: randn(&[d, d], proj_scale, &mut rng)?,
                    wk: randn(&[d, d], proj_scale, &mut rng)?,
                    wv: randn(&[d, d], proj_scale, &mut rng)?,
                    wo: randn(&[d, d], proj_scale, &mut rng)?,
                    w1: randn(&[config.ffn_dim, d], proj_scale, &mut rng)?,
                    w2: randn(&[d, config.ffn_dim], 1.0 / (config.ffn_dim as f64).sqrt(), &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let positions = sinusoidal_positions(config.max_seq_len, d);
        Ok(Self {
            config,
            token_embedding,
            positions,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_sites(&self) -> usize {
        self.config.num_sites()
    }

    /// SHA-256 over every frozen weight, hex encoded.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&self.token_embedding);
        feed(&self.positions);
        for b in &self.blocks {
            for t in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                feed(t);
            }
        }
        hex(&h.finalize())
    }

    /// Registers the frozen weights on `tape` as constants.
    pub fn bind<'t>(&'t self, tape: &'t Tape) -> BoundEncoder<'t> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                wq: tape.constant(&b.wq),
                wk: tape.constant(&b.wk),
                wv: tape.constant(&b.wv),
                wo: tape.constant(&b.wo),
                w1: tape.constant(&b.w1),
                w2: tape.constant(&b.w2),
            })
            .collect();
        BoundEncoder {
            encoder: self,
            tape,
            blocks,
        }
    }

    /// Embeds one sample on a private tape.
    pub fn embed(&self, sample: &Sample, adapters: Option<&AdapterSet>) -> Result<(Tensor, TokenRouting)> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let adapters = adapters.map(|a| a.bind(&tape, false));
        let (emb, routing) = bound.embed(sample, adapters.as_ref())?;
        let t = emb.value();
        let d = t.len();
        Ok((t.reshape(vec![d])?, routing))
    }

    fn input_rows(&self, tokens: &[u32]) -> Tensor {
        let d = self.config.model_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, &tok) in tokens.iter().enumerate() {
            let e = self.token_embedding.row(tok as usize);
            let p = self.positions.row(pos);
            data.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        Tensor::new(vec![tokens.len(), d], data).expect("rows sized from tokens")
    }
}

#[derive(Debug, Clone)]
struct BoundBlock<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    w1: Var<'t>,
    w2: Var<'t>,
}

/// An [`Encoder`] whose frozen weights live on one tape.
pub struct BoundEncoder<'t> {
    encoder: &'t Encoder,
    tape: &'t Tape,
    blocks: Vec<BoundBlock<'t>>,
}

impl<'t> BoundEncoder<'t> {
    /// Last-token embedding `1 x d` and the routing captured at each site.
    pub fn embed(
        &self,
        sample: &Sample,
        adapters: Option<&BoundAdapters<'t>>,
    ) -> Result<(Var<'t>, TokenRouting)> {
        let config = &self.encoder.config;
        sample.validate(config)?;
        let g = config.projections.len();
        let n = adapters.map_or(0, |a| match a.sites.first() {
            Some(crate::moe_lora::BoundSite::Moe(m)) => m.experts.len(),
            Some(crate::moe_lora::BoundSite::Lora(_)) => 1,
            None => 0,
        });
        if let Some(a) = adapters {
            if a.sites.len() != config.num_sites() {
                return Err(Error::invalid(format!(
                    "adapter set has {} sites, encoder has {}",
                    a.sites.len(),
                    config.num_sites()
                )));
            }
        }
        let mut routing = TokenRouting::empty(config.num_layers, g, n);
        let t = sample.tokens.len();
        let d = config.model_dim;

        let mut h = self.tape.constant_owned(self.encoder.input_rows(&sample.tokens));
        for (layer, block) in self.blocks.iter().enumerate() {
            let mut project = |p: Projection, w0: &Var<'t>, x: &Var<'t>| -> Result<Var<'t>> {
                match (adapters, config.slot_of(p)) {
                    (Some(a), Some(slot)) => {
                        let (out, r) = a.apply(layer, slot, w0, x)?;
                        routing.record(layer, slot, r);
                        Ok(out)
                    }
                    _ => x.matmul_t(w0),
                }
            };
            let xn = h.rms_norm_rows(RMS_EPS)?;
            let q = project(Projection::Query, &block.wq, &xn)?;
            let k = project(Projection::Key, &block.wk, &xn)?;
            let v = project(Projection::Value, &block.wv, &xn)?;
            let attn = q.matmul_t(&k)?.causal_softmax((d as f64).sqrt())?;
            let mixed = attn.matmul(&v)?;
            let o = project(Projection::Output, &block.wo, &mixed)?;
            h = h.add(&o)?;
            let hn = h.rms_norm_rows(RMS_EPS)?;
            let ff = hn.matmul_t(&block.w1)?.silu().matmul_t(&block.w2)?;
            h = h.add(&ff)?;
        }
        let emb = h.row(t - 1)?.l2_normalize_rows()?;
        Ok((emb, routing))
    }
}

fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("sized")
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Dot product of two unit vectors.
pub fn similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    for (name, t) in [("first", a), ("second", b)] {
        let norm = t.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{name} vector not L2-normalized (norm {norm})")));
        }
    }
    Ok(a.dot(b).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe_lora::{AdapterConfig, AdapterKind};

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 32,
            model_dim: 8,
            num_layers: 2,
            ffn_dim: 16,
            max_seq_len: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn deterministic_build() {
        let s = Sample::new(0, vec![3, 4, 5, 0]);
        let a = Encoder::build_frozen(small()).unwrap().embed(&s, None).unwrap().0;
        let b = Encoder::build_frozen(small()).unwrap().embed(&s, None).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn site_counts() {
        let one = EncoderConfig {
            num_layers: 1,
            projections: vec![Projection::Query],
            ..small()
        };
        assert_eq!(one.num_sites(), 1);
        assert_eq!(EncoderConfig::default().num_sites(), 12);
    }

    #[test]
    fn zero_b_adapters_leave_embedding_unchanged() {
        let enc = Encoder::build_frozen(small()).unwrap();
        let s = Sample::new(0, vec![7, 1, 9, 0]);
        let cfg = AdapterConfig {
            kind: AdapterKind::Moe,
            num_experts: 3,
            rank: 2,
            gate_init_std: 0.5,
            ..AdapterConfig::default()
        };
        let adapters = AdapterSet::init(enc.config(), &cfg, 4).unwrap();
        let (plain, _) = enc.embed(&s, None).unwrap();
        let (adapted, routing) = enc.embed(&s, Some(&adapters)).unwrap();
        assert_eq!(plain, adapted);
        assert!(routing.captures.iter().all(Option::is_some));
    }

    #[test]
    fn embedding_is_unit_norm() {
        let enc = Encoder::build_frozen(small()).unwrap();
        let mut rng = RngState::new(8);
        for _ in 0..20 {
            let len = 1 + rng.below(7);
            let mut tokens: Vec<u32> = (0..len - 1).map(|_| 1 + rng.below(31) as u32).collect();
            tokens.push(0);
            let (e, _) = enc.embed(&Sample::new(0, tokens), None).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn positional_information_present() {
        let enc = Encoder::build_frozen(small()).unwrap();
        let (a, _) = enc.embed(&Sample::new(0, vec![3, 9, 0]), None).unwrap();
        let (b, _) = enc.embed(&Sample::new(0, vec![9, 3, 0]), None).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn invalid_samples_rejected() {
        let enc = Encoder::build_frozen(small()).unwrap();
        for tokens in [vec![], vec![3, 4], vec![40, 0], vec![1; 9]] {
            let err = enc.embed(&Sample::new(0, tokens), None).unwrap_err();
            assert!(matches!(err, Error::InvalidArgument(_)));
        }
    }

    #[test]
    fn similarity_extremes() {
        let a = Tensor::vector(vec![0.6, 0.8]);
        let b = Tensor::vector(vec![-0.8, 0.6]);
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(similarity(&a, &b).unwrap().abs() < 1e-15);
        assert!((similarity(&a, &a.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            similarity(&a.scale(2.0), &a),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(Encoder::build_frozen(EncoderConfig { num_layers: 0, ..small() }).is_err());
        assert!(Encoder::build_frozen(EncoderConfig { model_dim: 1, ..small() }).is_err());
        assert!(Encoder::build_frozen(EncoderConfig { projections: vec![], ..small() }).is_err());
    }
}
