//! Low-rank adapters, mixtures of low-rank experts and routing signatures.
//!
//! All forward functions work on token rows: `x` is `T x k`, one row per
//! token, and a frozen projection `W0` is stored as `d_out x k`, so the
//! adapted projection of a single token `x` is `W0 x + (alpha/r) B A x`.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::{matmul, randn, RngState, Tape, Tensor, Var};

/// One low-rank residual `(alpha / rank) * B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// `rank x k`
    pub a: Tensor,
    /// `d_out x rank`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraExpert {
    pub fn new(a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (rank, k) = a.dims2()?;
        let (d_out, rb) = b.dims2()?;
        if rb != rank {
            return Err(Error::invalid(format!(
                "LoRA factors disagree on rank: A is {rank}x{k}, B is {d_out}x{rb}"
            )));
        }
        if rank == 0 || rank > d_out.min(k) {
            return Err(Error::invalid(format!(
                "rank {rank} must be in 1..=min({d_out}, {k})"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self { a, b, rank, alpha })
    }

    /// `A ~ N(0, 1/sqrt(k))`, `B = 0`.
    pub fn init(d_out: usize, k: usize, rank: usize, alpha: f64, rng: &mut RngState) -> Result<Self> {
        let a = randn(&[rank, k], 1.0 / (k as f64).sqrt(), rng)?;
        Self::new(a, Tensor::zeros(&[d_out, rank]), alpha)
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Dense `(alpha / r) B A`, shape `d_out x k`.
    pub fn delta(&self) -> Tensor {
        matmul(&self.b, &self.a)
            .expect("factor shapes validated at construction")
            .scale(self.scaling())
    }
}

/// `N` experts blended by a softmax gate over `W_g x / router_temperature`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLoraLayer {
    pub experts: Vec<LoraExpert>,
    /// `N x k`
    pub gate: Tensor,
    pub router_temperature: f64,
}

impl MoeLoraLayer {
    pub fn new(experts: Vec<LoraExpert>, gate: Tensor, router_temperature: f64) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::invalid("a mixture needs at least one expert"))?;
        let dims = (first.rank, first.in_dim(), first.out_dim());
        if experts.iter().any(|e| (e.rank, e.in_dim(), e.out_dim()) != dims) {
            return Err(Error::invalid("all experts must share (rank, k, d_out)"));
        }
        let (n, k) = gate.dims2()?;
        if n != experts.len() || k != dims.1 {
            return Err(Error::invalid(format!(
                "gate is {n}x{k}, expected {}x{}",
                experts.len(),
                dims.1
            )));
        }
        if !(router_temperature > 0.0) {
            return Err(Error::invalid(format!(
                "router temperature must be > 0, got {router_temperature}"
            )));
        }
        Ok(Self {
            experts,
            gate,
            router_temperature,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// One low-rank expert per site.
    Lora,
    /// A gated mixture of low-rank experts per site.
    Moe,
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Self::Lora),
            "moe" => Ok(Self::Moe),
            other => Err(Error::invalid(format!("unknown adapter kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SignaturePooling {
    /// Mean of per-token routing over all valid tokens.
    #[default]
    Mean,
    /// Routing of the final (end-of-sequence) token only.
    Eos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub num_experts: usize,
    pub rank: usize,
    pub alpha: f64,
    pub router_temperature: f64,
    /// Standard deviation of the initial gate weights; zero gives a uniform router.
    pub gate_init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Moe,
            num_experts: 4,
            rank: 16,
            alpha: 64.0,
            router_temperature: 1.0,
            gate_init_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SiteAdapter {
    Lora(LoraExpert),
    Moe(MoeLoraLayer),
}

impl SiteAdapter {
    pub fn experts(&self) -> &[LoraExpert] {
        match self {
            SiteAdapter::Lora(e) => std::slice::from_ref(e),
            SiteAdapter::Moe(m) => &m.experts,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts().len()
    }
}

/// Adapters for every `(layer, projection)` injection site, stored layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub num_layers: usize,
    pub sites_per_layer: usize,
    pub sites: Vec<SiteAdapter>,
}

impl AdapterSet {
    pub fn init(encoder: &EncoderConfig, config: &AdapterConfig, seed: u64) -> Result<Self> {
        let mut rng = RngState::derive(seed, "adapters", 0);
        let d = encoder.model_dim;
        let n = match config.kind {
            AdapterKind::Lora => 1,
            AdapterKind::Moe => config.num_experts,
        };
        if n == 0 {
            return Err(Error::invalid("num_experts must be >= 1"));
        }
        let mut sites = Vec::with_capacity(encoder.num_sites());
        for _ in 0..encoder.num_sites() {
            let experts = (0..n)
                .map(|_| LoraExpert::init(d, d, config.rank, config.alpha, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            sites.push(match config.kind {
                AdapterKind::Lora => SiteAdapter::Lora(experts.into_iter().next().expect("one expert")),
                AdapterKind::Moe => {
                    let gate = if config.gate_init_std > 0.0 {
                        randn(&[n, d], config.gate_init_std, &mut rng)?
                    } else {
                        Tensor::zeros(&[n, d])
                    };
                    SiteAdapter::Moe(MoeLoraLayer::new(experts, gate, config.router_temperature)?)
                }
            });
        }
        Ok(Self {
            num_layers: encoder.num_layers,
            sites_per_layer: encoder.projections.len(),
            sites,
        })
    }

    pub fn site(&self, layer: usize, slot: usize) -> &SiteAdapter {
        &self.sites[layer * self.sites_per_layer + slot]
    }

    pub fn num_experts(&self) -> usize {
        self.sites.first().map_or(0, SiteAdapter::num_experts)
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (s, site) in self.sites.iter().enumerate() {
            let (l, g) = (s / self.sites_per_layer, s % self.sites_per_layer);
            for (e, expert) in site.experts().iter().enumerate() {
                out.push((format!("l{l}.s{g}.e{e}.a"), &expert.a));
                out.push((format!("l{l}.s{g}.e{e}.b"), &expert.b));
            }
            if let SiteAdapter::Moe(m) = site {
                out.push((format!("l{l}.s{g}.gate"), &m.gate));
            }
        }
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for site in &mut self.sites {
            match site {
                SiteAdapter::Lora(e) => {
                    out.push(&mut e.a);
                    out.push(&mut e.b);
                }
                SiteAdapter::Moe(m) => {
                    for e in &mut m.experts {
                        out.push(&mut e.a);
                        out.push(&mut e.b);
                    }
                    out.push(&mut m.gate);
                }
            }
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_params()
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundAdapters<'t> {
        let leaf = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        let mut params = Vec::new();
        let sites = self
            .sites
            .iter()
            .map(|site| {
                let mut experts = Vec::new();
                for e in site.experts() {
                    let a = leaf(&e.a);
                    let b = leaf(&e.b);
                    params.push(a);
                    params.push(b);
                    experts.push(BoundExpert {
                        a,
                        b,
                        scaling: e.scaling(),
                    });
                }
                match site {
                    SiteAdapter::Lora(_) => BoundSite::Lora(experts.pop().expect("one expert")),
                    SiteAdapter::Moe(m) => {
                        let gate = leaf(&m.gate);
                        params.push(gate);
                        BoundSite::Moe(BoundMoe {
                            experts,
                            gate,
                            router_temperature: m.router_temperature,
                        })
                    }
                }
            })
            .collect();
        BoundAdapters {
            sites,
            sites_per_layer: self.sites_per_layer,
            params,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundExpert<'t> {
    pub a: Var<'t>,
    pub b: Var<'t>,
    pub scaling: f64,
}

impl<'t> BoundExpert<'t> {
    pub fn bind(tape: &'t Tape, expert: &LoraExpert, trainable: bool) -> Self {
        let leaf = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        Self {
            a: leaf(&expert.a),
            b: leaf(&expert.b),
            scaling: expert.scaling(),
        }
    }

    /// `(alpha / r) (x A^T) B^T`, i.e. the residual for each token row.
    pub fn residual(&self, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul_t(&self.a)?.matmul_t(&self.b)?.scale(self.scaling))
    }
}

#[derive(Debug, Clone)]
pub struct BoundMoe<'t> {
    pub experts: Vec<BoundExpert<'t>>,
    pub gate: Var<'t>,
    pub router_temperature: f64,
}

impl<'t> BoundMoe<'t> {
    pub fn bind(tape: &'t Tape, layer: &MoeLoraLayer, trainable: bool) -> Self {
        let leaf = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        Self {
            experts: layer
                .experts
                .iter()
                .map(|e| BoundExpert::bind(tape, e, trainable))
                .collect(),
            gate: leaf(&layer.gate),
            router_temperature: layer.router_temperature,
        }
    }
}

#[derive(Debug, Clone)]
pub enum BoundSite<'t> {
    Lora(BoundExpert<'t>),
    Moe(BoundMoe<'t>),
}

/// An [`AdapterSet`] recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundAdapters<'t> {
    pub sites: Vec<BoundSite<'t>>,
    pub sites_per_layer: usize,
    /// Leaves in [`AdapterSet::named_params`] order.
    pub params: Vec<Var<'t>>,
}

impl<'t> BoundAdapters<'t> {
    pub fn site(&self, layer: usize, slot: usize) -> &BoundSite<'t> {
        &self.sites[layer * self.sites_per_layer + slot]
    }

    /// Gradients in parameter order; zeros where a leaf received none.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| match p.grad() {
                Some(g) => g.into_data(),
                None => vec![0.0; p.with_value(|t| t.len())],
            })
            .collect()
    }

    /// Applies the site's adapter to a projection; returns routing `T x N`.
    pub fn apply(
        &self,
        layer: usize,
        slot: usize,
        w0: &Var<'t>,
        x: &Var<'t>,
    ) -> Result<(Var<'t>, Tensor)> {
        match self.site(layer, slot) {
            BoundSite::Lora(e) => {
                let out = lora_forward(w0, e, x)?;
                let rows = x.shape()[0];
                Ok((out, Tensor::new(vec![rows, 1], vec![1.0; rows])?))
            }
            BoundSite::Moe(m) => {
                let (out, routing) = moe_forward(w0, m, x)?;
                Ok((out, routing.value()))
            }
        }
    }
}

fn check_projection(w0: &Var<'_>, x: &Var<'_>, d_out: usize, k: usize) -> Result<()> {
    let w = w0.shape();
    let xs = x.shape();
    if w.len() != 2 || w[0] != d_out || w[1] != k || xs.len() != 2 || xs[1] != k {
        return Err(Error::invalid(format!(
            "projection shapes incompatible: W0 {w:?}, x {xs:?}, adapter maps {k} -> {d_out}"
        )));
    }
    Ok(())
}

/// `x W0^T + (alpha/r) (x A^T) B^T`; gradient reaches `W0` only if it is a leaf
/// that requires grad, which the encoder never does.
pub fn lora_forward<'t>(w0: &Var<'t>, expert: &BoundExpert<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    let (r, k) = expert.a.with_value(|t| t.dims2())?;
    let (d_out, rb) = expert.b.with_value(|t| t.dims2())?;
    if r != rb {
        return Err(Error::invalid("LoRA factor ranks differ"));
    }
    check_projection(w0, x, d_out, k)?;
    x.matmul_t(w0)?.add(&expert.residual(x)?)
}

/// Per-token routing `softmax(x W_g^T / tau')`, `T x N`.
pub fn gate<'t>(layer: &BoundMoe<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    x.matmul_t(&layer.gate)?.softmax_rows(layer.router_temperature)
}

/// Dense mixture `x W0^T + sum_i g_i(x) * residual_i(x)`.
pub fn moe_forward<'t>(w0: &Var<'t>, layer: &BoundMoe<'t>, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let first = layer
        .experts
        .first()
        .ok_or_else(|| Error::invalid("a mixture needs at least one expert"))?;
    let (_, k) = first.a.with_value(|t| t.dims2())?;
    let (d_out, _) = first.b.with_value(|t| t.dims2())?;
    check_projection(w0, x, d_out, k)?;
    let routing = gate(layer, x)?;
    let mut out = x.matmul_t(w0)?;
    for (i, expert) in layer.experts.iter().enumerate() {
        let weighted = expert.residual(x)?.mul_column(&routing.column(i)?)?;
        out = out.add(&weighted)?;
    }
    Ok((out, routing))
}

/// Per-token routing captured at every site during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRouting {
    pub num_layers: usize,
    pub sites_per_layer: usize,
    pub num_experts: usize,
    /// Layer-major; each capture is `T x N`.
    pub captures: Vec<Option<Tensor>>,
}

impl TokenRouting {
    pub fn empty(num_layers: usize, sites_per_layer: usize, num_experts: usize) -> Self {
        Self {
            num_layers,
            sites_per_layer,
            num_experts,
            captures: vec![None; num_layers * sites_per_layer],
        }
    }

    pub fn record(&mut self, layer: usize, slot: usize, routing: Tensor) {
        self.captures[layer * self.sites_per_layer + slot] = Some(routing);
    }
}

/// Which layers contribute to signature distances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask(pub Vec<bool>);

impl LayerMask {
    pub fn all(num_layers: usize) -> Self {
        Self(vec![true; num_layers])
    }

    /// The deepest `ceil(L * percent / 100)` layers, at least one.
    pub fn deepest_fraction(num_layers: usize, percent: f64) -> Result<Self> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::invalid(format!("layer coverage {percent}% outside (0, 100]")));
        }
        let keep = ((num_layers as f64 * percent / 100.0 - 1e-9).ceil() as usize).clamp(1, num_layers);
        Ok(Self((0..num_layers).map(|l| l >= num_layers - keep).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn included(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// Per-sample gate distributions, `L x G x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingSignature {
    pub values: Tensor,
    pub layer_mask: LayerMask,
}

impl RoutingSignature {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    /// Distribution at `(layer, slot)`.
    pub fn slot(&self, layer: usize, slot: usize) -> &[f64] {
        let (_, g, n) = self.dims();
        let start = (layer * g + slot) * n;
        &self.values.data()[start..start + n]
    }
}

pub fn extract_signature(
    routing: &TokenRouting,
    valid_token_count: usize,
    layer_mask: &LayerMask,
    pooling: SignaturePooling,
) -> Result<RoutingSignature> {
    let (l, g, n) = (routing.num_layers, routing.sites_per_layer, routing.num_experts);
    if layer_mask.len() != l {
        return Err(Error::invalid(format!(
            "layer mask covers {} layers, routing has {l}",
            layer_mask.len()
        )));
    }
    if valid_token_count == 0 {
        return Err(Error::invalid("signature needs at least one valid token"));
    }
    let mut values = vec![0.0; l * g * n];
    for layer in (0..l).filter(|&i| layer_mask.0[i]) {
        for slot in 0..g {
            let capture = routing.captures[layer * g + slot].as_ref().ok_or_else(|| {
                Error::InconsistentState(format!("no routing captured at layer {layer}, site {slot}"))
            })?;
            let (t, cn) = capture.dims2()?;
            if cn != n || t < valid_token_count {
                return Err(Error::InconsistentState(format!(
                    "capture at layer {layer}, site {slot} is {t}x{cn}"
                )));
            }
            let dst = &mut values[(layer * g + slot) * n..(layer * g + slot + 1) * n];
            match pooling {
                SignaturePooling::Mean => {
                    for tok in 0..valid_token_count {
                        for (d, &v) in dst.iter_mut().zip(capture.row(tok)) {
                            *d += v;
                        }
                    }
                    dst.iter_mut().for_each(|d| *d /= valid_token_count as f64);
                }
                SignaturePooling::Eos => dst.copy_from_slice(capture.row(valid_token_count - 1)),
            }
        }
    }
    Ok(RoutingSignature {
        values: Tensor::new(vec![l, g, n], values)?,
        layer_mask: layer_mask.clone(),
    })
}
