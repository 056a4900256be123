//! Two-layer transformer encoder with swappable task heads.
//!
//! Input windows have shape `[batch, window, features + 1]`; the extra
//! channel is the mask indicator used by the masked pre-training tasks and is
//! zero everywhere else. The trunk is
//! feature embedding + learned positional table, two encoder layers
//! (self-attention then feed-forward, residual connections), and mean pooling
//! over the time axis. Heads are single linear layers.

use std::fmt;

use ndgrad::{Graph, ParamId, Real, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Result, SsptError};

pub const ENCODER_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Last,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Raw feature count per time step (the mask channel is added on top).
    pub n_features: usize,
    pub window: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub activation: Activation,
    pub norm: NormPlacement,
    /// Extra layer norm after the last pre-norm layer. Off by default: it
    /// squashes the level information the masked-average head regresses on.
    pub final_norm: bool,
    pub pooling: Pooling,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(n_features: usize, window: usize) -> Self {
        ModelConfig {
            n_features,
            window,
            d_model: 32,
            n_heads: 4,
            ffn_hidden: 128,
            activation: Activation::Relu,
            norm: NormPlacement::Pre,
            final_norm: false,
            pooling: Pooling::Mean,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }

    pub fn input_width(&self) -> usize {
        self.n_features + 1
    }

    fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(SsptError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.window == 0 || self.n_features == 0 {
            return Err(SsptError::Config("window and feature count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SsptError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Task heads. `Mvp` predicts one value per time step; the others read the
/// pooled sequence representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Head {
    Scc,
    Ssc,
    Map,
    Mvp,
    Select,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Scc, Head::Ssc, Head::Map, Head::Mvp, Head::Select];

    pub fn name(self) -> &'static str {
        match self {
            Head::Scc => "scc",
            Head::Ssc => "ssc",
            Head::Map => "map",
            Head::Mvp => "mvp",
            Head::Select => "select",
        }
    }

    pub fn parse(name: &str) -> Result<Head> {
        Head::ALL
            .into_iter()
            .find(|h| h.name() == name)
            .ok_or_else(|| SsptError::UnknownHead(name.to_string()))
    }

    fn per_step(self) -> bool {
        matches!(self, Head::Mvp)
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub head: Head,
    pub out_dim: usize,
}

impl HeadSpec {
    pub fn new(head: Head, out_dim: usize) -> Self {
        HeadSpec { head, out_dim }
    }

    pub fn scc(n_stocks: usize) -> Self {
        Self::new(Head::Scc, n_stocks)
    }

    pub fn ssc(n_sectors: usize) -> Self {
        Self::new(Head::Ssc, n_sectors)
    }

    pub fn map() -> Self {
        Self::new(Head::Map, 1)
    }

    pub fn mvp() -> Self {
        Self::new(Head::Mvp, 1)
    }

    pub fn select() -> Self {
        Self::new(Head::Select, 1)
    }
}

/// Named parameter group used for freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Embedding,
    Attention(u8),
    Ffn(u8),
    Head(Head),
}

impl Group {
    pub fn is_head(self) -> bool {
        matches!(self, Group::Head(_))
    }

    pub fn parse(name: &str) -> Result<Group> {
        let group = match name {
            "embedding" => Group::Embedding,
            "attention-1" => Group::Attention(1),
            "attention-2" => Group::Attention(2),
            "ffn-1" => Group::Ffn(1),
            "ffn-2" => Group::Ffn(2),
            other => match other.strip_prefix("head-") {
                Some(h) => Group::Head(Head::parse(h).map_err(|_| SsptError::UnknownGroup(name.into()))?),
                None => return Err(SsptError::UnknownGroup(name.into())),
            },
        };
        Ok(group)
    }

    pub fn trunk() -> [Group; 5] {
        [
            Group::Embedding,
            Group::Attention(1),
            Group::Ffn(1),
            Group::Attention(2),
            Group::Ffn(2),
        ]
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Embedding => f.write_str("embedding"),
            Group::Attention(l) => write!(f, "attention-{l}"),
            Group::Ffn(l) => write!(f, "ffn-{l}"),
            Group::Head(h) => write!(f, "head-{h}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F: Real = f32> {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<F>,
}

/// All learnable tensors of the model, in a fixed declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct SsptParams<F: Real = f32> {
    config: ModelConfig,
    heads: Vec<HeadSpec>,
    entries: Vec<ParamEntry<F>>,
}

fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn linear<F: Real>(
    rng: &mut ChaCha8Rng,
    out: &mut Vec<ParamEntry<F>>,
    prefix: &str,
    group: Group,
    fan_in: usize,
    fan_out: usize,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    out.push(ParamEntry {
        name: format!("{prefix}.weight"),
        group,
        tensor: uniform(rng, &[fan_in, fan_out], bound),
    });
    out.push(ParamEntry {
        name: format!("{prefix}.bias"),
        group,
        tensor: Tensor::zeros(&[fan_out]),
    });
}

fn norm<F: Real>(out: &mut Vec<ParamEntry<F>>, prefix: &str, group: Group, d: usize) {
    out.push(ParamEntry {
        name: format!("{prefix}.gamma"),
        group,
        tensor: Tensor::full(&[d], F::one()),
    });
    out.push(ParamEntry {
        name: format!("{prefix}.beta"),
        group,
        tensor: Tensor::zeros(&[d]),
    });
}

const POSITION_INIT: f64 = 0.02;

impl<F: Real> SsptParams<F> {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases
    /// zero, positional table uniform in `±0.02`, norm scales one.
    pub fn init(seed: u64, config: ModelConfig, heads: &[HeadSpec]) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut entries = Vec::new();
        linear(&mut rng, &mut entries, "embedding.feature", Group::Embedding, config.input_width(), d);
        entries.push(ParamEntry {
            name: "embedding.position".into(),
            group: Group::Embedding,
            tensor: uniform(&mut rng, &[config.window, d], POSITION_INIT),
        });
        for l in 1..=ENCODER_LAYERS as u8 {
            let attn = Group::Attention(l);
            let ffn = Group::Ffn(l);
            norm(&mut entries, &format!("layer{l}.attn.norm"), attn, d);
            linear(&mut rng, &mut entries, &format!("layer{l}.attn.qkv"), attn, d, 3 * d);
            linear(&mut rng, &mut entries, &format!("layer{l}.attn.out"), attn, d, d);
            norm(&mut entries, &format!("layer{l}.ffn.norm"), ffn, d);
            linear(&mut rng, &mut entries, &format!("layer{l}.ffn.up"), ffn, d, config.ffn_hidden);
            linear(&mut rng, &mut entries, &format!("layer{l}.ffn.down"), ffn, config.ffn_hidden, d);
        }
        if config.norm == NormPlacement::Pre && config.final_norm {
            norm(&mut entries, "final.norm", Group::Ffn(ENCODER_LAYERS as u8), d);
        }
        let mut params = SsptParams {
            config,
            heads: Vec::new(),
            entries,
        };
        for (i, spec) in heads.iter().enumerate() {
            params.add_head(*spec, seed.wrapping_add(1 + i as u64))?;
        }
        Ok(params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn heads(&self) -> &[HeadSpec] {
        &self.heads
    }

    pub fn has_head(&self, head: Head) -> bool {
        self.heads.iter().any(|h| h.head == head)
    }

    pub fn head_spec(&self, head: Head) -> Result<HeadSpec> {
        self.heads
            .iter()
            .copied()
            .find(|h| h.head == head)
            .ok_or_else(|| SsptError::UnknownHead(head.name().into()))
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    /// Parameter ids are positions in the declaration order.
    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    /// Mutable access to the tensors selected by `keep`, for optimizer steps.
    pub fn select_mut(&mut self, keep: impl Fn(&ParamEntry<F>) -> bool) -> Vec<(ParamId, &mut Tensor<F>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .filter(|(_, e)| keep(e))
            .map(|(i, e)| (ParamId(i), &mut e.tensor))
            .collect()
    }

    pub fn groups(&self) -> Vec<Group> {
        let mut groups: Vec<Group> = self.entries.iter().map(|e| e.group).collect();
        groups.dedup();
        groups
    }

    pub fn count(&self, keep: impl Fn(Group) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| keep(e.group))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Byte image of every tensor in the given groups, in declaration order.
    pub fn group_bytes(&self, keep: impl Fn(Group) -> bool) -> Vec<u8> {
        self.entries
            .iter()
            .filter(|e| keep(e.group))
            .flat_map(|e| e.tensor.to_le_bytes())
            .collect()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update(e.tensor.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<G: Real>(&self) -> SsptParams<G> {
        SsptParams {
            config: self.config.clone(),
            heads: self.heads.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Sets every tensor to zero (used by tests of the zero-parameter case).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.tensor = Tensor::zeros(e.tensor.shape());
        }
        out
    }

    pub fn add_head(&mut self, spec: HeadSpec, seed: u64) -> Result<()> {
        if self.has_head(spec.head) {
            return Err(SsptError::Config(format!("head `{}` already present", spec.head)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_4ead);
        let mut entries = Vec::new();
        linear(
            &mut rng,
            &mut entries,
            &format!("head.{}", spec.head),
            Group::Head(spec.head),
            self.config.d_model,
            spec.out_dim,
        );
        self.entries.extend(entries);
        self.heads.push(spec);
        Ok(())
    }

    pub fn remove_head(&mut self, head: Head) -> Result<()> {
        if !self.has_head(head) {
            return Err(SsptError::UnknownHead(head.name().into()));
        }
        self.entries.retain(|e| e.group != Group::Head(head));
        self.heads.retain(|h| h.head != head);
        Ok(())
    }

    /// Replaces `old` with a freshly initialized head; trunk tensors are left
    /// untouched.
    pub fn swap_head(&self, old: Head, new: HeadSpec, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        out.remove_head(old)?;
        if out.has_head(new.head) {
            out.remove_head(new.head)?;
        }
        out.add_head(new, seed)?;
        Ok(out)
    }

    /// Keeps only the trunk and the listed heads.
    pub fn retain_heads(&mut self, keep: &[Head]) {
        self.entries
            .retain(|e| !matches!(e.group, Group::Head(h) if !keep.contains(&h)));
        self.heads.retain(|h| keep.contains(&h.head));
    }

    pub(crate) fn from_parts(config: ModelConfig, heads: Vec<HeadSpec>, entries: Vec<ParamEntry<F>>) -> Result<Self> {
        config.validate()?;
        let reference = SsptParams::<F>::init(0, config.clone(), &heads)?;
        if reference.entries.len() != entries.len() {
            return Err(SsptError::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.entries.len(),
                entries.len()
            )));
        }
        for (r, e) in reference.entries.iter().zip(&entries) {
            if r.name != e.name || r.tensor.shape() != e.tensor.shape() {
                return Err(SsptError::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    e.name,
                    e.tensor.shape(),
                    r.name,
                    r.tensor.shape()
                )));
            }
        }
        let entries = entries
            .into_iter()
            .zip(&reference.entries)
            .map(|(mut e, r)| {
                e.group = r.group;
                e
            })
            .collect();
        Ok(SsptParams { config, heads, entries })
    }
}

/// Graph handles for the parameters of one forward/backward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn var<F: Real>(&self, params: &SsptParams<F>, name: &str) -> Var {
        let id = params.id_of(name).unwrap_or_else(|| panic!("parameter `{name}` is declared"));
        self.vars[id.0]
    }
}

/// Records every parameter on the graph. Tensors for which `trainable`
/// returns false enter as constants and receive no gradient.
pub fn bind<F: Real>(
    g: &mut Graph<F>,
    params: &SsptParams<F>,
    trainable: impl Fn(&ParamEntry<F>) -> bool,
) -> Result<Bound> {
    let mut vars = Vec::with_capacity(params.entries.len());
    for (i, e) in params.entries.iter().enumerate() {
        let v = if trainable(e) {
            g.param(ParamId(i), e.tensor.clone())?
        } else {
            g.constant(e.tensor.clone())?
        };
        vars.push(v);
    }
    Ok(Bound { vars })
}

fn dense<F: Real>(g: &mut Graph<F>, params: &SsptParams<F>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = bound.var(params, &format!("{prefix}.weight"));
    let b = bound.var(params, &format!("{prefix}.bias"));
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn layer_norm<F: Real>(g: &mut Graph<F>, params: &SsptParams<F>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let gamma = bound.var(params, &format!("{prefix}.gamma"));
    let beta = bound.var(params, &format!("{prefix}.beta"));
    Ok(g.layer_norm(x, gamma, beta, params.config.ln_eps)?)
}

fn dropout<F: Real>(g: &mut Graph<F>, x: Var, rate: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = F::of(1.0 / (1.0 - rate));
    let mask: Vec<F> = (0..n)
        .map(|_| if rng.gen_bool(rate) { F::zero() } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?)?;
    Ok(g.mul(x, m)?)
}

fn attention<F: Real>(g: &mut Graph<F>, params: &SsptParams<F>, bound: &Bound, x: Var, layer: usize) -> Result<Var> {
    let cfg = &params.config;
    let shape = g.value(x).shape().to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.n_heads, d / cfg.n_heads);
    let qkv = dense(g, params, bound, x, &format!("layer{layer}.attn.qkv"))?;
    let split = |g: &mut Graph<F>, part: usize| -> Result<Var> {
        let p = g.slice(qkv, 2, part * d, d)?;
        let p = g.reshape(p, &[b, t, h, dh])?;
        let p = g.permute(p, &[0, 2, 1, 3])?;
        Ok(g.reshape(p, &[b * h, t, dh])?)
    };
    let q = split(g, 0)?;
    let k = split(g, 1)?;
    let v = split(g, 2)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = g.softmax(scores)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.reshape(ctx, &[b, h, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    dense(g, params, bound, ctx, &format!("layer{layer}.attn.out"))
}

fn feed_forward<F: Real>(g: &mut Graph<F>, params: &SsptParams<F>, bound: &Bound, x: Var, layer: usize) -> Result<Var> {
    let hidden = dense(g, params, bound, x, &format!("layer{layer}.ffn.up"))?;
    let hidden = match params.config.activation {
        Activation::Relu => g.relu(hidden)?,
        Activation::Gelu => g.gelu(hidden)?,
    };
    dense(g, params, bound, hidden, &format!("layer{layer}.ffn.down"))
}

/// Runs the trunk on `input [batch, window, features + 1]` and returns the
/// per-step hidden states `[batch, window, d_model]`.
pub fn encode<F: Real>(
    g: &mut Graph<F>,
    params: &SsptParams<F>,
    bound: &Bound,
    input: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let cfg = &params.config;
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 3 || shape[2] != cfg.input_width() {
        return Err(SsptError::Data(format!(
            "input shape {shape:?} does not match [batch, {}, {}]",
            cfg.window,
            cfg.input_width()
        )));
    }
    if shape[1] != cfg.window {
        return Err(SsptError::Data(format!(
            "window length {} does not match the positional table ({})",
            shape[1], cfg.window
        )));
    }
    let mut h = dense(g, params, bound, input, "embedding.feature")?;
    let pos = bound.var(params, "embedding.position");
    h = g.add(h, pos)?;
    for layer in 1..=ENCODER_LAYERS {
        match cfg.norm {
            NormPlacement::Pre => {
                let a = layer_norm(g, params, bound, h, &format!("layer{layer}.attn.norm"))?;
                let a = attention(g, params, bound, a, layer)?;
                let a = dropout(g, a, cfg.dropout, &mut dropout_rng)?;
                h = g.add(h, a)?;
                let f = layer_norm(g, params, bound, h, &format!("layer{layer}.ffn.norm"))?;
                let f = feed_forward(g, params, bound, f, layer)?;
                let f = dropout(g, f, cfg.dropout, &mut dropout_rng)?;
                h = g.add(h, f)?;
            }
            NormPlacement::Post => {
                let a = attention(g, params, bound, h, layer)?;
                let a = dropout(g, a, cfg.dropout, &mut dropout_rng)?;
                let sum = g.add(h, a)?;
                h = layer_norm(g, params, bound, sum, &format!("layer{layer}.attn.norm"))?;
                let f = feed_forward(g, params, bound, h, layer)?;
                let f = dropout(g, f, cfg.dropout, &mut dropout_rng)?;
                let sum = g.add(h, f)?;
                h = layer_norm(g, params, bound, sum, &format!("layer{layer}.ffn.norm"))?;
            }
        }
    }
    if cfg.norm == NormPlacement::Pre && cfg.final_norm {
        h = layer_norm(g, params, bound, h, "final.norm")?;
    }
    Ok(h)
}

/// Sequence representation `[batch, d_model]`.
pub fn pool<F: Real>(g: &mut Graph<F>, params: &SsptParams<F>, hidden: Var) -> Result<Var> {
    match params.config.pooling {
        Pooling::Mean => Ok(g.mean_axis(hidden, 1)?),
        Pooling::Last => {
            let t = params.config.window;
            let last = g.slice(hidden, 1, t - 1, 1)?;
            Ok(g.sum_axis(last, 1)?)
        }
    }
}

/// Applies `head` to the trunk output. Classification heads return
/// `[batch, out]`, the regression heads (map, select) return `[batch]` and
/// the per-step head returns `[batch, window]`.
pub fn apply_head<F: Real>(
    g: &mut Graph<F>,
    params: &SsptParams<F>,
    bound: &Bound,
    hidden: Var,
    head: Head,
) -> Result<Var> {
    params.head_spec(head)?;
    let prefix = format!("head.{head}");
    if head.per_step() {
        let shape = g.value(hidden).shape().to_vec();
        let out = dense(g, params, bound, hidden, &prefix)?;
        return Ok(g.reshape(out, &shape[..2])?);
    }
    let pooled = pool(g, params, hidden)?;
    let out = dense(g, params, bound, pooled, &prefix)?;
    if matches!(head, Head::Map | Head::Select) {
        let b = g.value(out).shape()[0];
        return Ok(g.reshape(out, &[b])?);
    }
    Ok(out)
}

/// Inference forward pass: windows `[batch, window, features + 1]` to the
/// head output. No gradients are recorded.
pub fn forward<F: Real>(params: &SsptParams<F>, windows: &Tensor<F>, head: Head) -> Result<Tensor<F>> {
    params.head_spec(head)?;
    let mut g = Graph::new();
    let bound = bind(&mut g, params, |_| false)?;
    let x = g.constant(windows.clone())?;
    let hidden = encode(&mut g, params, &bound, x, None)?;
    let out = apply_head(&mut g, params, &bound, hidden, head)?;
    Ok(g.value(out).clone())
}

/// Pooled representation without any head, for invariance checks.
pub fn representation<F: Real>(params: &SsptParams<F>, windows: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, |_| false)?;
    let x = g.constant(windows.clone())?;
    let hidden = encode(&mut g, params, &bound, x, None)?;
    let pooled = pool(&mut g, params, hidden)?;
    Ok(g.value(pooled).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn windows(b: usize, t: usize, m: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * t * (m + 1))
            .map(|i| if i % (m + 1) == m { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        Tensor::new(vec![b, t, m + 1], data).unwrap()
    }

    #[test]
    fn scc_output_shape_matches_class_count() {
        let cfg = ModelConfig::new(9, 16);
        let params = SsptParams::<f32>::init(0, cfg, &[HeadSpec::scc(1026)]).unwrap();
        let out = forward(&params, &windows(4, 16, 9, 1), Head::Scc).unwrap();
        assert_eq!(out.shape(), &[4, 1026]);
    }

    #[test]
    fn zero_params_give_map_bias() {
        let cfg = ModelConfig::new(9, 16);
        let mut params = SsptParams::<f32>::init(3, cfg, &[HeadSpec::map()]).unwrap().zeroed();
        let id = params.id_of("head.map.bias").unwrap();
        params.tensor_mut(id).data_mut()[0] = 0.75;
        let out = forward(&params, &windows(5, 16, 9, 2), Head::Map).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75), "{:?}", out.data());
    }

    #[test]
    fn batch_order_permutes_outputs() {
        let cfg = ModelConfig::new(9, 16);
        let params = SsptParams::<f32>::init(1, cfg, &[HeadSpec::map()]).unwrap();
        let x = windows(3, 16, 9, 5);
        let step = 16 * 10;
        let mut swapped = x.data().to_vec();
        swapped[..step].copy_from_slice(&x.data()[2 * step..]);
        swapped[2 * step..].copy_from_slice(&x.data()[..step]);
        let swapped = Tensor::new(x.shape().to_vec(), swapped).unwrap();
        let a = forward(&params, &x, Head::Map).unwrap();
        let b = forward(&params, &swapped, Head::Map).unwrap();
        assert_eq!(a.data()[0], b.data()[2]);
        assert_eq!(a.data()[1], b.data()[1]);
        assert_eq!(a.data()[2], b.data()[0]);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::new(9, 16);
        let a = SsptParams::<f32>::init(7, cfg.clone(), &[HeadSpec::map()]).unwrap();
        let b = SsptParams::<f32>::init(7, cfg.clone(), &[HeadSpec::map()]).unwrap();
        let c = SsptParams::<f32>::init(8, cfg, &[HeadSpec::map()]).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let cfg = ModelConfig::new(9, 16);
        let params = SsptParams::<f32>::init(2, cfg, &[HeadSpec::scc(10)]).unwrap();
        for e in params.entries() {
            let bound = if e.name.ends_with(".weight") {
                1.0 / (e.tensor.shape()[0] as f32).sqrt()
            } else if e.name == "embedding.position" {
                POSITION_INIT as f32
            } else if e.name.ends_with(".gamma") {
                1.0
            } else {
                0.0
            };
            assert!(
                e.tensor.data().iter().all(|v| v.abs() <= bound),
                "{} exceeds {bound}",
                e.name
            );
        }
    }

    #[test]
    fn architecture_sizes() {
        let cfg = ModelConfig::new(9, 32);
        let params = SsptParams::<f32>::init(0, cfg, &[]).unwrap();
        assert_eq!(params.get("layer1.attn.qkv.weight").unwrap().shape(), &[32, 96]);
        assert_eq!(params.get("layer2.ffn.up.weight").unwrap().shape(), &[32, 128]);
        assert_eq!(params.get("embedding.position").unwrap().shape(), &[32, 32]);
        assert!(params.get("layer3.attn.qkv.weight").is_none());
        assert_eq!(params.config().n_heads, 4);
    }

    #[test]
    fn every_tensor_has_exactly_one_group() {
        let cfg = ModelConfig::new(9, 16);
        let params = SsptParams::<f32>::init(0, cfg, &[HeadSpec::scc(4), HeadSpec::map()]).unwrap();
        let total = params.count(|_| true);
        let by_group: usize = params.groups().iter().map(|&g| params.count(|x| x == g)).sum();
        assert_eq!(total, by_group);
        let names: Vec<String> = params.groups().iter().map(|g| g.to_string()).collect();
        assert_eq!(
            names,
            ["embedding", "attention-1", "ffn-1", "attention-2", "ffn-2", "head-scc", "head-map"]
        );
    }

    #[test]
    fn swap_head_keeps_trunk_bytes() {
        let cfg = ModelConfig::new(9, 16);
        let params = SsptParams::<f32>::init(0, cfg, &[HeadSpec::scc(4)]).unwrap();
        let swapped = params.swap_head(Head::Scc, HeadSpec::select(), 9).unwrap();
        let trunk = |g: Group| !g.is_head();
        assert_eq!(params.group_bytes(trunk), swapped.group_bytes(trunk));
        assert_eq!(swapped.head_spec(Head::Select).unwrap().out_dim, 1);
        assert!(!swapped.has_head(Head::Scc));
        let again = swapped.swap_head(Head::Select, HeadSpec::select(), 10).unwrap();
        assert_eq!(params.group_bytes(trunk), again.group_bytes(trunk));
        assert!(matches!(
            params.swap_head(Head::Map, HeadSpec::select(), 1),
            Err(SsptError::UnknownHead(_))
        ));
    }

    #[test]
    fn unknown_head_and_window_mismatch_are_errors() {
        let cfg = ModelConfig::new(9, 16);
        let params = SsptParams::<f32>::init(0, cfg, &[HeadSpec::map()]).unwrap();
        assert!(matches!(
            forward(&params, &windows(2, 16, 9, 0), Head::Scc),
            Err(SsptError::UnknownHead(_))
        ));
        assert!(forward(&params, &windows(2, 32, 9, 0), Head::Map).is_err());
        assert!(matches!(Head::parse("nope"), Err(SsptError::UnknownHead(_))));
    }

    #[test]
    fn representation_ignores_heads() {
        let cfg = ModelConfig::new(9, 16);
        let a = SsptParams::<f32>::init(4, cfg, &[HeadSpec::map()]).unwrap();
        let mut b = a.clone();
        b.add_head(HeadSpec::scc(7), 99).unwrap();
        let x = windows(3, 16, 9, 8);
        assert_eq!(representation(&a, &x).unwrap(), representation(&b, &x).unwrap());
    }

    #[test]
    fn forward_is_pure() {
        let cfg = ModelConfig::new(9, 16);
        let params = SsptParams::<f32>::init(4, cfg, &[HeadSpec::ssc(5)]).unwrap();
        let x = windows(3, 16, 9, 8);
        assert_eq!(forward(&params, &x, Head::Ssc).unwrap(), forward(&params, &x, Head::Ssc).unwrap());
    }

    #[test]
    fn group_names_round_trip() {
        for g in Group::trunk().into_iter().chain(Head::ALL.map(Group::Head)) {
            assert_eq!(Group::parse(&g.to_string()).unwrap(), g);
        }
        assert!(matches!(Group::parse("ffn-3"), Err(SsptError::UnknownGroup(_))));
    }
}
