//! Miniature diffusion transformer predicting the noise `ε_θ(x_t, t, y)`.
//!
//! Patchified pixels pass through `num_blocks` transformer blocks with
//! multi-head self-attention and a GELU feedforward. Each block is
//! conditioned on the sum of a timestep embedding (sinusoidal features
//! followed by a two-layer MLP) and a learned class embedding through
//! adaptive layer norm with zero-initialized gates.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

use super::config::DiTConfig;
use super::registry::{LayerTapRegistry, SiteKind};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Samples per graph when predicting large batches. Fixed so results do not
/// depend on the worker count.
const PREDICT_CHUNK: usize = 32;

/// Which operand of a site a quantizer applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    /// Input activation of a linear site, or the left factor of a matmul.
    Lhs,
    /// Right factor of a matmul site.
    Rhs,
}

/// Intercepts site operands during a forward pass.
///
/// Returning `None` leaves the full-precision value in place.
pub trait SiteHook: Sync {
    /// Replacement weight for a linear site.
    fn weight(&self, site: usize) -> Option<&Tensor>;

    /// Replacement value for an activation operand. The leading dimension
    /// of `value` splits evenly into one block per entry of `timesteps`.
    fn operand(
        &self,
        site: usize,
        operand: Operand,
        value: &Tensor,
        timesteps: &[usize],
    ) -> Result<Option<Tensor>>;
}

/// Anything that predicts noise for a batch of `[B, C, H, W]` images.
pub trait NoisePredictor: Sync {
    fn timesteps(&self) -> usize;

    fn predict(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor>;
}

/// Graph nodes of one quantization site in a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SiteNodes {
    /// Full-precision activation input (before any hook replacement).
    pub lhs: NodeId,
    /// Weight parameter node for linear sites, right factor for matmuls.
    pub rhs: NodeId,
    pub output: NodeId,
}

pub struct ForwardPass {
    pub graph: Graph,
    /// Predicted noise, `[B, C, H, W]`.
    pub output: NodeId,
    /// Indexed like the model's registry.
    pub sites: Vec<SiteNodes>,
    /// Indexed like [`DiTModel::param_names`].
    pub params: Vec<NodeId>,
}

/// adaLN modulation of one block for a single `(t, y)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    pub shift_attn: Vec<f64>,
    pub scale_attn: Vec<f64>,
    pub gate_attn: Vec<f64>,
    pub shift_mlp: Vec<f64>,
    pub scale_mlp: Vec<f64>,
    pub gate_mlp: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DiTModel {
    config: DiTConfig,
    registry: LayerTapRegistry,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn param_specs(c: &DiTConfig) -> Vec<(String, Vec<usize>)> {
    let d = c.embed_dim;
    let mut specs = Vec::new();
    let mut linear = |name: String, out: usize, inp: usize| {
        specs.push((format!("{name}.weight"), vec![out, inp]));
        specs.push((format!("{name}.bias"), vec![out]));
    };
    linear("t_embed.fc1".into(), d, d);
    linear("t_embed.fc2".into(), d, d);
    linear("patch_embed".into(), d, c.patch_dim());
    for b in 0..c.num_blocks {
        linear(format!("blocks.{b}.adaln"), 6 * d, d);
        linear(format!("blocks.{b}.attn.qkv"), 3 * d, d);
        linear(format!("blocks.{b}.attn.proj"), d, d);
        linear(format!("blocks.{b}.mlp.fc1"), c.mlp_dim(), d);
        linear(format!("blocks.{b}.mlp.fc2"), d, c.mlp_dim());
    }
    linear("final.adaln".into(), 2 * d, d);
    linear("final.linear".into(), c.patch_dim(), d);
    specs.push(("y_embed.table".into(), vec![c.num_classes, d]));
    specs
}

/// Sinusoidal timestep features `[cos(t·f_i), sin(t·f_i)]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let tf = step as f64;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| tf * f).collect();
        data.extend(args.iter().map(|a| a.cos()));
        data.extend(args.iter().map(|a| a.sin()));
    }
    Tensor::new(vec![t.len(), dim], data).expect("feature shape")
}

/// Fixed 1-D sinusoidal position table `[tokens, dim]`.
fn position_table(tokens: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(tokens * dim);
    for n in 0..tokens {
        for i in 0..half {
            let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((n as f64 * w).sin());
        }
        for i in 0..half {
            let w = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((n as f64 * w).cos());
        }
    }
    out
}

/// For each token-major flat position, the image flat position it reads.
///
/// Token `n` covers patch row `n / grid`, column `n % grid`; features are
/// ordered `(row-in-patch, column-in-patch, channel)`.
pub fn patch_order(c: &DiTConfig, batch: usize) -> Vec<usize> {
    let (p, g, ch, s) = (c.patch_size, c.grid(), c.channels, c.image_size);
    let mut order = Vec::with_capacity(batch * c.image_numel());
    for b in 0..batch {
        for n in 0..g * g {
            let (py, px) = (n / g, n % g);
            for iy in 0..p {
                for ix in 0..p {
                    for k in 0..ch {
                        let (yy, xx) = (py * p + iy, px * p + ix);
                        order.push(((b * ch + k) * s + yy) * s + xx);
                    }
                }
            }
        }
    }
    order
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Maps `[B·N, H·hd]` token rows to `[B·H, N, hd]` head-major layout.
fn split_heads_order(batch: usize, tokens: usize, heads: usize, hd: usize) -> Vec<usize> {
    let d = heads * hd;
    let mut order = Vec::with_capacity(batch * tokens * d);
    for b in 0..batch {
        for h in 0..heads {
            for n in 0..tokens {
                for k in 0..hd {
                    order.push((b * tokens + n) * d + h * hd + k);
                }
            }
        }
    }
    order
}

/// Output of [`attention`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[B, N, D]`.
    pub output: Tensor,
    /// Post-softmax weights `[B·H, N, N]`.
    pub weights: Tensor,
    /// Value operand `[B·H, N, hd]`.
    pub values: Tensor,
}

/// Multi-head scaled dot-product attention on `[B, N, D]` inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, num_heads: usize) -> Result<AttentionOutput> {
    let [b, n, d] = match q.shape() {
        &[b, n, d] => [b, n, d],
        s => return Err(Error::Dimension(format!("attention expects [B, N, D], got {s:?}"))),
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Dimension("q, k and v shapes differ".into()));
    }
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Dimension(format!(
            "width {d} does not split into {num_heads} heads"
        )));
    }
    let mut g = Graph::new();
    let flat = |t: &Tensor| t.clone().reshape(vec![b * n, d]);
    let (qn, kn, vn) = (
        g.constant(flat(q)?),
        g.constant(flat(k)?),
        g.constant(flat(v)?),
    );
    let nodes = attention_core(&mut g, qn, kn, vn, b, n, num_heads, &mut |g, l, r, tb, _| {
        g.batch_matmul(l, r, tb)
    })?;
    Ok(AttentionOutput {
        output: g.value(nodes.output).clone().reshape(vec![b, n, d])?,
        weights: g.value(nodes.weights).clone(),
        values: g.value(nodes.values).clone(),
    })
}

struct AttentionNodes {
    output: NodeId,
    weights: NodeId,
    values: NodeId,
}

#[derive(Clone, Copy)]
enum AttnProduct {
    Scores,
    Mix,
}

type ProductFn<'a> = dyn FnMut(&mut Graph, NodeId, NodeId, bool, AttnProduct) -> Result<NodeId> + 'a;

#[allow(clippy::too_many_arguments)]
fn attention_core(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    batch: usize,
    tokens: usize,
    heads: usize,
    product: &mut ProductFn<'_>,
) -> Result<AttentionNodes> {
    let d = g.shape(q)[1];
    let hd = d / heads;
    let split = split_heads_order(batch, tokens, heads, hd);
    let merge = inverse(&split);
    let head_shape = vec![batch * heads, tokens, hd];
    let qh = g.gather(q, split.clone(), head_shape.clone())?;
    let kh = g.gather(k, split.clone(), head_shape.clone())?;
    let vh = g.gather(v, split, head_shape)?;
    let scores = product(g, qh, kh, true, AttnProduct::Scores)?;
    let logits = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let weights = g.softmax(logits)?;
    let mixed = product(g, weights, vh, false, AttnProduct::Mix)?;
    let output = g.gather(mixed, merge, vec![batch * tokens, d])?;
    Ok(AttentionNodes {
        output,
        weights,
        values: vh,
    })
}

struct Builder<'a> {
    model: &'a DiTModel,
    graph: Graph,
    hook: Option<&'a dyn SiteHook>,
    timesteps: &'a [usize],
    params: Vec<NodeId>,
    sites: Vec<Option<SiteNodes>>,
}

impl<'a> Builder<'a> {
    fn new(model: &'a DiTModel, hook: Option<&'a dyn SiteHook>, timesteps: &'a [usize], trainable: bool) -> Self {
        let mut graph = Graph::new();
        let params = model
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Builder {
            model,
            graph,
            hook,
            timesteps,
            params,
            sites: vec![None; model.registry.len()],
        }
    }

    fn param(&self, name: &str) -> NodeId {
        self.params[self.model.index[name]]
    }

    fn site_index(&self, id: &str) -> usize {
        self.model
            .registry
            .index_of(id)
            .unwrap_or_else(|| panic!("site {id} missing from registry"))
    }

    fn hooked_operand(&mut self, site: usize, operand: Operand, node: NodeId) -> Result<NodeId> {
        let replaced = match self.hook {
            Some(h) => h.operand(site, operand, self.graph.value(node), self.timesteps)?,
            None => None,
        };
        Ok(match replaced {
            Some(v) => self.graph.constant(v),
            None => node,
        })
    }

    fn linear(&mut self, id: &str, x: NodeId) -> Result<NodeId> {
        let site = self.site_index(id);
        let w = self.param(&format!("{id}.weight"));
        let b = self.param(&format!("{id}.bias"));
        let w_used = match self.hook.and_then(|h| h.weight(site)) {
            Some(q) => self.graph.constant(q.clone()),
            None => w,
        };
        let x_used = self.hooked_operand(site, Operand::Lhs, x)?;
        let y = self.graph.linear(x_used, w_used, Some(b))?;
        self.sites[site] = Some(SiteNodes {
            lhs: x,
            rhs: w,
            output: y,
        });
        Ok(y)
    }

    fn product(&mut self, id: &str, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let site = self.site_index(id);
        let a_used = self.hooked_operand(site, Operand::Lhs, a)?;
        let b_used = self.hooked_operand(site, Operand::Rhs, b)?;
        let out = self.graph.batch_matmul(a_used, b_used, trans_b)?;
        self.sites[site] = Some(SiteNodes {
            lhs: a,
            rhs: b,
            output: out,
        });
        Ok(out)
    }

    /// SiLU of the conditioning vector `t_embed + y_embed`, `[B, D]`.
    fn conditioning(&mut self, t: &[usize], y: &[usize]) -> Result<NodeId> {
        let d = self.model.config.embed_dim;
        let feats = self.graph.constant(timestep_features(t, d));
        let h = self.linear("t_embed.fc1", feats)?;
        let h = self.graph.silu(h);
        let te = self.linear("t_embed.fc2", h)?;
        let table = self.param("y_embed.table");
        let ye = self.graph.embedding(table, y)?;
        let c = self.graph.add(te, ye)?;
        self.graph.tap("cond", c)?;
        Ok(self.graph.silu(c))
    }

    fn modulate(&mut self, x: NodeId, shift: NodeId, scale: NodeId, tokens: usize) -> Result<NodeId> {
        let sc = self.graph.repeat_rows(scale, tokens)?;
        let sc = self.graph.add_scalar(sc, 1.0);
        let sh = self.graph.repeat_rows(shift, tokens)?;
        let m = self.graph.mul(x, sc)?;
        self.graph.add(m, sh)
    }

    fn gated(&mut self, x: NodeId, gate: NodeId, branch: NodeId, tokens: usize) -> Result<NodeId> {
        let gr = self.graph.repeat_rows(gate, tokens)?;
        let gb = self.graph.mul(branch, gr)?;
        self.graph.add(x, gb)
    }

    fn block(&mut self, b: usize, h: NodeId, cond: NodeId, batch: usize) -> Result<NodeId> {
        let c = &self.model.config;
        let (d, n, heads) = (c.embed_dim, c.num_tokens(), c.num_heads);
        let p = format!("blocks.{b}");
        self.graph.tap(format!("{p}.input"), h)?;
        let m = self.linear(&format!("{p}.adaln"), cond)?;
        self.graph.tap(format!("{p}.modulation"), m)?;
        let chunk = |g: &mut Graph, i: usize| g.slice_cols(m, i * d, d);
        let shift_a = chunk(&mut self.graph, 0)?;
        let scale_a = chunk(&mut self.graph, 1)?;
        let gate_a = chunk(&mut self.graph, 2)?;
        let shift_m = chunk(&mut self.graph, 3)?;
        let scale_m = chunk(&mut self.graph, 4)?;
        let gate_m = chunk(&mut self.graph, 5)?;

        let hn = self.graph.layer_norm(h, LAYER_NORM_EPS)?;
        let hm = self.modulate(hn, shift_a, scale_a, n)?;
        let qkv = self.linear(&format!("{p}.attn.qkv"), hm)?;
        let q = self.graph.slice_cols(qkv, 0, d)?;
        let k = self.graph.slice_cols(qkv, d, d)?;
        let v = self.graph.slice_cols(qkv, 2 * d, d)?;
        let (qk_id, av_id) = (format!("{p}.attn.qk"), format!("{p}.attn.av"));
        let mut graph = std::mem::take(&mut self.graph);
        let attn = {
            let mut product = |g: &mut Graph, l: NodeId, r: NodeId, tb: bool, which: AttnProduct| {
                std::mem::swap(&mut self.graph, g);
                let id = match which {
                    AttnProduct::Scores => &qk_id,
                    AttnProduct::Mix => &av_id,
                };
                let out = self.product(id, l, r, tb);
                std::mem::swap(&mut self.graph, g);
                out
            };
            attention_core(&mut graph, q, k, v, batch, n, heads, &mut product)
        };
        self.graph = graph;
        let attn = attn?;
        let proj = self.linear(&format!("{p}.attn.proj"), attn.output)?;
        let h = self.gated(h, gate_a, proj, n)?;

        let hn = self.graph.layer_norm(h, LAYER_NORM_EPS)?;
        let hm = self.modulate(hn, shift_m, scale_m, n)?;
        let f1 = self.linear(&format!("{p}.mlp.fc1"), hm)?;
        let act = self.graph.gelu(f1);
        let f2 = self.linear(&format!("{p}.mlp.fc2"), act)?;
        let h = self.gated(h, gate_m, f2, n)?;
        self.graph.tap(format!("{p}.output"), h)?;
        Ok(h)
    }

    fn run(mut self, x: &Tensor, y: &[usize]) -> Result<ForwardPass> {
        let c = self.model.config.clone();
        let batch = self.timesteps.len();
        let (n, d) = (c.num_tokens(), c.embed_dim);
        let order = patch_order(&c, batch);
        let tokens = Tensor::new(
            vec![batch * n, c.patch_dim()],
            order.iter().map(|&i| x.data()[i]).collect(),
        )?;
        let tokens = self.graph.constant(tokens);
        let cond = self.conditioning(self.timesteps, y)?;
        let h = self.linear("patch_embed", tokens)?;
        let pos = position_table(n, d);
        let pos = Tensor::new(vec![batch * n, d], pos.repeat(batch))?;
        let pos = self.graph.constant(pos);
        let mut h = self.graph.add(h, pos)?;
        for b in 0..c.num_blocks {
            h = self.block(b, h, cond, batch)?;
        }
        let m = self.linear("final.adaln", cond)?;
        let shift = self.graph.slice_cols(m, 0, d)?;
        let scale = self.graph.slice_cols(m, d, d)?;
        let hn = self.graph.layer_norm(h, LAYER_NORM_EPS)?;
        let hm = self.modulate(hn, shift, scale, n)?;
        let out = self.linear("final.linear", hm)?;
        let [ch, hh, ww] = c.image_shape();
        let output = self
            .graph
            .gather(out, inverse(&order), vec![batch, ch, hh, ww])?;
        self.graph.tap("output", output)?;
        let sites = self
            .sites
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Contract(format!("site {i} never evaluated"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardPass {
            graph: self.graph,
            output,
            sites,
            params: self.params,
        })
    }
}

impl DiTModel {
    /// Fresh model with the standard initialization: Xavier-uniform linear
    /// weights, N(0, 0.02²) embeddings, and zeroed adaLN and output layers.
    pub fn new(config: DiTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Normal::new(0.0, 0.02).expect("valid normal");
        let values = param_specs(&config)
            .iter()
            .map(|(name, shape)| {
                let numel = shape.iter().product();
                let zeroed = name.ends_with(".bias")
                    || name.contains("adaln")
                    || name.starts_with("final.linear");
                let data: Vec<f64> = if zeroed {
                    vec![0.0; numel]
                } else if name.starts_with("t_embed") || name.starts_with("y_embed") {
                    (0..numel).map(|_| small.sample(&mut rng)).collect()
                } else {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                    (0..numel).map(|_| u.sample(&mut rng)).collect()
                };
                let mut t = Tensor::new(shape.clone(), data)?;
                t.round_to_f32();
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(config, values)
    }

    /// Model whose every parameter, gates included, is drawn from N(0, std²).
    pub fn random(config: DiTConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = param_specs(&config)
            .iter()
            .map(|(_, shape)| {
                let numel = shape.iter().product();
                let data = (0..numel)
                    .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_values(config, values)
    }

    /// Builds a model from parameter values in [`DiTModel::param_names`] order.
    pub fn from_values(config: DiTConfig, values: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != values.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                values.len()
            )));
        }
        for ((name, shape), v) in specs.iter().zip(&values) {
            if v.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
            if !v.is_finite() {
                return Err(Error::Domain(format!("parameter {name} is not finite")));
            }
        }
        let names: Vec<String> = specs.into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(DiTModel {
            registry: LayerTapRegistry::for_config(&config),
            config,
            names,
            values,
            index,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.config
    }

    pub fn registry(&self) -> &LayerTapRegistry {
        &self.registry
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.values[index]
    }

    pub fn num_parameters(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.values.iter_mut().for_each(Tensor::round_to_f32);
    }

    fn check_inputs(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<()> {
        let [c, h, w] = self.config.image_shape();
        let batch = t.len();
        if x.shape() != [batch, c, h, w] {
            return Err(Error::Dimension(format!(
                "input shape {:?} does not match [{batch}, {c}, {h}, {w}]",
                x.shape()
            )));
        }
        if y.len() != batch {
            return Err(Error::Dimension(format!(
                "{} class labels for a batch of {batch}",
                y.len()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&s| s >= self.config.timesteps) {
            return Err(Error::Domain(format!(
                "timestep {bad} outside 0..{}",
                self.config.timesteps
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= self.config.num_classes) {
            return Err(Error::Domain(format!(
                "class {bad} outside 0..{}",
                self.config.num_classes
            )));
        }
        if !x.is_finite() {
            return Err(Error::Domain("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Records the whole forward computation as a graph.
    ///
    /// With `trainable` set, parameters become differentiable leaves.
    pub fn forward_pass(
        &self,
        x: &Tensor,
        t: &[usize],
        y: &[usize],
        hook: Option<&dyn SiteHook>,
        trainable: bool,
    ) -> Result<ForwardPass> {
        self.check_inputs(x, t, y)?;
        Builder::new(self, hook, t, trainable).run(x, y)
    }

    pub fn forward(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor> {
        self.forward_with(x, t, y, None)
    }

    /// Full-batch prediction with an optional site hook, evaluated in
    /// fixed-size chunks in parallel.
    pub fn forward_with(
        &self,
        x: &Tensor,
        t: &[usize],
        y: &[usize],
        hook: Option<&dyn SiteHook>,
    ) -> Result<Tensor> {
        self.check_inputs(x, t, y)?;
        let batch = t.len();
        if batch == 0 {
            return Ok(x.clone());
        }
        let starts: Vec<usize> = (0..batch).step_by(PREDICT_CHUNK).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let len = PREDICT_CHUNK.min(batch - s);
                let xs = x.rows(s, len)?;
                let pass = Builder::new(self, hook, &t[s..s + len], false).run(&xs, &y[s..s + len])?;
                Ok(pass.graph.value(pass.output).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&parts)
    }

    /// adaLN outputs of `block` for a single `(t, y)` pair.
    pub fn modulation(&self, t: usize, y: usize, block: usize) -> Result<Modulation> {
        if block >= self.config.num_blocks {
            return Err(Error::Domain(format!("block {block} out of range")));
        }
        let x = Tensor::zeros(&[1, self.config.channels, self.config.image_size, self.config.image_size]);
        let pass = self.forward_pass(&x, &[t], &[y], None, false)?;
        let node = pass
            .graph
            .tapped(&format!("blocks.{block}.modulation"))
            .expect("modulation tap");
        let v = pass.graph.value(node).data();
        let d = self.config.embed_dim;
        let part = |i: usize| v[i * d..(i + 1) * d].to_vec();
        Ok(Modulation {
            shift_attn: part(0),
            scale_attn: part(1),
            gate_attn: part(2),
            shift_mlp: part(3),
            scale_mlp: part(4),
            gate_mlp: part(5),
        })
    }

    /// Weight tensor names claimed by linear sites, in registry order.
    pub fn site_weight_names(&self) -> Vec<String> {
        self.registry
            .sites()
            .iter()
            .filter_map(|s| s.weight_name())
            .collect()
    }

    /// Kind of the site at `index` in the registry.
    pub fn site_kind(&self, index: usize) -> Option<SiteKind> {
        self.registry.get(index).map(|s| s.kind)
    }
}

impl NoisePredictor for DiTModel {
    fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    fn predict(&self, x: &Tensor, t: &[usize], y: &[usize]) -> Result<Tensor> {
        self.forward(x, t, y)
    }
}
