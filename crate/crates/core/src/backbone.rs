//! Shared transformer blocks: pre-norm attention with RA-MoE projections,
//! the pooled temporal module, and the frozen FFN.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, RaMoeLayer};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

/// How the temporal module's output is applied to the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// `x + sigmoid(o)`
    #[default]
    Additive,
    /// `x * sigmoid(o)`
    Gated,
    /// Module skipped entirely.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub experts_qkv: usize,
    pub experts_proj: usize,
    pub experts_temporal: usize,
    pub temporal_ratio: usize,
    pub adapter: AdapterConfig,
    pub temporal_mode: TemporalMode,
    pub init_std: f64,
}

impl BackboneConfig {
    /// Two layers at width 64 with 3/2/2 experts.
    pub fn desk() -> Self {
        BackboneConfig {
            depth: 2,
            dim: 64,
            heads: 4,
            ffn_ratio: 4,
            experts_qkv: 3,
            experts_proj: 2,
            experts_temporal: 2,
            temporal_ratio: 6,
            adapter: AdapterConfig::default(),
            temporal_mode: TemporalMode::Additive,
            init_std: 0.02,
        }
    }

    /// ViT-Base sized: 12 layers, width 768, 12 heads, 6/2/2 experts.
    pub fn vit_base() -> Self {
        BackboneConfig {
            depth: 12,
            dim: 768,
            heads: 12,
            experts_qkv: 6,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("ffn_ratio", self.ffn_ratio),
            ("experts_qkv", self.experts_qkv),
            ("experts_proj", self.experts_proj),
            ("experts_temporal", self.experts_temporal),
            ("temporal_ratio", self.temporal_ratio),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by 4 for the 2-D position encoding",
                self.dim
            )));
        }
        if self.adapter.max_rank == 0
            || !(self.adapter.init_rank >= 1.0 && self.adapter.init_rank <= self.adapter.max_rank as f64)
        {
            return Err(Error::Config(format!(
                "r_init {} outside [1, r_max = {}]",
                self.adapter.init_rank, self.adapter.max_rank
            )));
        }
        Ok(())
    }

    pub fn experts_per_block(&self) -> usize {
        3 * self.experts_qkv + self.experts_proj + self.experts_temporal
    }

    pub fn total_experts(&self) -> usize {
        self.depth * self.experts_per_block()
    }
}

/// 2-D sinusoidal position encoding `[H' * W', dim]`.
///
/// Row `(y, x)` is `[sin(y ω), cos(y ω), sin(x ω), cos(x ω)]` with
/// `ω_i = 10000^(-i / (dim / 4))`, `i < dim / 4`.
pub fn sinusoidal_pe(height: usize, width: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::Config(format!(
            "position encoding dim {dim} must be a positive multiple of 4"
        )));
    }
    let q = dim / 4;
    let freqs: Vec<f64> = (0..q).map(|i| 10000f64.powf(-(i as f64) / q as f64)).collect();
    let mut data = Vec::with_capacity(height * width * dim);
    for y in 0..height {
        for x in 0..width {
            data.extend(freqs.iter().map(|f| (y as f64 * f).sin()));
            data.extend(freqs.iter().map(|f| (y as f64 * f).cos()));
            data.extend(freqs.iter().map(|f| (x as f64 * f).sin()));
            data.extend(freqs.iter().map(|f| (x as f64 * f).cos()));
        }
    }
    Tensor::new([height * width, dim], data)
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim]), ParamKind::Frozen)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), ParamKind::Frozen)?,
        })
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pooled temporal module: `o = FFN(x') + RA-MoE(x')`, `x' = mean_N(x)`.
#[derive(Clone, Debug)]
pub struct TemporalModule {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
    pub moe: RaMoeLayer,
    pub mode: TemporalMode,
}

impl TemporalModule {
    fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let l = cfg.dim;
        let hidden = (l / cfg.temporal_ratio).max(1);
        let down_w = store.add(
            format!("{name}.down.w"),
            rng::normal(rng, [l, hidden], (1.0 / l as f64).sqrt()),
            ParamKind::Weight,
        )?;
        let down_b = store.add(format!("{name}.down.b"), Tensor::zeros([hidden]), ParamKind::Weight)?;
        // second layer starts at zero
        let up_w = store.add(format!("{name}.up.w"), Tensor::zeros([hidden, l]), ParamKind::Weight)?;
        let up_b = store.add(format!("{name}.up.b"), Tensor::zeros([l]), ParamKind::Weight)?;
        let moe = RaMoeLayer::new(
            store,
            &format!("{name}.moe"),
            l,
            l,
            cfg.experts_temporal,
            None,
            &cfg.adapter,
            rng,
        )?;
        Ok(TemporalModule {
            down_w,
            down_b,
            up_w,
            up_b,
            moe,
            mode: cfg.temporal_mode,
        })
    }

    /// The pre-sigmoid signal `o` for `x [B, N, L]`, shape `[B, 1, L]`.
    pub fn signal(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let pooled = ctx.graph.mean_axis(x, 1)?;
        let dw = ctx.param(self.down_w);
        let db = ctx.param(self.down_b);
        let uw = ctx.param(self.up_w);
        let ub = ctx.param(self.up_b);
        let h = ctx.graph.matmul(pooled, dw)?;
        let h = ctx.graph.add_bias(h, db)?;
        let h = ctx.graph.gelu(h);
        let f = ctx.graph.matmul(h, uw)?;
        let f = ctx.graph.add_bias(f, ub)?;
        let m = self.moe.forward(ctx, pooled)?;
        ctx.graph.add(f, m)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        if self.mode == TemporalMode::Identity {
            return Ok(x);
        }
        let o = self.signal(ctx, x)?;
        let s = ctx.graph.sigmoid(o);
        match self.mode {
            TemporalMode::Additive => ctx.graph.add(x, s),
            TemporalMode::Gated => ctx.graph.mul(x, s),
            TemporalMode::Identity => unreachable!(),
        }
    }
}

/// Pre-norm attention sub-block with RA-MoE on Q, K, V and the output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    norm: Norm,
    pub q: RaMoeLayer,
    pub k: RaMoeLayer,
    pub v: RaMoeLayer,
    pub proj: RaMoeLayer,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let l = cfg.dim;
        let norm = Norm::new(store, &format!("{name}.norm"), l)?;
        let mut site = |site: &str, experts: usize, rng: &mut Rng| {
            let base = rng::truncated_normal(rng, [l, l], cfg.init_std);
            RaMoeLayer::new(store, &format!("{name}.{site}"), l, l, experts, Some(base), &cfg.adapter, rng)
        };
        let q = site("q", cfg.experts_qkv, rng)?;
        let k = site("k", cfg.experts_qkv, rng)?;
        let v = site("v", cfg.experts_qkv, rng)?;
        let proj = site("proj", cfg.experts_proj, rng)?;
        Ok(Attention {
            norm,
            q,
            k,
            v,
            proj,
            heads: cfg.heads,
        })
    }

    fn split_heads(&self, ctx: &mut Ctx<'_>, t: Var) -> Result<Var> {
        let s = ctx.graph.shape(t).to_vec();
        let (b, n, l) = (s[0], s[1], s[2]);
        let d = l / self.heads;
        let t = ctx.graph.reshape(t, [b, n, self.heads, d])?;
        let t = ctx.graph.permute(t, &[0, 2, 1, 3])?;
        ctx.graph.reshape(t, [b * self.heads, n, d])
    }

    /// `x + Proj(MHA(LN(x)))` for `x [B, N, L]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.q.in_dim {
            return Err(Error::shape("attention_forward", &s, &[self.q.in_dim]));
        }
        let (b, n, l) = (s[0], s[1], s[2]);
        let d = l / self.heads;
        let h = self.norm.forward(ctx, x)?;
        let q = self.q.forward(ctx, h)?;
        let k = self.k.forward(ctx, h)?;
        let v = self.v.forward(ctx, h)?;
        let q = self.split_heads(ctx, q)?;
        let k = self.split_heads(ctx, k)?;
        let v = self.split_heads(ctx, v)?;
        let scores = ctx.graph.bmm(q, k, true)?;
        let scores = ctx.graph.scale(scores, 1.0 / (d as f64).sqrt());
        let att = ctx.graph.softmax(scores)?;
        let o = ctx.graph.bmm(att, v, false)?;
        let o = ctx.graph.reshape(o, [b, self.heads, n, d])?;
        let o = ctx.graph.permute(o, &[0, 2, 1, 3])?;
        let o = ctx.graph.reshape(o, [b, n, l])?;
        let o = self.proj.forward(ctx, o)?;
        ctx.graph.add(x, o)
    }

    pub fn sites(&self) -> [(&'static str, &RaMoeLayer); 4] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("proj", &self.proj)]
    }
}

/// Frozen pre-norm FFN: `x + W2 GELU(W1 LN(x) + b1) + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    norm: Norm,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let (l, hid) = (cfg.dim, cfg.dim * cfg.ffn_ratio);
        Ok(FeedForward {
            norm: Norm::new(store, &format!("{name}.norm"), l)?,
            w1: store.add(
                format!("{name}.w1"),
                rng::truncated_normal(rng, [l, hid], cfg.init_std),
                ParamKind::Frozen,
            )?,
            b1: store.add(format!("{name}.b1"), Tensor::zeros([hid]), ParamKind::Frozen)?,
            w2: store.add(
                format!("{name}.w2"),
                rng::truncated_normal(rng, [hid, l], cfg.init_std),
                ParamKind::Frozen,
            )?,
            b2: store.add(format!("{name}.b2"), Tensor::zeros([l]), ParamKind::Frozen)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(ctx, x)?;
        let (w1, b1, w2, b2) = (
            ctx.param(self.w1),
            ctx.param(self.b1),
            ctx.param(self.w2),
            ctx.param(self.b2),
        );
        let h = ctx.graph.matmul(h, w1)?;
        let h = ctx.graph.add_bias(h, b1)?;
        let h = ctx.graph.gelu(h);
        let h = ctx.graph.matmul(h, w2)?;
        let h = ctx.graph.add_bias(h, b2)?;
        ctx.graph.add(x, h)
    }
}

/// attention -> temporal -> FFN
#[derive(Clone, Debug)]
pub struct Block {
    pub attention: Attention,
    pub temporal: TemporalModule,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Block {
            attention: Attention::new(store, &format!("{name}.attn"), cfg, rng)?,
            temporal: TemporalModule::new(store, &format!("{name}.temporal"), cfg, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg, rng)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let x = self.attention.forward(ctx, x)?;
        let x = self.temporal.forward(ctx, x)?;
        self.ffn.forward(ctx, x)
    }

    /// Every RA-MoE site in the block, labelled `q`, `k`, `v`, `proj`, `temporal`.
    pub fn moe_sites(&self) -> Vec<(&'static str, &RaMoeLayer)> {
        let mut v: Vec<_> = self.attention.sites().to_vec();
        v.push(("temporal", &self.temporal.moe));
        v
    }
}
