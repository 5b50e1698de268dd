//! Per-task Conv-GroupNorm-SiLU encoder and transposed-conv decoder.

use serde::{Deserialize, Serialize};

use crate::backbone::sinusoidal_pe;
use crate::error::{Error, Result};
use crate::graph::{Padding, Var};
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub height: usize,
    pub width: usize,
    pub num_blocks: usize,
    /// Hidden channel count C′.
    pub hidden: usize,
    /// Token width L.
    pub dim: usize,
    pub groups: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("in_channels", self.in_channels),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("hidden", self.hidden),
            ("dim", self.dim),
            ("groups", self.groups),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("encoder {k} must be at least 1")));
            }
        }
        let f = 1usize << self.num_blocks;
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return Err(Error::Config(format!(
                "spatial size {}x{} not divisible by 2^{}",
                self.height, self.width, self.num_blocks
            )));
        }
        if self.hidden % self.groups != 0 {
            return Err(Error::Config(format!(
                "C' = {} not divisible by {} groups",
                self.hidden, self.groups
            )));
        }
        Ok(())
    }

    /// Token grid `(H', W')`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height >> self.num_blocks, self.width >> self.num_blocks)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvUnit {
    fn new(
        store: &mut ParamStore,
        name: &str,
        wshape: [usize; 4],
        fan_in: usize,
        out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (1.0 / fan_in as f64).sqrt();
        Ok(ConvUnit {
            w: store.add(format!("{name}.w"), rng::normal(rng, wshape, std), ParamKind::Weight)?,
            b: store.add(format!("{name}.b"), Tensor::zeros([out]), ParamKind::Weight)?,
            gamma: store.add(format!("{name}.gn.gamma"), Tensor::ones([out]), ParamKind::Weight)?,
            beta: store.add(format!("{name}.gn.beta"), Tensor::zeros([out]), ParamKind::Weight)?,
        })
    }

    fn norm_act(&self, ctx: &mut Ctx<'_>, y: Var, groups: usize) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let y = ctx.graph.group_norm(y, g, b, groups, GN_EPS)?;
        Ok(ctx.graph.silu(y))
    }

    fn conv(&self, ctx: &mut Ctx<'_>, x: Var, stride: usize, groups: usize) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        let y = ctx.graph.conv2d(x, w, Some(b), stride, Padding::Same)?;
        self.norm_act(ctx, y, groups)
    }

    fn up(&self, ctx: &mut Ctx<'_>, x: Var, groups: usize) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        let y = ctx.graph.conv_transpose2d(x, w, Some(b), 2, 1, 1)?;
        self.norm_act(ctx, y, groups)
    }
}

#[derive(Clone, Debug)]
struct Linear1x1 {
    w: ParamId,
    b: ParamId,
}

impl Linear1x1 {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        let std = (1.0 / cin as f64).sqrt();
        Ok(Linear1x1 {
            w: store.add(format!("{name}.w"), rng::normal(rng, [cout, cin, 1, 1], std), ParamKind::Weight)?,
            b: store.add(format!("{name}.b"), Tensor::zeros([cout]), ParamKind::Weight)?,
        })
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = ctx.param(self.b);
        ctx.graph.conv2d(x, w, Some(b), 1, Padding::Valid)
    }
}

/// Encoder and decoder of one task.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: EncoderConfig,
    down: Vec<(ConvUnit, ConvUnit)>,
    enc_proj: Linear1x1,
    dec_proj: Linear1x1,
    up: Vec<(ConvUnit, ConvUnit)>,
    head: Linear1x1,
    pe: Tensor,
}

impl Codec {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.hidden;
        let mut down = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let cin = if i == 0 { cfg.in_channels } else { c };
            let a = ConvUnit::new(store, &format!("{name}.enc.{i}.conv1"), [c, cin, 3, 3], cin * 9, c, rng)?;
            let b = ConvUnit::new(store, &format!("{name}.enc.{i}.conv2"), [c, c, 3, 3], c * 9, c, rng)?;
            down.push((a, b));
        }
        let enc_proj = Linear1x1::new(store, &format!("{name}.enc.proj"), cfg.t_in * c, cfg.dim, rng)?;
        let dec_proj = Linear1x1::new(store, &format!("{name}.dec.proj"), cfg.dim, cfg.t_out * c, rng)?;
        let mut up = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            let a = ConvUnit::new(store, &format!("{name}.dec.{i}.convt"), [c, c, 3, 3], c * 9, c, rng)?;
            let b = ConvUnit::new(store, &format!("{name}.dec.{i}.conv"), [c, c, 3, 3], c * 9, c, rng)?;
            up.push((a, b));
        }
        let head = Linear1x1::new(store, &format!("{name}.dec.head"), c, cfg.in_channels, rng)?;
        let (h, w) = cfg.grid();
        let pe = sinusoidal_pe(h, w, cfg.dim)?.reshape([1, h * w, cfg.dim])?;
        Ok(Codec {
            config: cfg.clone(),
            down,
            enc_proj,
            dec_proj,
            up,
            head,
            pe,
        })
    }

    /// `[(B T_in), C, H, W]` frames to `[B, N, L]` tokens.
    pub fn encode(&self, ctx: &mut Ctx<'_>, frames: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = ctx.graph.shape(frames).to_vec();
        if s.len() != 4
            || s[1] != cfg.in_channels
            || s[2] != cfg.height
            || s[3] != cfg.width
            || s[0] % cfg.t_in != 0
        {
            return Err(Error::shape(
                "encode",
                &s,
                &[cfg.t_in, cfg.in_channels, cfg.height, cfg.width],
            ));
        }
        let b = s[0] / cfg.t_in;
        let mut x = frames;
        for (c1, c2) in &self.down {
            x = c1.conv(ctx, x, 1, cfg.groups)?;
            x = c2.conv(ctx, x, 2, cfg.groups)?;
        }
        let (h, w) = cfg.grid();
        let x = ctx.graph.reshape(x, [b, cfg.t_in * cfg.hidden, h, w])?;
        let x = self.enc_proj.forward(ctx, x)?;
        let x = ctx.graph.reshape(x, [b, cfg.dim, h * w])?;
        let x = ctx.graph.permute(x, &[0, 2, 1])?;
        if !ctx.opts.position_encoding {
            return Ok(x);
        }
        let pe = ctx.graph.constant(self.pe.clone());
        ctx.graph.add(x, pe)
    }

    /// `[B, N, L]` tokens to `[(B T_out), C, H, W]` frames.
    pub fn decode(&self, ctx: &mut Ctx<'_>, tokens: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = ctx.graph.shape(tokens).to_vec();
        let (h, w) = cfg.grid();
        if s.len() != 3 || s[1] != h * w || s[2] != cfg.dim {
            return Err(Error::shape("decode", &s, &[h * w, cfg.dim]));
        }
        let b = s[0];
        let x = ctx.graph.permute(tokens, &[0, 2, 1])?;
        let x = ctx.graph.reshape(x, [b, cfg.dim, h, w])?;
        let x = self.dec_proj.forward(ctx, x)?;
        let mut x = ctx.graph.reshape(x, [b * cfg.t_out, cfg.hidden, h, w])?;
        for (ct, c) in &self.up {
            x = ct.up(ctx, x, cfg.groups)?;
            x = c.conv(ctx, x, 1, cfg.groups)?;
        }
        self.head.forward(ctx, x)
    }

    /// Handles of every decoder weight tensor, in layer order.
    pub fn decoder_weights(&self) -> Vec<ParamId> {
        let mut v = vec![self.dec_proj.w];
        for (a, b) in &self.up {
            v.push(a.w);
            v.push(b.w);
        }
        v.push(self.head.w);
        v
    }

    /// Handles of every bias in the decoder.
    pub fn decoder_biases(&self) -> Vec<ParamId> {
        let mut v = vec![self.dec_proj.b];
        for (a, b) in &self.up {
            v.extend([a.b, a.beta, b.b, b.beta]);
        }
        v.push(self.head.b);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ForwardOptions;

    fn cfg(hw: usize, blocks: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels: 2,
            t_in: 3,
            t_out: 2,
            height: hw,
            width: hw,
            num_blocks: blocks,
            hidden: 8,
            dim: 16,
            groups: 4,
        }
    }

    fn run(cfg: &EncoderConfig) -> (Vec<usize>, Vec<usize>) {
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, "t", cfg, &mut rng::rng(1)).unwrap();
        let x = rng::uniform(&mut rng::rng(2), [2 * cfg.t_in, 2, cfg.height, cfg.width], 0.0, 1.0);
        let mut ctx = Ctx::new(&store, ForwardOptions::default());
        let xv = ctx.graph.constant(x);
        let tok = codec.encode(&mut ctx, xv).unwrap();
        let out = codec.decode(&mut ctx, tok).unwrap();
        (ctx.graph.shape(tok).to_vec(), ctx.graph.shape(out).to_vec())
    }

    #[test]
    fn token_counts() {
        assert_eq!(cfg(32, 2).tokens(), 64);
        assert_eq!(cfg(64, 3).tokens(), 64);
        assert_eq!(cfg(16, 2).tokens(), 16);
    }

    #[test]
    fn round_trip_shapes() {
        for (hw, nb) in [(16, 2), (32, 2), (8, 1)] {
            let c = cfg(hw, nb);
            let (tok, out) = run(&c);
            assert_eq!(tok, vec![2, c.tokens(), 16]);
            assert_eq!(out, vec![2 * c.t_out, 2, hw, hw]);
        }
    }

    #[test]
    fn rejects_indivisible_spatial() {
        let mut c = cfg(16, 2);
        c.height = 18;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_tokens_decode_to_zero() {
        let c = cfg(16, 2);
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, "t", &c, &mut rng::rng(1)).unwrap();
        let mut ctx = Ctx::new(&store, ForwardOptions::default());
        let z = ctx.graph.constant(Tensor::zeros([2, c.tokens(), c.dim]));
        let out = codec.decode(&mut ctx, z).unwrap();
        assert!(ctx.graph.value(out).data().iter().all(|&v| v == 0.0));
    }
}
