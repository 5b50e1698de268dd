//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose inputs already exist, so the node list is
//! a topological order by construction and [`Graph::backward`] is a single
//! reverse sweep.

use std::collections::BTreeMap;

use crate::adapters::{rank_bracket, truncated_from_projection};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` on each side.
    Same,
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Square { a: Var },
    Abs { a: Var },
    Sigmoid { a: Var },
    Silu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Narrow { a: Var, axis: usize, start: usize },
    Sum { a: Var },
    Mean { a: Var },
    MeanAxis { a: Var, axis: usize },
    FracRank { u: Var, b: Var, rank: Var, gamma: f64, floor: usize, ceil: usize },
    #[cfg(test)]
    Broken { a: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Recorded computation. Owned by one training step; not shared.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh())
}

fn gelu_grad(v: f64) -> f64 {
    let inner = GELU_K * (v + GELU_C * v * v * v);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v)
}

/// Row-wise softmax over the last axis with max subtraction.
pub(crate) fn softmax_rows(data: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    if m == 0 {
        return out;
    }
    for (row, o) in data.chunks(m).zip(out.chunks_mut(m)) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - mx).exp();
            s += *ov;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn name(&self, v: Var) -> Option<&str> {
        self.nodes[v.0].name.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            name: Some(name.into()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn named_constant(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.constant(value);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    // ---- linear algebra -------------------------------------------------

    /// `[..., k] x [k, m] -> [..., m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `[B, n, k] x [B, k, m]`, or `[B, n, k] x [B, m, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let (kb, m) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * n * m];
        for i in 0..batch {
            let ai = &ad[i * n * k..(i + 1) * n * k];
            let bi = &bd[i * k * m..(i + 1) * k * m];
            let oi = &mut out[i * n * m..(i + 1) * n * m];
            if trans_b {
                kernels::gemm_nt(n, k, m, ai, bi, oi);
            } else {
                kernels::gemm_nn(n, k, m, ai, bi, oi);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![batch, n, m], out),
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::shape(op, sa, sb));
        }
        sa.iter()
            .zip(sb)
            .map(|(&x, &y)| match (x, y) {
                _ if x == y => Ok(x),
                (1, _) => Ok(y),
                (_, 1) => Ok(x),
                _ => Err(Error::shape(op, sa, sb)),
            })
            .collect()
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let out_shape = self.broadcast_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = kernels::broadcast_offsets(&out_shape, ta.shape());
            let ob = kernels::broadcast_offsets(&out_shape, tb.shape());
            oa.iter()
                .zip(&ob)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Elementwise sum with size-1 broadcasting on equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `a[..., m] + bias[m]`
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let m = sb[0];
        let bd = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(m.max(1)) {
            row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(out, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar { a }, &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square { a }, &[a])
    }

    /// `|a|`, with subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid { a }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu { a }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let out = Tensor::from_parts(t.shape().to_vec(), softmax_rows(t.data(), m));
        Ok(self.push(out, Op::Softmax { a }, &[a]))
    }

    // ---- normalization --------------------------------------------------

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both `[m]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let m = *sx.last().ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [m] || self.shape(beta) != [m] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let rows = xd.len() / m.max(1);
        let mut out = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                out[r * m + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(sx, out);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstd }, &[x, gamma, beta]))
    }

    /// Group normalization over `[B, C, H, W]`, affine per channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || groups == 0 || sx[1] % groups != 0 {
            return Err(Error::Contract(format!(
                "group_norm: shape {sx:?} incompatible with {groups} groups"
            )));
        }
        let c = sx[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("group_norm", &sx, self.shape(gamma)));
        }
        let plane = sx[2] * sx[3];
        let per_group = c / groups * plane;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; sx[0] * groups];
        for (gi, (chunk, ochunk)) in xd.chunks(per_group).zip(out.chunks_mut(per_group)).enumerate() {
            let mean = chunk.iter().sum::<f64>() / per_group as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[gi] = rs;
            let c0 = (gi % groups) * (c / groups);
            for (i, (o, v)) in ochunk.iter_mut().zip(chunk).enumerate() {
                let ch = c0 + i / plane;
                *o = (v - mean) * rs * g[ch] + b[ch];
            }
        }
        let out = Tensor::from_parts(sx, out);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, rstd }, &[x, gamma, beta]))
    }

    // ---- convolution ----------------------------------------------------

    /// `x[B, Ci, H, W]`, `w[Co, Ci, k, k]`, optional `bias[Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
            }
        }
        let k = sw[2];
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        };
        let geom = ConvGeom::new(sx[1], sx[2], sx[3], k, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &sx, &sw))?;
        let data = kernels::conv2d_forward(
            &geom,
            sx[0],
            sw[0],
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_parts(vec![sx[0], sw[0], geom.out_h, geom.out_w], data);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { x, w, bias, geom }, &inputs))
    }

    /// `x[B, Ci, H, W]`, `w[Ci, Co, k, k]`; output extent
    /// `(H - 1) * stride - 2 * pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || output_padding >= stride.max(1) {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let (co, k) = (sw[1], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv_transpose2d bias", &sw, self.shape(b)));
            }
        }
        let out_h = ((sx[2] - 1) * stride + k + output_padding)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", &sx, &sw))?;
        let out_w = ((sx[3] - 1) * stride + k + output_padding)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::shape("conv_transpose2d", &sx, &sw))?;
        let geom = ConvGeom::new(co, out_h, out_w, k, stride, pad)
            .filter(|g| g.out_h == sx[2] && g.out_w == sx[3])
            .ok_or_else(|| Error::shape("conv_transpose2d", &sx, &sw))?;
        let data = kernels::conv_transpose2d_forward(
            &geom,
            sx[0],
            sx[1],
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_parts(vec![sx[0], co, out_h, out_w], data);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, bias, geom }, &inputs))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::Contract("transpose needs at least 2 axes".into()));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::OutOfRange {
                what: "narrow",
                detail: format!("axis {axis} range {start}..{} of {sa:?}", start + len),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Narrow { a, axis, start }, &[a]))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        self.push(out, Op::Mean { a }, &[a])
    }

    /// Average over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || sa[axis] == 0 {
            return Err(Error::OutOfRange {
                what: "mean_axis",
                detail: format!("axis {axis} of {sa:?}"),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let n = sa[axis];
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for t in 0..n {
                let row = &src[(o * n + t) * inner..(o * n + t + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= n as f64);
        }
        let mut shape = sa;
        shape[axis] = 1;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::MeanAxis { a, axis }, &[a]))
    }

    // ---- fractional rank ------------------------------------------------

    /// Continuous-rank low-rank product from the projection `u = x·A`
    /// (`[..., R]`), the up matrix `b` (`[R, m]`) and a scalar `rank` in
    /// `[1, R]`. The output interpolates the two neighbouring integer-rank
    /// truncations; the backward pass routes `gamma * <g_ceil - g_floor, dy>`
    /// into `rank`.
    pub fn frac_rank(&mut self, u: Var, b: Var, rank: Var, gamma: f64) -> Result<Var> {
        let (su, sb) = (self.shape(u).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || su.last() != Some(&sb[0]) {
            return Err(Error::shape("frac_rank", &su, &sb));
        }
        let r = self.value(rank).item()?;
        let (floor, ceil, lambda) = rank_bracket(r, sb[0])?;
        let (ud, bd) = (self.value(u), self.value(b));
        let out = if floor == ceil {
            truncated_from_projection(ud, bd, floor)?
        } else {
            let gf = truncated_from_projection(ud, bd, floor)?;
            let gc = truncated_from_projection(ud, bd, ceil)?;
            gc.zip_map(&gf, |c, f| lambda * c + (1.0 - lambda) * f)?
        };
        Ok(self.push(out, Op::FracRank { u, b, rank, gamma, floor, ceil }, &[u, b, rank]))
    }

    /// Identity forward whose backward doubles the gradient. Only for
    /// negative tests of the finite-difference oracle.
    #[cfg(test)]
    pub(crate) fn broken_identity(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::Broken { a }, &[a])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            self.backward_node(node, &gy, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.numel());
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to `target`'s shape.
    fn unbroadcast(&self, out_shape: &[usize], g: &[f64], target: Var) -> Vec<f64> {
        let ts = self.shape(target);
        if ts == out_shape {
            return g.to_vec();
        }
        let offs = kernels::broadcast_offsets(out_shape, ts);
        let mut acc = vec![0.0; numel(ts)];
        for (&o, &gv) in offs.iter().zip(g) {
            acc[o] += gv;
        }
        acc
    }

    fn broadcast_operand(&self, out_shape: &[usize], v: Var) -> Vec<f64> {
        let t = self.value(v);
        if t.shape() == out_shape {
            return t.data().to_vec();
        }
        kernels::broadcast_offsets(out_shape, t.shape())
            .into_iter()
            .map(|o| t.data()[o])
            .collect()
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (k, m) = (tb.shape()[0], tb.shape()[1]);
                let n = ta.numel() / k.max(1);
                if rg(*a) {
                    let mut da = vec![0.0; n * k];
                    kernels::gemm_nt(n, m, k, gy, tb.data(), &mut da);
                    self.accumulate(grads, *a, da);
                }
                if rg(*b) {
                    let mut db = vec![0.0; k * m];
                    kernels::gemm_tn(k, n, m, ta.data(), gy, &mut db);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, n, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let m = y.shape()[2];
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for i in 0..batch {
                    let ai = &ta.data()[i * n * k..(i + 1) * n * k];
                    let bi = &tb.data()[i * k * m..(i + 1) * k * m];
                    let gi = &gy[i * n * m..(i + 1) * n * m];
                    let dai = &mut da[i * n * k..(i + 1) * n * k];
                    let dbi = &mut db[i * k * m..(i + 1) * k * m];
                    if *trans_b {
                        // y = a b^T with b [m, k]
                        kernels::gemm_nn(n, m, k, gi, bi, dai);
                        kernels::gemm_tn(m, n, k, gi, ai, dbi);
                    } else {
                        kernels::gemm_nt(n, m, k, gi, bi, dai);
                        kernels::gemm_tn(k, n, m, ai, gi, dbi);
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                let s = y.shape();
                if rg(*a) {
                    let g = self.unbroadcast(s, gy, *a);
                    self.accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let g = self.unbroadcast(s, gy, *b);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Sub { a, b } => {
                let s = y.shape();
                if rg(*a) {
                    let g = self.unbroadcast(s, gy, *a);
                    self.accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let neg: Vec<f64> = gy.iter().map(|v| -v).collect();
                    let g = self.unbroadcast(s, &neg, *b);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                let s = y.shape();
                if rg(*a) {
                    let bv = self.broadcast_operand(s, *b);
                    let prod: Vec<f64> = gy.iter().zip(&bv).map(|(g, v)| g * v).collect();
                    let g = self.unbroadcast(s, &prod, *a);
                    self.accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let av = self.broadcast_operand(s, *a);
                    let prod: Vec<f64> = gy.iter().zip(&av).map(|(g, v)| g * v).collect();
                    let g = self.unbroadcast(s, &prod, *b);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, gy.to_vec());
                if rg(*bias) {
                    let m = self.shape(*bias)[0];
                    let mut db = vec![0.0; m];
                    for row in gy.chunks(m.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, gy.iter().map(|g| g * c).collect());
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                self.accumulate(grads, *a, gy.to_vec());
            }
            Op::Square { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gy.iter().zip(x).map(|(g, v)| 2.0 * v * g).collect());
            }
            Op::Abs { a } => {
                let x = self.value(*a).data();
                let g = gy
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid { a } => {
                let g = gy.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, g);
            }
            Op::Silu { a } => {
                let x = self.value(*a).data();
                let g = gy
                    .iter()
                    .zip(x)
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gy.iter().zip(x).map(|(g, &v)| g * gelu_grad(v)).collect());
            }
            Op::Softmax { a } => {
                let m = *y.shape().last().unwrap();
                let mut g = vec![0.0; gy.len()];
                for ((gr, yr), out) in gy.chunks(m).zip(y.data().chunks(m)).zip(g.chunks_mut(m)) {
                    let d: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        out[j] = yr[j] * (gr[j] - d);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let m = self.shape(*gamma)[0];
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for (r, &rs) in rstd.iter().enumerate() {
                    let row = &xd[r * m..(r + 1) * m];
                    let grow = &gy[r * m..(r + 1) * m];
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rs).collect();
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..m {
                        let dxh = grow[j] * gd[j];
                        s1 += dxh;
                        s2 += dxh * xhat[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    for j in 0..m {
                        let dxh = grow[j] * gd[j];
                        dx[r * m + j] = rs * (dxh - s1 / m as f64 - xhat[j] * s2 / m as f64);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::GroupNorm { x, gamma, beta, groups, rstd } => {
                let sx = self.shape(*x);
                let c = sx[1];
                let plane = sx[2] * sx[3];
                let cpg = c / groups;
                let per_group = cpg * plane;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gi, &rs) in rstd.iter().enumerate() {
                    let chunk = &xd[gi * per_group..(gi + 1) * per_group];
                    let gch = &gy[gi * per_group..(gi + 1) * per_group];
                    let mean = chunk.iter().sum::<f64>() / per_group as f64;
                    let c0 = (gi % groups) * cpg;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for i in 0..per_group {
                        let ch = c0 + i / plane;
                        let xh = (chunk[i] - mean) * rs;
                        let dxh = gch[i] * gd[ch];
                        s1 += dxh;
                        s2 += dxh * xh;
                        dgamma[ch] += gch[i] * xh;
                        dbeta[ch] += gch[i];
                    }
                    let n = per_group as f64;
                    for i in 0..per_group {
                        let ch = c0 + i / plane;
                        let xh = (chunk[i] - mean) * rs;
                        dx[gi * per_group + i] = rs * (gch[i] * gd[ch] - s1 / n - xh * s2 / n);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Conv2d { x, w, bias, geom } => {
                let tw = self.value(*w);
                let cg = kernels::conv2d_backward(
                    geom,
                    self.shape(*x)[0],
                    tw.shape()[0],
                    self.value(*x).data(),
                    tw.data(),
                    gy,
                );
                self.accumulate(grads, *x, cg.dx);
                self.accumulate(grads, *w, cg.dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.db);
                }
            }
            Op::ConvTranspose2d { x, w, bias, geom } => {
                let sx = self.shape(*x);
                let cg = kernels::conv_transpose2d_backward(
                    geom,
                    sx[0],
                    sx[1],
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                );
                self.accumulate(grads, *x, cg.dx);
                self.accumulate(grads, *w, cg.dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.db);
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, kernels::permute(gy, y.shape(), &inv));
            }
            Op::Narrow { a, axis, start } => {
                let sa = self.shape(*a);
                let len = y.shape()[*axis];
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let mut g = vec![0.0; numel(sa)];
                for o in 0..outer {
                    let dst = (o * sa[*axis] + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gy[src..src + len * inner]);
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, vec![gy[0]; self.value(*a).numel()]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gy[0] / n as f64; n]);
            }
            Op::MeanAxis { a, axis } => {
                let sa = self.shape(*a);
                let n = sa[*axis];
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let mut g = vec![0.0; numel(sa)];
                for o in 0..outer {
                    let src = &gy[o * inner..(o + 1) * inner];
                    for t in 0..n {
                        let dst = &mut g[(o * n + t) * inner..(o * n + t + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s / n as f64);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::FracRank { u, b, rank, gamma, floor, ceil } => {
                let (tu, tb) = (self.value(*u), self.value(*b));
                let r_max = tb.shape()[0];
                let m = tb.shape()[1];
                let rows = tu.numel() / r_max.max(1);
                let lambda = self.value(*rank).item()? - *floor as f64;
                // f = (u ⊙ w) B with per-column weights w
                let w: Vec<f64> = (0..r_max)
                    .map(|i| {
                        if floor == ceil {
                            if i < *floor { 1.0 } else { 0.0 }
                        } else if i < *floor {
                            1.0
                        } else if i < *ceil {
                            lambda
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if rg(*u) {
                    let mut du = vec![0.0; rows * r_max];
                    kernels::gemm_nt(rows, m, r_max, gy, tb.data(), &mut du);
                    for row in du.chunks_mut(r_max) {
                        row.iter_mut().zip(&w).for_each(|(d, wi)| *d *= wi);
                    }
                    self.accumulate(grads, *u, du);
                }
                if rg(*b) {
                    let mut uw = tu.data().to_vec();
                    for row in uw.chunks_mut(r_max) {
                        row.iter_mut().zip(&w).for_each(|(d, wi)| *d *= wi);
                    }
                    let mut db = vec![0.0; r_max * m];
                    kernels::gemm_tn(r_max, rows, m, &uw, gy, &mut db);
                    self.accumulate(grads, *b, db);
                }
                if rg(*rank) {
                    let dr = if floor == ceil {
                        0.0
                    } else {
                        // g_ceil - g_floor is the single outer product u[:, floor] b[floor, :]
                        let bc = &tb.data()[floor * m..(floor + 1) * m];
                        let mut s = 0.0;
                        for (r, grow) in gy.chunks(m).enumerate() {
                            let uc = tu.data()[r * r_max + floor];
                            s += uc * kernels::dot(bc, grow);
                        }
                        gamma * s
                    };
                    self.accumulate(grads, *rank, vec![dr]);
                }
            }
            #[cfg(test)]
            Op::Broken { a } => {
                self.accumulate(grads, *a, gy.iter().map(|g| 2.0 * g).collect());
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not reach it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }

    /// Gradients of all named trainable leaves (zeros where unreached).
    pub fn named(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .filter_map(|(i, n)| {
                let name = n.name.clone()?;
                Some((name, self.wrt(graph, Var(i))))
            })
            .collect()
    }
}
