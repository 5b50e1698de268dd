//! Rank-adaptive mixture-of-experts LoRA.
//!
//! An expert is a low-rank pair `A [L_in x R]`, `B [R x L_out]` with a
//! continuous rank `r` in `[1, R]`. Truncating to an integer rank `k` keeps
//! the first `k` columns of `A` and rows of `B`, which is the same as
//! inserting a diagonal 0/1 selector between them:
//!
//! ```text
//! g_k(x) = x A diag(1, .., 1, 0, .., 0) B = sum_{i < k} (x a_i) b_i
//! ```
//!
//! The selector is never materialized. A fractional rank interpolates the
//! two neighbouring truncations,
//!
//! ```text
//! f_r(x) = λ g_⌈r⌉(x) + (1 - λ) g_⌊r⌋(x),   λ = r - ⌊r⌋
//! ```
//!
//! so `f_r` is piecewise linear in `r`, equals `g_r` at integers and has
//! `∂f/∂r = g_⌈r⌉ - g_⌊r⌋` inside each unit interval. The rank gradient is
//! that difference contracted with the upstream gradient and scaled by `γ`.
//!
//! A layer combines a frozen base projection with a softmax router over
//! experts: `y = x W + α Σ_i G_i(x) f_r^(i)(x)`.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels;
use crate::params::{Ctx, ParamId, ParamKind, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// `(⌊r⌋, ⌈r⌉, r - ⌊r⌋)` after validating `1 <= r <= r_max`.
pub fn rank_bracket(r: f64, r_max: usize) -> Result<(usize, usize, f64)> {
    if !(r >= 1.0 && r <= r_max as f64) {
        return Err(Error::OutOfRange {
            what: "rank",
            detail: format!("{r} not in [1, {r_max}]"),
        });
    }
    let floor = r.floor();
    Ok((floor as usize, r.ceil() as usize, r - floor))
}

/// `u[..., :k] · b[:k, :]` for a precomputed projection `u = x·A`.
pub fn truncated_from_projection(u: &Tensor, b: &Tensor, k: usize) -> Result<Tensor> {
    let (su, sb) = (u.shape(), b.shape());
    if sb.len() != 2 || su.last() != Some(&sb[0]) {
        return Err(Error::shape("truncated_product", su, sb));
    }
    let (r_max, m) = (sb[0], sb[1]);
    if k > r_max {
        return Err(Error::OutOfRange {
            what: "truncation rank",
            detail: format!("k = {k} > r_max = {r_max}"),
        });
    }
    let rows = u.numel() / r_max.max(1);
    let mut out = vec![0.0; rows * m];
    for (urow, orow) in u.data().chunks(r_max.max(1)).zip(out.chunks_mut(m.max(1))) {
        for (i, &uv) in urow[..k].iter().enumerate() {
            let brow = &b.data()[i * m..(i + 1) * m];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += uv * bv);
        }
    }
    let mut shape = su.to_vec();
    *shape.last_mut().unwrap() = m;
    Ok(Tensor::from_parts(shape, out))
}

/// `x · A[:, :k] · B[:k, :]`, the rank-`k` truncation of the update `AB`.
pub fn truncated_product(x: &Tensor, a: &Tensor, b: &Tensor, k: usize) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("truncated_product", a.shape(), b.shape()));
    }
    if k > a.shape()[1] {
        return Err(Error::OutOfRange {
            what: "truncation rank",
            detail: format!("k = {k} > r_max = {}", a.shape()[1]),
        });
    }
    let u = x.matmul(a)?;
    truncated_from_projection(&u, b, k)
}

/// Fractional-rank output `λ g_⌈r⌉ + (1 - λ) g_⌊r⌋`; exactly `g_r` for integral `r`.
pub fn fractional_forward(x: &Tensor, a: &Tensor, b: &Tensor, r: f64) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(Error::shape("fractional_forward", a.shape(), b.shape()));
    }
    let (floor, ceil, lambda) = rank_bracket(r, a.shape()[1])?;
    if floor == ceil {
        return truncated_product(x, a, b, floor);
    }
    let u = x.matmul(a)?;
    let gf = truncated_from_projection(&u, b, floor)?;
    let gc = truncated_from_projection(&u, b, ceil)?;
    gc.zip_map(&gf, |c, f| lambda * c + (1.0 - lambda) * f)
}

/// `γ · Σ (g_⌈r⌉ - g_⌊r⌋) ⊙ upstream`
pub fn rank_gradient(g_ceil: &Tensor, g_floor: &Tensor, upstream: &Tensor, gamma: f64) -> Result<f64> {
    if g_ceil.shape() != g_floor.shape() || g_ceil.shape() != upstream.shape() {
        return Err(Error::shape("rank_gradient", g_ceil.shape(), upstream.shape()));
    }
    let s: f64 = g_ceil
        .data()
        .iter()
        .zip(g_floor.data())
        .zip(upstream.data())
        .map(|((c, f), u)| (c - f) * u)
        .sum();
    Ok(gamma * s)
}

/// Router weights for one input `x [N x L]`: mean-pool tokens, project with
/// `gate_weight [L x E]`, softmax. Dense: every expert gets a weight.
pub fn router_gate(x: &Tensor, gate_weight: &Tensor) -> Result<Tensor> {
    let (sx, sg) = (x.shape(), gate_weight.shape());
    if sx.len() != 2 || sg.len() != 2 || sx[1] != sg[0] {
        return Err(Error::shape("router_gate", sx, sg));
    }
    let (n, l) = (sx[0], sx[1]);
    let mut pooled = vec![0.0; l];
    for row in x.data().chunks(l.max(1)) {
        pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v);
    }
    pooled.iter_mut().for_each(|p| *p /= n.max(1) as f64);
    let logits = Tensor::from_parts(vec![1, l], pooled).matmul(gate_weight)?;
    let probs = crate::graph::softmax_rows(logits.data(), sg[1]);
    Ok(Tensor::from_parts(vec![sg[1]], probs))
}

/// Plain single-expert LoRA at full rank: `x W + α x A B`.
pub fn lora_forward(x: &Tensor, w: &Tensor, a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    let base = x.matmul(w)?;
    let update = x.matmul(a)?.matmul(b)?;
    base.zip_map(&update, |p, q| p + alpha * q)
}

/// Target for the summed rank of all experts and the penalty weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankBudget {
    pub target: f64,
    pub beta: f64,
}

impl RankBudget {
    pub fn new(target: f64, beta: f64) -> Result<Self> {
        if !(target > 0.0) || !(beta >= 0.0) {
            return Err(Error::Config(format!(
                "rank budget needs C > 0 and beta >= 0 (got C = {target}, beta = {beta})"
            )));
        }
        Ok(RankBudget { target, beta })
    }
}

/// `β |C - Σ r_i|` and its gradient `β sign(Σ r_i - C)` for every rank
/// (0 exactly on the budget).
pub fn budget_loss(ranks: &[f64], budget: &RankBudget) -> Result<(f64, Vec<f64>)> {
    if ranks.is_empty() {
        return Err(Error::Contract("budget_loss on an empty rank list".into()));
    }
    let total: f64 = ranks.iter().sum();
    let diff = total - budget.target;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok((budget.beta * diff.abs(), vec![budget.beta * sign; ranks.len()]))
}

/// Graph form of [`budget_loss`] over bound rank leaves.
pub fn budget_term(ctx: &mut Ctx<'_>, ranks: &[ParamId], budget: &RankBudget) -> Result<Var> {
    let vars: Vec<Var> = ranks.iter().map(|&id| ctx.param(id)).collect();
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::Contract("budget_loss on an empty rank list".into()))?;
    let mut total = first;
    for &v in rest {
        total = ctx.graph.add(total, v)?;
    }
    let diff = ctx.graph.add_scalar(total, -budget.target);
    let abs = ctx.graph.abs(diff);
    Ok(ctx.graph.scale(abs, budget.beta))
}

/// Rounds half away from zero, then clamps into `[1, r_max]`.
pub fn round_rank(r: f64, r_max: usize) -> f64 {
    r.round().clamp(1.0, r_max as f64)
}

/// Rounds every rank in the store and freezes it. Returns `false` (and
/// changes nothing) if the ranks were already discretized.
pub fn discretize_ranks(store: &mut ParamStore) -> bool {
    let ids = store.rank_ids();
    if ids.iter().all(|&id| !store.get(id).trainable) {
        log::warn!("ranks already discretized; ignoring repeated request");
        return false;
    }
    for id in ids {
        let ParamKind::Rank { max } = store.get(id).kind else {
            unreachable!()
        };
        let r = round_rank(store.rank(id), max);
        store.value_mut(id).data_mut()[0] = r;
        store.set_trainable(id, false);
    }
    true
}

/// Clamps a rank after an optimizer step.
pub(crate) fn clamp_rank(store: &mut ParamStore, id: ParamId) {
    if let ParamKind::Rank { max } = store.get(id).kind {
        let v = &mut store.value_mut(id).data_mut()[0];
        *v = v.clamp(1.0, max as f64);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub max_rank: usize,
    pub init_rank: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            max_rank: 8,
            init_rank: 4.5,
            alpha: 1.0,
            gamma: 1.0,
        }
    }
}

/// Parameter handles of one expert.
#[derive(Clone, Debug)]
pub struct AdapterExpert {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: ParamId,
    pub max_rank: usize,
}

/// Frozen projection plus routed rank-adaptive experts.
#[derive(Clone, Debug)]
pub struct RaMoeLayer {
    pub name: String,
    /// `None` for adapter-only layers.
    pub base: Option<ParamId>,
    pub gate: ParamId,
    pub experts: Vec<AdapterExpert>,
    pub alpha: f64,
    pub gamma: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl RaMoeLayer {
    /// Registers a layer under `name`. `base` is the frozen weight
    /// `[in_dim x out_dim]`, if any. `A ~ N(0, 1/in_dim)`, `B = 0`, gate = 0.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        n_experts: usize,
        base: Option<Tensor>,
        cfg: &AdapterConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config(format!("{name}: at least one expert required")));
        }
        rank_bracket(cfg.init_rank, cfg.max_rank)?;
        let base = match base {
            Some(w) => {
                if w.shape() != [in_dim, out_dim] {
                    return Err(Error::shape("RaMoeLayer base", w.shape(), &[in_dim, out_dim]));
                }
                Some(store.add(format!("{name}.base"), w, ParamKind::Frozen)?)
            }
            None => None,
        };
        let gate = store.add(
            format!("{name}.gate"),
            Tensor::zeros([in_dim, n_experts]),
            ParamKind::Weight,
        )?;
        let std = (1.0 / in_dim as f64).sqrt();
        let experts = (0..n_experts)
            .map(|i| {
                let a = store.add(
                    format!("{name}.experts.{i}.a"),
                    rng::normal(rng, [in_dim, cfg.max_rank], std),
                    ParamKind::Weight,
                )?;
                let b = store.add(
                    format!("{name}.experts.{i}.b"),
                    Tensor::zeros([cfg.max_rank, out_dim]),
                    ParamKind::Weight,
                )?;
                let rank = store.add(
                    format!("{name}.experts.{i}.rank"),
                    Tensor::scalar(cfg.init_rank),
                    ParamKind::Rank { max: cfg.max_rank },
                )?;
                Ok(AdapterExpert {
                    a,
                    b,
                    rank,
                    max_rank: cfg.max_rank,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RaMoeLayer {
            name: name.to_string(),
            base,
            gate,
            experts,
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            in_dim,
            out_dim,
        })
    }

    pub fn rank_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.experts.iter().map(|e| e.rank)
    }

    /// Router probabilities `[B, E]` for `x [B, N, L]`.
    pub fn gate_weights(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        let pooled = ctx.graph.mean_axis(x, 1)?;
        let pooled = ctx.graph.reshape(pooled, [s[0], s[2]])?;
        let gate = ctx.param(self.gate);
        let logits = ctx.graph.matmul(pooled, gate)?;
        ctx.graph.softmax(logits)
    }

    /// `x W + α Σ_i G_i(x) f_r^(i)(x)` for `x [B, N, L]` or `[N, L]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        if s.len() == 2 {
            let x3 = ctx.graph.reshape(x, [1, s[0], s[1]])?;
            let y = self.forward(ctx, x3)?;
            return ctx.graph.reshape(y, [s[0], self.out_dim]);
        }
        if s.len() != 3 || s[2] != self.in_dim {
            return Err(Error::shape("ramoe_forward", &s, &[self.in_dim, self.out_dim]));
        }
        let base = match self.base {
            Some(w) => {
                let w = ctx.param(w);
                Some(ctx.graph.matmul(x, w)?)
            }
            None => None,
        };
        if !ctx.opts.adapters {
            return Ok(match base {
                Some(b) => b,
                None => ctx.graph.constant(Tensor::zeros([s[0], s[1], self.out_dim])),
            });
        }
        let gates = self.gate_weights(ctx, x)?;
        let mut mixed: Option<Var> = None;
        for (i, e) in self.experts.iter().enumerate() {
            let a = ctx.param(e.a);
            let b = ctx.param(e.b);
            let r = ctx.param(e.rank);
            let u = ctx.graph.matmul(x, a)?;
            let f = ctx.graph.frac_rank(u, b, r, self.gamma)?;
            let gi = ctx.graph.narrow(gates, 1, i, 1)?;
            let gi = ctx.graph.reshape(gi, [s[0], 1, 1])?;
            let term = ctx.graph.mul(f, gi)?;
            mixed = Some(match mixed {
                Some(acc) => ctx.graph.add(acc, term)?,
                None => term,
            });
        }
        let update = ctx.graph.scale(mixed.expect("at least one expert"), self.alpha);
        match base {
            Some(b) => ctx.graph.add(b, update),
            None => Ok(update),
        }
    }
}

/// Materialized `diag(1, .., 1, 0, .., 0)` with `k` ones; test oracle only.
pub fn selector_matrix(r_max: usize, k: usize) -> Tensor {
    let mut data = vec![0.0; r_max * r_max];
    for i in 0..k.min(r_max) {
        data[i * r_max + i] = 1.0;
    }
    Tensor::from_parts(vec![r_max, r_max], data)
}

/// `Σ_{i<k} (x a_i) b_i` computed one outer product at a time; test oracle only.
pub fn outer_product_sum(x: &Tensor, a: &Tensor, b: &Tensor, k: usize) -> Tensor {
    let (n, l_in) = (x.shape()[0], x.shape()[1]);
    let (r_max, m) = (b.shape()[0], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..k {
        let ai: Vec<f64> = (0..l_in).map(|p| a.data()[p * r_max + i]).collect();
        let bi = &b.data()[i * m..(i + 1) * m];
        for row in 0..n {
            let xa = kernels::dot(&x.data()[row * l_in..(row + 1) * l_in], &ai);
            for j in 0..m {
                out[row * m + j] += xa * bi[j];
            }
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ForwardOptions;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn lora_hand_example() {
        let x = t(&[&[1.0, 1.0]]);
        let w = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = t(&[&[1.0], &[0.0]]);
        let b = t(&[&[2.0, 0.0]]);
        let y = lora_forward(&x, &w, &a, &b, 1.0).unwrap();
        assert_eq!(y.data(), &[3.0, 1.0]);
        let y0 = lora_forward(&x, &w, &a, &b, 0.0).unwrap();
        assert_eq!(y0.data(), &[1.0, 1.0]);
        let zero_b = Tensor::zeros([1, 2]);
        assert_eq!(lora_forward(&x, &w, &a, &zero_b, 1.0).unwrap(), x.matmul(&w).unwrap());
    }

    #[test]
    fn truncation_examples() {
        let x = t(&[&[1.0, 1.0]]);
        let a = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(truncated_product(&x, &a, &b, 0).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(truncated_product(&x, &a, &b, 1).unwrap().data(), &[1.0, 2.0]);
        let full = x.matmul(&a).unwrap().matmul(&b).unwrap();
        assert_eq!(truncated_product(&x, &a, &b, 2).unwrap(), full);
        assert!(matches!(
            truncated_product(&x, &a, &b, 3),
            Err(Error::OutOfRange { .. })
        ));
    }

    // g_1 = [1, 2], g_2 = [4, 6] from x = [1, 1], A = I, B = [[1, 2], [3, 4]]
    #[test]
    fn fractional_examples() {
        let x = t(&[&[1.0, 1.0]]);
        let a = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(fractional_forward(&x, &a, &b, 1.5).unwrap().data(), &[2.5, 4.0]);
        assert_eq!(fractional_forward(&x, &a, &b, 1.25).unwrap().data(), &[1.75, 3.0]);
        assert_eq!(
            fractional_forward(&x, &a, &b, 2.0).unwrap(),
            truncated_product(&x, &a, &b, 2).unwrap()
        );
        assert!(fractional_forward(&x, &a, &b, 0.5).is_err());
        assert!(fractional_forward(&x, &a, &b, 2.5).is_err());
    }

    #[test]
    fn rank_gradient_examples() {
        let gc = t(&[&[4.0, 6.0]]);
        let gf = t(&[&[1.0, 2.0]]);
        let up = t(&[&[1.0, 1.0]]);
        assert_eq!(rank_gradient(&gc, &gf, &up, 1.0).unwrap(), 7.0);
        assert_eq!(rank_gradient(&gc, &gc, &up, 1.0).unwrap(), 0.0);
        assert_eq!(rank_gradient(&gc, &gf, &up, 0.5).unwrap(), 3.5);
        assert!(rank_gradient(&gc, &t(&[&[1.0]]), &up, 1.0).is_err());
    }

    #[test]
    fn router_examples() {
        let x = t(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let g = router_gate(&x, &Tensor::zeros([2, 3])).unwrap();
        for &p in g.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(router_gate(&x, &Tensor::zeros([2, 1])).unwrap().data(), &[1.0]);
        // pooled x = [1, 0]; logits = [ln 2, 0]
        let x = t(&[&[1.0, 0.0]]);
        let gw = t(&[&[2f64.ln(), 0.0], &[0.0, 0.0]]);
        let g = router_gate(&x, &gw).unwrap();
        assert!((g.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn budget_examples() {
        let b = RankBudget::new(48.0, 1.0).unwrap();
        let (v, _) = budget_loss(&[25.0, 25.0], &b).unwrap();
        assert_eq!(v, 2.0);
        let (v, g) = budget_loss(&[24.0, 24.0], &b).unwrap();
        assert_eq!((v, g), (0.0, vec![0.0, 0.0]));
        let b2 = RankBudget::new(48.0, 2.0).unwrap();
        let (v, g) = budget_loss(&[15.0, 15.0, 15.0], &b2).unwrap();
        assert_eq!(v, 6.0);
        assert_eq!(g, vec![-2.0; 3]);
        assert!(budget_loss(&[], &b).is_err());
        assert!(RankBudget::new(0.0, 1.0).is_err());
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_rank(4.5, 8), 5.0);
        assert_eq!(round_rank(4.3, 8), 4.0);
        assert_eq!(round_rank(0.6, 8), 1.0);
        assert_eq!(round_rank(8.4, 8), 8.0);
    }

    #[test]
    fn two_expert_mixture_by_hand() {
        // W = 0, alpha = 1, gate logits equal, expert outputs [2, 0] and [0, 2]
        let mut store = ParamStore::new();
        let cfg = AdapterConfig {
            max_rank: 1,
            init_rank: 1.0,
            alpha: 1.0,
            gamma: 1.0,
        };
        let layer = RaMoeLayer::new(
            &mut store,
            "l",
            2,
            2,
            2,
            Some(Tensor::zeros([2, 2])),
            &cfg,
            &mut rng::rng(0),
        )
        .unwrap();
        let e0 = &layer.experts[0];
        let e1 = &layer.experts[1];
        store.set_value(e0.a, t(&[&[1.0], &[1.0]])).unwrap();
        store.set_value(e0.b, t(&[&[1.0, 0.0]])).unwrap();
        store.set_value(e1.a, t(&[&[1.0], &[1.0]])).unwrap();
        store.set_value(e1.b, t(&[&[0.0, 1.0]])).unwrap();
        let mut ctx = Ctx::new(&store, ForwardOptions::default());
        let x = ctx.graph.constant(t(&[&[1.0, 1.0]]));
        let y = layer.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.graph.value(y).data(), &[1.0, 1.0]);
    }

    #[test]
    fn discretize_is_idempotent() {
        let mut store = ParamStore::new();
        let cfg = AdapterConfig::default();
        RaMoeLayer::new(&mut store, "l", 4, 4, 2, None, &cfg, &mut rng::rng(0)).unwrap();
        let id = store.rank_ids()[1];
        store.set_value(id, Tensor::scalar(0.6)).unwrap();
        assert!(discretize_ranks(&mut store));
        assert_eq!(store.ranks(), vec![5.0, 1.0]);
        assert!(store.rank_ids().iter().all(|&id| !store.get(id).trainable));
        assert!(!discretize_ranks(&mut store));
        assert_eq!(store.ranks(), vec![5.0, 1.0]);
    }
}
