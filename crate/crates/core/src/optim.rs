//! AdamW for weights, Nesterov SGD for ranks, and the learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::adapters::clamp_rank;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const RANK_MOMENTUM: f64 = 0.9;
/// Learning rate at the first warm-up step.
pub const WARMUP_START_LR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    RankSearch,
    FrozenRank,
}

impl Phase {
    pub fn code(self) -> f64 {
        match self {
            Phase::RankSearch => 0.0,
            Phase::FrozenRank => 1.0,
        }
    }

    pub fn from_code(c: f64) -> Result<Self> {
        match c {
            0.0 => Ok(Phase::RankSearch),
            1.0 => Ok(Phase::FrozenRank),
            _ => Err(Error::OutOfRange {
                what: "phase code",
                detail: c.to_string(),
            }),
        }
    }
}

/// Everything the optimizers carry between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// First and second AdamW moments, indexed by parameter id.
    pub adam_m: Vec<Option<Tensor>>,
    pub adam_v: Vec<Option<Tensor>>,
    /// Number of AdamW updates applied.
    pub adam_t: u64,
    /// Nesterov velocity per rank parameter.
    pub velocity: Vec<Option<f64>>,
    pub step: u64,
    pub epoch: u64,
    pub phase: Phase,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        OptimState {
            adam_m: vec![None; store.len()],
            adam_v: vec![None; store.len()],
            adam_t: 0,
            velocity: vec![None; store.len()],
            step: 0,
            epoch: 0,
            phase: Phase::RankSearch,
        }
    }
}

/// One decoupled-weight-decay Adam update of every `Weight` parameter in
/// `grads`.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.adam_t += 1;
    let t = state.adam_t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (id, g) in grads {
        if store.get(*id).kind != ParamKind::Weight || !store.get(*id).trainable {
            continue;
        }
        let p = store.value_mut(*id);
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        let i = id.index();
        let m = state.adam_m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.adam_v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *pv -= lr * weight_decay * *pv;
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Nesterov momentum step on every trainable rank in `grads`, each rank
/// clamped into `[1, r_max]` afterwards.
///
/// `v <- μ v + g`, `r <- r - lr (g + μ v)`.
pub fn sgd_nesterov_step(store: &mut ParamStore, grads: &[(ParamId, Tensor)], state: &mut OptimState, lr: f64) {
    for (id, g) in grads {
        if !matches!(store.get(*id).kind, ParamKind::Rank { .. }) || !store.get(*id).trainable {
            continue;
        }
        let g = g.data()[0];
        let v = state.velocity[id.index()].get_or_insert(0.0);
        *v = RANK_MOMENTUM * *v + g;
        let update = g + RANK_MOMENTUM * *v;
        store.value_mut(*id).data_mut()[0] -= lr * update;
        clamp_rank(store, *id);
    }
}

/// Linear warm-up from [`WARMUP_START_LR`] to `base` over `warmup` steps,
/// then cosine decay to zero at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Schedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            let f = step as f64 / self.warmup as f64;
            return WARMUP_START_LR + (self.base - WARMUP_START_LR) * f;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let f = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (PI * f).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(kind: ParamKind, v: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", v, kind).unwrap();
        (s, id)
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let (mut s, id) = store_with(ParamKind::Weight, Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut st = OptimState::new(&s);
        let before = s.value(id).clone();
        adamw_step(&mut s, &[(id, Tensor::zeros([3]))], &mut st, 1e-3, 0.0).unwrap();
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let (mut s, id) = store_with(ParamKind::Weight, Tensor::zeros([3]));
        let mut st = OptimState::new(&s);
        let g = Tensor::new([3], vec![0.3, -2.0, 1e-2]).unwrap();
        adamw_step(&mut s, &[(id, g.clone())], &mut st, 1e-3, 0.0).unwrap();
        for (p, gv) in s.value(id).data().iter().zip(g.data()) {
            let want = -1e-3 * gv.signum() * gv.abs() / (gv.abs() + ADAM_EPS);
            assert!((p - want).abs() < 1e-15);
            assert!((p + 1e-3 * gv.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn nesterov_single_step() {
        let (mut s, id) = store_with(ParamKind::Rank { max: 8 }, Tensor::scalar(4.5));
        let mut st = OptimState::new(&s);
        sgd_nesterov_step(&mut s, &[(id, Tensor::scalar(1.0))], &mut st, 0.05);
        assert!((s.rank(id) - (4.5 - 0.095)).abs() < 1e-12);
        let (mut s, id) = store_with(ParamKind::Rank { max: 8 }, Tensor::scalar(4.5));
        let mut st = OptimState::new(&s);
        sgd_nesterov_step(&mut s, &[(id, Tensor::scalar(0.0))], &mut st, 0.05);
        assert_eq!(s.rank(id), 4.5);
    }

    #[test]
    fn rank_clamped_at_floor() {
        let (mut s, id) = store_with(ParamKind::Rank { max: 8 }, Tensor::scalar(1.0));
        let mut st = OptimState::new(&s);
        sgd_nesterov_step(&mut s, &[(id, Tensor::scalar(3.0))], &mut st, 0.05);
        assert_eq!(s.rank(id), 1.0);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            base: 7e-4,
            warmup: 10,
            total: 110,
        };
        assert_eq!(s.lr(0), 1e-8);
        assert!((s.lr(5) - (1e-8 + (7e-4 - 1e-8) * 0.5)).abs() < 1e-18);
        assert_eq!(s.lr(10), 7e-4);
        assert!((s.lr(60) - 3.5e-4).abs() < 1e-15);
        assert!(s.lr(109) < s.lr(100));
    }
}
