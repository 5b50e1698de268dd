//! Joint multi-task optimization, evaluation and run checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::adapters::{budget_loss, budget_term, discretize_ranks, RankBudget};
use crate::checkpoint::{CheckpointError, NamedTensors};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::graph::{Graph, Var};
use crate::metrics;
use crate::model::Model;
use crate::optim::{adamw_step, sgd_nesterov_step, OptimState, Phase, Schedule};
use crate::params::{Ctx, ForwardOptions, ParamId, ParamKind, ParamStore};
use crate::rng::{self, derive_seed};
use crate::tasks::{self, TaskSpec};
use crate::tensor::Tensor;

/// Mean squared error node.
pub fn mse_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// `mse + β |C - Σ r|` while ranks are searched, `mse` afterwards.
pub fn total_loss(ctx: &mut Ctx<'_>, mse: Var, ranks: &[ParamId], budget: &RankBudget, phase: Phase) -> Result<Var> {
    if phase == Phase::FrozenRank || budget.beta == 0.0 || ranks.is_empty() {
        return Ok(mse);
    }
    let b = budget_term(ctx, ranks, budget)?;
    ctx.graph.add(mse, b)
}

/// Metrics of one task on its full test split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluates `predict(task index, input batch)` on every test sample; PSNR
/// and SSIM are averaged per sample.
pub fn evaluate_with<F>(suite: &[TaskSpec], eval_batch: usize, mut predict: F) -> Result<Vec<TaskMetrics>>
where
    F: FnMut(usize, &Tensor, &Tensor) -> Result<Tensor>,
{
    let mut out = Vec::with_capacity(suite.len());
    for (ti, spec) in suite.iter().enumerate() {
        let (mut mse, mut psnr, mut ssim) = (0.0, 0.0, 0.0);
        let mut start = 0;
        while start < spec.n_test {
            let (input, target) = tasks::test_batch(spec, start, eval_batch)?;
            let pred = predict(ti, &input, &target)?;
            let per = spec.t_out * spec.frame_len();
            let n = target.numel() / per;
            for i in 0..n {
                let shape = [spec.t_out, spec.channels, spec.height, spec.width];
                let p = Tensor::new(shape, pred.data()[i * per..(i + 1) * per].to_vec())?;
                let t = Tensor::new(shape, target.data()[i * per..(i + 1) * per].to_vec())?;
                let m = metrics::mse(&p, &t)?;
                mse += m;
                psnr += metrics::psnr_from_mse(m, 1.0);
                ssim += metrics::ssim(&p, &t)?;
            }
            start += n;
        }
        let n = spec.n_test as f64;
        out.push(TaskMetrics {
            task: spec.id.clone(),
            mse: mse / n,
            psnr: psnr / n,
            ssim: ssim / n,
        });
    }
    Ok(out)
}

/// Repeats the last input frame `T_out` times.
pub fn persistence(spec: &TaskSpec, input: &Tensor) -> Result<Tensor> {
    let fl = spec.frame_len();
    let b = input.numel() / (spec.t_in * fl);
    let mut data = Vec::with_capacity(b * spec.t_out * fl);
    for i in 0..b {
        let last = &input.data()[((i + 1) * spec.t_in - 1) * fl..(i + 1) * spec.t_in * fl];
        for _ in 0..spec.t_out {
            data.extend_from_slice(last);
        }
    }
    Tensor::new([b * spec.t_out, spec.channels, spec.height, spec.width], data)
}

pub fn evaluate(model: &Model, suite: &[TaskSpec], eval_batch: usize) -> Result<Vec<TaskMetrics>> {
    evaluate_with(suite, eval_batch, |ti, input, _| {
        model.predict(&suite[ti].id, input, ForwardOptions::default())
    })
}

pub fn evaluate_persistence(suite: &[TaskSpec], eval_batch: usize) -> Result<Vec<TaskMetrics>> {
    evaluate_with(suite, eval_batch, |ti, input, _| persistence(&suite[ti], input))
}

/// One report row: a task's metrics after an epoch (epoch 0 is the
/// untrained model).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub task: String,
    /// Mean training loss over the epoch; `None` for epoch 0.
    pub train_mse: Option<f64>,
    pub test: TaskMetrics,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub rank_sum: f64,
    pub phase: Phase,
    pub layer_ranks: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub layers: Vec<String>,
    pub rows: Vec<EpochRecord>,
    /// `(step, Σr)` after every optimizer step.
    pub rank_trace: Vec<(u64, f64)>,
}

impl TrainReport {
    /// Rows of the last recorded epoch.
    pub fn final_rows(&self) -> Vec<&EpochRecord> {
        let last = self.rows.last().map(|r| r.epoch);
        self.rows.iter().filter(|r| Some(r.epoch) == last).collect()
    }

    /// Tab-separated table, one row per (epoch, task). Floats use the
    /// shortest representation that round-trips.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "epoch\ttask\ttrain_mse\ttest_mse\tpsnr\tssim\tbaseline_psnr\tbaseline_ssim\trank_sum\tphase",
        );
        for l in &self.layers {
            write!(s, "\trank:{l}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            let train = r.train_mse.map_or_else(|| "-".to_string(), |v| format!("{v:?}"));
            write!(
                s,
                "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
                r.epoch,
                r.task,
                train,
                r.test.mse,
                r.test.psnr,
                r.test.ssim,
                r.baseline_psnr,
                r.baseline_ssim,
                r.rank_sum,
                phase_name(r.phase)
            )
            .unwrap();
            for v in &r.layer_ranks {
                write!(s, "\t{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// `step, Σr` trajectory followed by the per-layer mean ranks of each
    /// epoch.
    pub fn rank_tsv(&self) -> String {
        let mut s = String::from("epoch");
        for l in &self.layers {
            write!(s, "\t{l}").unwrap();
        }
        s.push('\n');
        let mut last = None;
        for r in &self.rows {
            if last == Some(r.epoch) {
                continue;
            }
            last = Some(r.epoch);
            write!(s, "{}", r.epoch).unwrap();
            for v in &r.layer_ranks {
                write!(s, "\t{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn rank_trace_tsv(&self) -> String {
        let mut s = String::from("step\trank_sum\n");
        for (step, v) in &self.rank_trace {
            writeln!(s, "{step}\t{v:?}").unwrap();
        }
        s
    }
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::RankSearch => "rank_search",
        Phase::FrozenRank => "frozen_rank",
    }
}

pub fn build_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(&cfg.backbone_config(), &cfg.heads(), cfg.seed)
}

/// Epoch count after which ranks are rounded and frozen.
fn rank_boundary(cfg: &RunConfig) -> u64 {
    if cfg.searches_ranks() {
        cfg.train.rank_epochs as u64
    } else {
        0
    }
}

fn freeze_ranks(model: &mut Model, state: &mut OptimState) {
    discretize_ranks(&mut model.store);
    state.phase = Phase::FrozenRank;
}

/// Trains `model` from `state.epoch` up to `cfg.train.epochs`.
pub fn fit(model: &mut Model, state: &mut OptimState, cfg: &RunConfig) -> Result<TrainReport> {
    fit_until(model, state, cfg, cfg.train.epochs as u64)
}

/// Like [`fit`] but stops once `until` epochs are complete. The schedule
/// still spans `cfg.train.epochs`, so a run split at any epoch and resumed
/// from a checkpoint replays the uninterrupted run exactly.
pub fn fit_until(model: &mut Model, state: &mut OptimState, cfg: &RunConfig, until: u64) -> Result<TrainReport> {
    let suite = cfg.suite();
    if suite.is_empty() {
        return Err(Error::Contract("fit: empty task suite".into()));
    }
    let tr = &cfg.train;
    let budget = cfg.budget()?;
    let spe = tasks::steps_per_epoch(&suite, tr.batch_size) as u64;
    let schedule = Schedule {
        base: tr.lr_weights,
        warmup: tr.warmup_epochs as u64 * spe,
        total: tr.epochs as u64 * spe,
    };
    let boundary = rank_boundary(cfg);
    let rank_ids = model.rank_ids();
    let baseline = evaluate_persistence(&suite, tr.eval_batch)?;
    let mut report = TrainReport {
        layers: model.layer_mean_ranks().into_iter().map(|(n, _)| n).collect(),
        ..TrainReport::default()
    };
    let record = |model: &Model, report: &mut TrainReport, epoch: u64, phase: Phase, train: Option<&[f64]>| {
        let test = evaluate(model, &suite, tr.eval_batch)?;
        let layer_ranks: Vec<f64> = model.layer_mean_ranks().into_iter().map(|(_, v)| v).collect();
        for (i, (m, b)) in test.into_iter().zip(&baseline).enumerate() {
            log::info!(
                "epoch {epoch} {}: test mse {:.3e} psnr {:.2} (baseline {:.2}) ssim {:.3} rank sum {:.2}",
                m.task,
                m.mse,
                m.psnr,
                b.psnr,
                m.ssim,
                model.rank_sum()
            );
            report.rows.push(EpochRecord {
                epoch,
                task: m.task.clone(),
                train_mse: train.map(|t| t[i]),
                test: m,
                baseline_psnr: b.psnr,
                baseline_ssim: b.ssim,
                rank_sum: model.rank_sum(),
                phase,
                layer_ranks: layer_ranks.clone(),
            });
        }
        Result::<()>::Ok(())
    };

    if state.epoch == 0 {
        if boundary == 0 && state.phase == Phase::RankSearch {
            freeze_ranks(model, state);
        }
        record(model, &mut report, 0, state.phase, None)?;
    }
    while state.epoch < until.min(tr.epochs as u64) {
        let mut sums = vec![0.0; suite.len()];
        let mut counts = vec![0usize; suite.len()];
        for _ in 0..spe {
            let batch = tasks::make_batch(&suite, tr.batch_size, state.step as usize, cfg.seed)?;
            let task = &suite[batch.task].id;
            let diverged = |e: Error| match e {
                Error::NonFinite(_) => Error::Diverged {
                    task: task.clone(),
                    step: state.step,
                },
                e => e,
            };
            let mut ctx = Ctx::new(&model.store, ForwardOptions::default());
            let x = ctx.graph.constant(batch.input);
            let y = model.forward(&mut ctx, task, x).map_err(diverged)?;
            let t = ctx.graph.constant(batch.target);
            let mse = mse_loss(&mut ctx.graph, y, t).map_err(diverged)?;
            let loss = total_loss(&mut ctx, mse, &rank_ids, &budget, state.phase).map_err(diverged)?;
            let lv = ctx.graph.value(loss).item()?;
            if !lv.is_finite() {
                return Err(diverged(Error::NonFinite(format!("loss {lv}"))));
            }
            sums[batch.task] += ctx.graph.value(mse).item()?;
            counts[batch.task] += 1;
            let grads = ctx.graph.backward(loss).map_err(diverged)?;
            let pg = ctx.param_grads(&grads);
            drop(ctx);
            adamw_step(&mut model.store, &pg, state, schedule.lr(state.step), tr.weight_decay)?;
            if state.phase == Phase::RankSearch {
                sgd_nesterov_step(&mut model.store, &pg, state, tr.lr_ranks);
            }
            state.step += 1;
            report.rank_trace.push((state.step, model.rank_sum()));
        }
        state.epoch += 1;
        if state.epoch == boundary && state.phase == Phase::RankSearch {
            freeze_ranks(model, state);
        }
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect();
        record(model, &mut report, state.epoch, state.phase, Some(&means))?;
    }
    Ok(report)
}

/// Pure rank dynamics under the budget term alone: Nesterov steps on
/// `β |C - Σ r|`. Returns Σr after each step.
pub fn budget_descent(initial: &[f64], r_max: usize, budget: &RankBudget, lr: f64, steps: usize) -> Result<Vec<f64>> {
    let mut store = ParamStore::new();
    let ids = initial
        .iter()
        .enumerate()
        .map(|(i, &r)| store.add(format!("r{i}"), Tensor::scalar(r), ParamKind::Rank { max: r_max }))
        .collect::<Result<Vec<_>>>()?;
    let mut state = OptimState::new(&store);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (_, g) = budget_loss(&store.ranks(), budget)?;
        let grads: Vec<(ParamId, Tensor)> = ids.iter().zip(g).map(|(&id, v)| (id, Tensor::scalar(v))).collect();
        sgd_nesterov_step(&mut store, &grads, &mut state, lr);
        trace.push(store.ranks().iter().sum());
    }
    Ok(trace)
}

// ---- whole-model gradient audit ---------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub param: String,
    pub index: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    pub worst: f64,
}

/// Moves every zero-initialized trainable tensor off zero and every rank
/// to a non-integer value so that all gradient paths are exercised.
fn activate(model: &mut Model, seed: u64) -> Result<()> {
    let mut r = rng::rng(derive_seed(&[seed, 0xac71]));
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let p = model.store.get(id);
        if !p.trainable {
            continue;
        }
        match p.kind {
            ParamKind::Rank { max } => {
                let v = r.random_range(1.2..(max as f64 - 0.2));
                let v = if (v - v.round()).abs() < 0.1 { v + 0.25 } else { v };
                model.store.set_value(id, Tensor::scalar(v))?;
            }
            ParamKind::Weight => {
                let shape = p.value.shape().to_vec();
                if p.value.data().iter().all(|&v| v == 0.0) {
                    model.store.set_value(id, rng::normal(&mut r, shape, 0.1))?;
                }
            }
            ParamKind::Frozen => {}
        }
    }
    Ok(())
}

/// Central-difference audit of `n_params` randomly chosen trainable
/// scalars, at least `n_ranks` of them ranks, under the full training loss
/// (summed squared error over one sample per task plus the budget term).
pub fn audit_model(cfg: &RunConfig, n_params: usize, n_ranks: usize, eps: f64) -> Result<AuditReport> {
    let mut model = build_model(cfg)?;
    activate(&mut model, cfg.seed)?;
    let suite = cfg.suite();
    let budget = cfg.budget()?;
    let batches = suite
        .iter()
        .map(|s| tasks::stack(&[tasks::generate(s, 0)?]))
        .collect::<Result<Vec<_>>>()?;

    let mut r = rng::rng(derive_seed(&[cfg.seed, 0xa0d17]));
    let ranks = model.rank_ids();
    let weights: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable && p.kind == ParamKind::Weight)
        .map(|(id, _)| id)
        .collect();
    let mut picks: Vec<(ParamId, usize)> = Vec::with_capacity(n_params);
    while picks.len() < n_params.min(n_ranks).min(ranks.len()) {
        let id = ranks[r.random_range(0..ranks.len())];
        if !picks.iter().any(|p| p.0 == id) {
            picks.push((id, 0));
        }
    }
    while picks.len() < n_params {
        let id = weights[r.random_range(0..weights.len())];
        let idx = r.random_range(0..model.store.value(id).numel());
        if !picks.contains(&(id, idx)) {
            picks.push((id, idx));
        }
    }

    let start: Vec<f64> = picks.iter().map(|&(id, i)| model.store.value(id).data()[i]).collect();
    let mut per_coord: Vec<(f64, f64)> = Vec::new();
    let eval = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = model.clone();
        for (&(id, i), &v) in picks.iter().zip(p) {
            m.store.value_mut(id).data_mut()[i] = v;
        }
        let mut ctx = Ctx::new(&m.store, ForwardOptions::default());
        let mut loss = budget_term(&mut ctx, &ranks, &budget)?;
        for (spec, (input, target)) in suite.iter().zip(&batches) {
            let x = ctx.graph.constant(input.clone());
            let y = m.forward(&mut ctx, &spec.id, x)?;
            let t = ctx.graph.constant(target.clone());
            let d = ctx.graph.sub(y, t)?;
            let sq = ctx.graph.square(d);
            let sse = ctx.graph.sum(sq);
            loss = ctx.graph.add(loss, sse)?;
        }
        let grads = ctx.graph.backward(loss)?;
        let g: Vec<f64> = picks
            .iter()
            .map(|&(id, i)| {
                ctx.bound(id)
                    .and_then(|v| grads.get(v))
                    .map_or(0.0, |t| t.data()[i])
            })
            .collect();
        Ok((ctx.graph.value(loss).item()?, g))
    };
    let (_, analytic) = eval(&start)?;
    let mut p = start.clone();
    for i in 0..p.len() {
        p[i] = start[i] + eps;
        let (fp, _) = eval(&p)?;
        p[i] = start[i] - eps;
        let (fm, _) = eval(&p)?;
        p[i] = start[i];
        per_coord.push((analytic[i], (fp - fm) / (2.0 * eps)));
    }
    let entries = picks
        .iter()
        .zip(&per_coord)
        .map(|(&(id, index), &(a, n))| AuditEntry {
            param: model.store.get(id).name.clone(),
            index,
            rel_error: relative_error(a, n),
        })
        .collect::<Vec<AuditEntry>>();
    let worst = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(AuditReport { entries, worst })
}

// ---- run checkpoints ---------------------------------------------------

/// Serializes parameters, optimizer moments and run counters.
pub fn run_checkpoint(model: &Model, state: &OptimState) -> NamedTensors {
    let mut nt = NamedTensors::default();
    for (id, p) in model.store.iter() {
        if matches!(p.kind, ParamKind::Rank { .. }) {
            nt.scalars.push((format!("rank.{}", p.name), p.value.data()[0]));
            if let Some(v) = state.velocity[id.index()] {
                nt.scalars.push((format!("velocity.{}", p.name), v));
            }
            continue;
        }
        nt.tensors.push((format!("param.{}", p.name), p.value.clone()));
        if let Some(m) = &state.adam_m[id.index()] {
            nt.tensors.push((format!("adam_m.{}", p.name), m.clone()));
        }
        if let Some(v) = &state.adam_v[id.index()] {
            nt.tensors.push((format!("adam_v.{}", p.name), v.clone()));
        }
    }
    nt.scalars.push(("epoch".into(), state.epoch as f64));
    nt.scalars.push(("step".into(), state.step as f64));
    nt.scalars.push(("adam_t".into(), state.adam_t as f64));
    nt.scalars.push(("phase".into(), state.phase.code()));
    nt
}

/// Restores a checkpoint into a model built from the same configuration.
/// Nothing is modified unless the whole checkpoint matches.
pub fn restore_checkpoint(model: &mut Model, nt: &NamedTensors) -> Result<OptimState> {
    let mismatch = |m: String| Error::Checkpoint(CheckpointError::Mismatch(m));
    let scalar = |k: &str| nt.scalar(k).ok_or_else(|| mismatch(format!("missing scalar `{k}`")));
    let mut store = model.store.clone();
    let mut state = OptimState::new(&store);
    let mut used_tensors = 0;
    let mut used_scalars = 0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        if matches!(store.get(id).kind, ParamKind::Rank { .. }) {
            store.set_value(id, Tensor::scalar(scalar(&format!("rank.{name}"))?))?;
            used_scalars += 1;
            if let Some(v) = nt.scalar(&format!("velocity.{name}")) {
                state.velocity[id.index()] = Some(v);
                used_scalars += 1;
            }
            continue;
        }
        let t = nt
            .tensor(&format!("param.{name}"))
            .ok_or_else(|| mismatch(format!("missing tensor `param.{name}`")))?;
        if t.shape() != store.value(id).shape() {
            return Err(mismatch(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        store.set_value(id, t.clone())?;
        used_tensors += 1;
        for (prefix, slot) in [("adam_m", &mut state.adam_m), ("adam_v", &mut state.adam_v)] {
            if let Some(m) = nt.tensor(&format!("{prefix}.{name}")) {
                if m.shape() != t.shape() {
                    return Err(mismatch(format!("`{prefix}.{name}` has the wrong shape")));
                }
                slot[id.index()] = Some(m.clone());
                used_tensors += 1;
            }
        }
    }
    let count = |k: &str| -> Result<u64> {
        let v = scalar(k)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(mismatch(format!("scalar `{k}` = {v} is not a count")));
        }
        Ok(v as u64)
    };
    state.epoch = count("epoch")?;
    state.step = count("step")?;
    state.adam_t = count("adam_t")?;
    state.phase = Phase::from_code(scalar("phase")?)?;
    used_scalars += 4;
    if used_tensors != nt.tensors.len() || used_scalars != nt.scalars.len() {
        return Err(mismatch("checkpoint holds entries the model does not have".into()));
    }
    if state.phase == Phase::FrozenRank {
        for id in store.rank_ids() {
            store.set_trainable(id, false);
        }
    }
    model.store = store;
    Ok(state)
}

pub fn save_run(path: &Path, model: &Model, state: &OptimState) -> Result<()> {
    run_checkpoint(model, state).save(path)?;
    Ok(())
}

pub fn load_run(path: &Path, model: &mut Model) -> Result<OptimState> {
    let nt = NamedTensors::load(path)?;
    restore_checkpoint(model, &nt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderSection, TaskEntry};
    use crate::tasks::Generator;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.backbone.dim = 16;
        c.backbone.heads = 2;
        c.backbone.depth = 1;
        c.backbone.experts_qkv = 2;
        c.encoder = EncoderSection {
            num_blocks: 1,
            hidden: 8,
            groups: 4,
        };
        c.tasks = [Generator::Diffusion, Generator::Advection]
            .into_iter()
            .map(|g| TaskEntry {
                spec: TaskSpec {
                    height: 8,
                    width: 8,
                    t_in: 2,
                    t_out: 2,
                    n_train: 8,
                    n_test: 4,
                    ..TaskSpec::desk(g)
                },
                encoder: None,
            })
            .collect();
        c.train.epochs = 2;
        c.train.rank_epochs = 1;
        c.train.batch_size = 4;
        c.train.eval_batch = 4;
        c
    }

    #[test]
    fn mse_and_total_loss() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::full([2, 2], 0.6));
        let t = g.constant(Tensor::full([2, 2], 0.5));
        let l = mse_loss(&mut g, p, t).unwrap();
        assert!((g.value(l).item().unwrap() - 0.01).abs() < 1e-15);

        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = (0..2)
            .map(|i| store.add(format!("r{i}"), Tensor::scalar(25.0), ParamKind::Rank { max: 30 }).unwrap())
            .collect();
        let mut ctx = Ctx::new(&store, ForwardOptions::default());
        let m = ctx.graph.constant(Tensor::scalar(0.5));
        let b = RankBudget::new(48.0, 1.0).unwrap();
        let l = total_loss(&mut ctx, m, &ids, &b, Phase::RankSearch).unwrap();
        assert_eq!(ctx.graph.value(l).item().unwrap(), 2.5);
        let l = total_loss(&mut ctx, m, &ids, &RankBudget::new(48.0, 0.0).unwrap(), Phase::RankSearch).unwrap();
        assert_eq!(ctx.graph.value(l).item().unwrap(), 0.5);
    }

    #[test]
    fn zero_epochs_reports_initial_eval_only() {
        let mut c = tiny();
        c.train.epochs = 0;
        c.train.rank_epochs = 0;
        let mut m = build_model(&c).unwrap();
        let mut st = OptimState::new(&m.store);
        let r = fit(&mut m, &mut st, &c).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.epoch == 0 && row.train_mse.is_none()));
    }

    #[test]
    fn fit_freezes_backbone_and_discretizes() {
        let c = tiny();
        let mut m = build_model(&c).unwrap();
        let frozen: Vec<(ParamId, Tensor)> = m.frozen_ids().into_iter().map(|id| (id, m.store.value(id).clone())).collect();
        let mut st = OptimState::new(&m.store);
        let r = fit(&mut m, &mut st, &c).unwrap();
        for (id, t) in frozen {
            assert_eq!(m.store.value(id), &t);
        }
        assert_eq!(st.phase, Phase::FrozenRank);
        for v in m.store.ranks() {
            assert_eq!(v.fract(), 0.0);
        }
        let e1: Vec<f64> = r.rows.iter().filter(|x| x.epoch == 1).map(|x| x.rank_sum).collect();
        let e2: Vec<f64> = r.rows.iter().filter(|x| x.epoch == 2).map(|x| x.rank_sum).collect();
        assert_eq!(e1, e2);
        assert_eq!(r.rows.len(), 6);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let c = tiny();
        let mut m = build_model(&c).unwrap();
        let mut st = OptimState::new(&m.store);
        fit(&mut m, &mut st, &c).unwrap();
        let bytes = run_checkpoint(&m, &st).encode();
        let mut m2 = build_model(&c).unwrap();
        let st2 = restore_checkpoint(&mut m2, &NamedTensors::decode(&bytes).unwrap()).unwrap();
        assert_eq!(st2, st);
        assert_eq!(run_checkpoint(&m2, &st2).encode(), bytes);
        assert!(m2.store.rank_ids().iter().all(|&id| !m2.store.get(id).trainable));
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let spec = TaskSpec {
            t_in: 2,
            t_out: 3,
            height: 2,
            width: 2,
            ..TaskSpec::desk(Generator::Advection)
        };
        let x = Tensor::new([2, 1, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = persistence(&spec, &x).unwrap();
        assert_eq!(p.shape(), &[3, 1, 2, 2]);
        assert!(p.data().chunks(4).all(|f| f == [1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn oracle_predictor_is_perfect() {
        let c = tiny();
        let m = evaluate_with(&c.suite(), 3, |_, _, t| Ok(t.clone())).unwrap();
        for t in m {
            assert_eq!(t.psnr, metrics::PSNR_CAP);
            assert!((t.ssim - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn budget_only_descent_moves_toward_target() {
        let b = RankBudget::new(48.0, 1.0).unwrap();
        let trace = budget_descent(&[4.5; 12], 8, &b, 0.05, 200).unwrap();
        // strictly decreasing until the first crossing of C
        let cross = trace.iter().position(|&s| s <= 48.0).unwrap();
        let mut prev = 54.0;
        for &s in &trace[..=cross] {
            assert!(s < prev);
            prev = s;
        }
        assert!(trace.iter().any(|s| (s - 48.0).abs() < 0.5));
    }
}
