//! Central-difference gradient oracle.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient returned by `f` against central
/// differences `(f(p + ε) - f(p - ε)) / 2ε` coordinate by coordinate and
/// returns the largest relative error.
///
/// `f` maps a flat parameter vector to `(value, analytic gradient)`. It is
/// evaluated twice at `params` first; differing values mean `f` is not
/// deterministic and the oracle refuses to answer.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (v0, grad) = f(params)?;
    let (v1, _) = f(params)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {v0} vs {v1}"
        )));
    }
    if grad.len() != params.len() {
        return Err(Error::Oracle(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let (fp, _) = f(&p)?;
        p[i] = orig - eps;
        let (fm, _) = f(&p)?;
        p[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    Ok(worst)
}

/// Runs [`finite_diff_check`] on a graph-built scalar function of several
/// tensors. `build` receives one differentiable leaf per input tensor.
pub fn check_graph<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let eval = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let mut off = 0;
        let mut vars = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            let t = Tensor::from_parts(s.clone(), p[off..off + n].to_vec());
            vars.push(g.param(format!("in{i}"), t));
            off += n;
        }
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let mut flat_grad = Vec::with_capacity(p.len());
        for v in &vars {
            flat_grad.extend_from_slice(grads.wrt(&g, *v).data());
        }
        Ok((g.value(loss).item()?, flat_grad))
    };
    finite_diff_check(eval, &flat, eps)
}

/// Largest relative error of one operation over several random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpAudit {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Builder = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Builds `op`, then contracts its output with a fixed random tensor so every
/// output element carries a distinct weight.
fn weighted(build: Builder, seed: u64) -> impl Fn(&mut Graph, &[Var]) -> Result<Var> {
    move |g: &mut Graph, v: &[Var]| {
        let y = build(g, v)?;
        let shape = g.shape(y).to_vec();
        let w = rng::normal(&mut rng::rng(seed), shape, 1.0);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// Finite-difference audit of every differentiable graph operation.
pub fn audit_ops(instances: usize, seed: u64, eps: f64) -> Result<Vec<OpAudit>> {
    type Inputs = fn(&mut rng::Rng) -> Vec<Tensor>;
    let cases: Vec<(&'static str, Inputs, Builder)> = vec![
        ("matmul", |r| vec![rng::normal(r, [2, 3, 4], 1.0), rng::normal(r, [4, 5], 1.0)], |g, v| g.matmul(v[0], v[1])),
        ("bmm", |r| vec![rng::normal(r, [3, 2, 4], 1.0), rng::normal(r, [3, 4, 5], 1.0)], |g, v| g.bmm(v[0], v[1], false)),
        ("bmm_trans_b", |r| vec![rng::normal(r, [3, 2, 4], 1.0), rng::normal(r, [3, 5, 4], 1.0)], |g, v| g.bmm(v[0], v[1], true)),
        ("add_broadcast", |r| vec![rng::normal(r, [2, 3, 4], 1.0), rng::normal(r, [1, 3, 1], 1.0)], |g, v| g.add(v[0], v[1])),
        ("sub_broadcast", |r| vec![rng::normal(r, [2, 3, 4], 1.0), rng::normal(r, [2, 1, 4], 1.0)], |g, v| g.sub(v[0], v[1])),
        ("mul_broadcast", |r| vec![rng::normal(r, [2, 3, 4], 1.0), rng::normal(r, [1, 3, 4], 1.0)], |g, v| g.mul(v[0], v[1])),
        ("add_bias", |r| vec![rng::normal(r, [2, 3, 4], 1.0), rng::normal(r, [4], 1.0)], |g, v| g.add_bias(v[0], v[1])),
        ("scale", |r| vec![rng::normal(r, [3, 4], 1.0)], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", |r| vec![rng::normal(r, [3, 4], 1.0)], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        ("square", |r| vec![rng::normal(r, [3, 4], 1.0)], |g, v| Ok(g.square(v[0]))),
        ("abs", |r| vec![away_from_zero(rng::normal(r, [3, 4], 1.0))], |g, v| Ok(g.abs(v[0]))),
        ("sigmoid", |r| vec![rng::normal(r, [3, 4], 2.0)], |g, v| Ok(g.sigmoid(v[0]))),
        ("silu", |r| vec![rng::normal(r, [3, 4], 2.0)], |g, v| Ok(g.silu(v[0]))),
        ("gelu", |r| vec![rng::normal(r, [3, 4], 2.0)], |g, v| Ok(g.gelu(v[0]))),
        ("softmax", |r| vec![rng::normal(r, [2, 3, 5], 1.0)], |g, v| g.softmax(v[0])),
        ("layer_norm", |r| vec![rng::normal(r, [2, 3, 6], 1.0), rng::normal(r, [6], 1.0), rng::normal(r, [6], 1.0)], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
        ("group_norm", |r| vec![rng::normal(r, [2, 4, 3, 3], 1.0), rng::normal(r, [4], 1.0), rng::normal(r, [4], 1.0)], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5)),
        ("conv2d_same", |r| vec![rng::normal(r, [2, 2, 5, 5], 1.0), rng::normal(r, [3, 2, 3, 3], 0.5), rng::normal(r, [3], 1.0)], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, crate::graph::Padding::Same)),
        ("conv2d_stride2", |r| vec![rng::normal(r, [2, 2, 6, 6], 1.0), rng::normal(r, [3, 2, 3, 3], 0.5), rng::normal(r, [3], 1.0)], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, crate::graph::Padding::Same)),
        ("conv2d_pointwise", |r| vec![rng::normal(r, [2, 3, 4, 4], 1.0), rng::normal(r, [2, 3, 1, 1], 0.5), rng::normal(r, [2], 1.0)], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, crate::graph::Padding::Valid)),
        ("conv_transpose2d", |r| vec![rng::normal(r, [2, 3, 3, 3], 1.0), rng::normal(r, [3, 2, 3, 3], 0.5), rng::normal(r, [2], 1.0)], |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1)),
        ("reshape", |r| vec![rng::normal(r, [2, 3, 4], 1.0)], |g, v| g.reshape(v[0], [6, 4])),
        ("permute", |r| vec![rng::normal(r, [2, 3, 4], 1.0)], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("transpose", |r| vec![rng::normal(r, [2, 3, 4], 1.0)], |g, v| g.transpose(v[0])),
        ("narrow", |r| vec![rng::normal(r, [2, 5, 3], 1.0)], |g, v| g.narrow(v[0], 1, 1, 3)),
        ("sum", |r| vec![rng::normal(r, [3, 4], 1.0)], |g, v| Ok(g.sum(v[0]))),
        ("mean", |r| vec![rng::normal(r, [3, 4], 1.0)], |g, v| Ok(g.mean(v[0]))),
        ("mean_axis", |r| vec![rng::normal(r, [2, 3, 4], 1.0)], |g, v| g.mean_axis(v[0], 1)),
        (
            "frac_rank",
            |r| {
                use rand::Rng as _;
                let k: f64 = r.random_range(1.1..3.9);
                let k = if (k - k.round()).abs() < 0.05 { k + 0.1 } else { k };
                vec![rng::normal(r, [2, 3, 4], 1.0), rng::normal(r, [4, 5], 1.0), Tensor::scalar(k)]
            },
            |g, v| g.frac_rank(v[0], v[1], v[2], 1.0),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (ci, (op, inputs, build)) in cases.into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let s = crate::rng::derive_seed(&[seed, ci as u64, i as u64]);
            let xs = inputs(&mut rng::rng(s));
            worst = worst.max(check_graph(weighted(build, s ^ 1), &xs, eps)?);
        }
        out.push(OpAudit { op, instances, worst });
    }
    Ok(out)
}
