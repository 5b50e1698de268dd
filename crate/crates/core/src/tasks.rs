//! Synthetic spatiotemporal tasks with closed-form dynamics.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, hash_str, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Bouncing,
    Diffusion,
    Advection,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Bouncing => "bouncing",
            Generator::Diffusion => "diffusion",
            Generator::Advection => "advection",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub generator: Generator,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default = "sixteen")]
    pub height: usize,
    #[serde(default = "sixteen")]
    pub width: usize,
    #[serde(default = "four")]
    pub t_in: usize,
    #[serde(default = "four")]
    pub t_out: usize,
    #[serde(default = "n_train")]
    pub n_train: usize,
    #[serde(default = "n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn four() -> usize {
    4
}
fn sixteen() -> usize {
    16
}
fn n_train() -> usize {
    2000
}
fn n_test() -> usize {
    200
}

impl TaskSpec {
    /// 16x16 single-channel task with 4 input and 4 output frames.
    pub fn desk(generator: Generator) -> Self {
        TaskSpec {
            id: generator.name().to_string(),
            generator,
            channels: 1,
            height: 16,
            width: 16,
            t_in: 4,
            t_out: 4,
            n_train: n_train(),
            n_test: n_test(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_out == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "task {}: channels, height, width, t_in and t_out must be at least 1",
                self.id
            )));
        }
        if self.generator == Generator::Bouncing && square_size(self) > self.height.min(self.width) {
            return Err(Error::Generator(format!("task {}: square larger than frame", self.id)));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.t_in + self.t_out
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[T_in, C, H, W]`
    pub input: Tensor,
    /// `[T_out, C, H, W]`
    pub target: Tensor,
    pub task_id: String,
}

/// Global sample index: train samples are `0..n_train`, test samples follow.
pub fn sample_index(spec: &TaskSpec, split: Split, i: usize) -> usize {
    match split {
        Split::Train => i,
        Split::Test => spec.n_train + i,
    }
}

fn sample_rng(spec: &TaskSpec, index: usize) -> Rng {
    rng::rng(derive_seed(&[spec.seed, hash_str(&spec.id), index as u64]))
}

fn split_frames(spec: &TaskSpec, frames: Vec<f64>) -> Result<SequenceSample> {
    let fl = spec.frame_len();
    let (a, b) = frames.split_at(spec.t_in * fl);
    Ok(SequenceSample {
        input: Tensor::new([spec.t_in, spec.channels, spec.height, spec.width], a.to_vec())?,
        target: Tensor::new([spec.t_out, spec.channels, spec.height, spec.width], b.to_vec())?,
        task_id: spec.id.clone(),
    })
}

/// Copies a single-channel frame into every channel.
fn broadcast_channels(spec: &TaskSpec, frames: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames.len() * spec.frame_len());
    for f in frames {
        for _ in 0..spec.channels {
            out.extend_from_slice(f);
        }
    }
    out
}

pub fn generate(spec: &TaskSpec, index: usize) -> Result<SequenceSample> {
    match spec.generator {
        Generator::Bouncing => gen_bouncing(spec, index),
        Generator::Diffusion => gen_diffusion(spec, index),
        Generator::Advection => gen_advection(spec, index),
    }
}

// ---- bouncing squares --------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Square {
    pub y: i64,
    pub x: i64,
    pub vy: i64,
    pub vx: i64,
}

fn square_size(spec: &TaskSpec) -> usize {
    (spec.height.min(spec.width) / 4).max(1)
}

/// One elastic step of a coordinate in `[0, max]`.
pub fn bounce_step(p: i64, v: i64, max: i64) -> (i64, i64) {
    let mut p = p + v;
    let mut v = v;
    if max == 0 {
        return (0, v);
    }
    loop {
        if p < 0 {
            p = -p;
            v = -v;
        } else if p > max {
            p = 2 * max - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
}

/// Renders `frames` frames of squares of side `size` moving elastically.
pub fn bouncing_frames(h: usize, w: usize, size: usize, squares: &[Square], frames: usize) -> Result<Vec<Vec<f64>>> {
    if size > h || size > w {
        return Err(Error::Generator(format!("square of side {size} exceeds {h}x{w} frame")));
    }
    let (my, mx) = ((h - size) as i64, (w - size) as i64);
    let mut sq = squares.to_vec();
    for s in &sq {
        if !(0..=my).contains(&s.y) || !(0..=mx).contains(&s.x) {
            return Err(Error::Generator(format!("square {s:?} outside frame")));
        }
    }
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut f = vec![0.0; h * w];
        for s in &sq {
            for y in s.y as usize..s.y as usize + size {
                f[y * w + s.x as usize..y * w + s.x as usize + size].fill(1.0);
            }
        }
        out.push(f);
        for s in &mut sq {
            (s.y, s.vy) = bounce_step(s.y, s.vy, my);
            (s.x, s.vx) = bounce_step(s.x, s.vx, mx);
        }
    }
    Ok(out)
}

pub fn gen_bouncing(spec: &TaskSpec, index: usize) -> Result<SequenceSample> {
    spec.validate()?;
    let size = square_size(spec);
    let (my, mx) = ((spec.height - size) as i64, (spec.width - size) as i64);
    let mut r = sample_rng(spec, index);
    let squares: Vec<Square> = (0..2)
        .map(|_| Square {
            y: r.random_range(0..=my),
            x: r.random_range(0..=mx),
            vy: r.random_range(-2..=2),
            vx: r.random_range(-2..=2),
        })
        .collect();
    let frames = bouncing_frames(spec.height, spec.width, size, &squares, spec.frames())?;
    split_frames(spec, broadcast_channels(spec, &frames))
}

// ---- smooth periodic fields --------------------------------------------

/// Sum of a few random low-frequency Fourier modes, rescaled to `[0, 1]`.
fn smooth_field(r: &mut Rng, h: usize, w: usize) -> Vec<f64> {
    let modes: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let ky = r.random_range(0..=3) as f64;
            let kx = r.random_range(if ky == 0.0 { 1 } else { 0 }..=3) as f64;
            let amp = r.random_range(0.5..1.0);
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            (ky, kx, amp, phase)
        })
        .collect();
    let mut f: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            modes
                .iter()
                .map(|(ky, kx, a, p)| a * (std::f64::consts::TAU * (ky * y + kx * x) + p).sin())
                .sum()
        })
        .collect();
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut f {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
    }
    f
}

// ---- diffusion -----------------------------------------------------------

/// `ν·dt` per explicit step.
pub const DIFFUSION_NU_DT: f64 = 0.25;
/// Explicit steps between consecutive frames.
pub const DIFFUSION_SUBSTEPS: usize = 3;

/// One explicit 5-point heat step with periodic boundary.
pub fn heat_step(u: &[f64], h: usize, w: usize, nu_dt: f64) -> Result<Vec<f64>> {
    if !(0.0..=0.25).contains(&nu_dt) {
        return Err(Error::Generator(format!(
            "nu*dt = {nu_dt} violates the stability bound 0.25"
        )));
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let (yu, yd) = ((y + h - 1) % h, (y + 1) % h);
        for x in 0..w {
            let (xl, xr) = ((x + w - 1) % w, (x + 1) % w);
            let c = u[y * w + x];
            let lap = u[yu * w + x] + u[yd * w + x] + u[y * w + xl] + u[y * w + xr] - 4.0 * c;
            out[y * w + x] = c + nu_dt * lap;
        }
    }
    Ok(out)
}

pub fn diffusion_frames(
    init: Vec<f64>,
    h: usize,
    w: usize,
    nu_dt: f64,
    substeps: usize,
    frames: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(frames);
    let mut u = init;
    for _ in 0..frames {
        out.push(u.clone());
        for _ in 0..substeps {
            u = heat_step(&u, h, w, nu_dt)?;
        }
    }
    Ok(out)
}

pub fn gen_diffusion(spec: &TaskSpec, index: usize) -> Result<SequenceSample> {
    spec.validate()?;
    let mut r = sample_rng(spec, index);
    let init = smooth_field(&mut r, spec.height, spec.width);
    let frames = diffusion_frames(
        init,
        spec.height,
        spec.width,
        DIFFUSION_NU_DT,
        DIFFUSION_SUBSTEPS,
        spec.frames(),
    )?;
    split_frames(spec, broadcast_channels(spec, &frames))
}

// ---- advection ---------------------------------------------------------

/// `f` circularly shifted so that `out[y][x] = f[y - dy][x - dx]`.
pub fn shift(f: &[f64], h: usize, w: usize, dy: i64, dx: i64) -> Vec<f64> {
    let (h_i, w_i) = (h as i64, w as i64);
    (0..h * w)
        .map(|i| {
            let y = ((i / w) as i64 - dy).rem_euclid(h_i) as usize;
            let x = ((i % w) as i64 - dx).rem_euclid(w_i) as usize;
            f[y * w + x]
        })
        .collect()
}

/// Frames of `init` moving by `(vy, vx)` pixels per frame with wraparound.
pub fn advection_frames(init: &[f64], h: usize, w: usize, vy: i64, vx: i64, frames: usize) -> Vec<Vec<f64>> {
    (0..frames as i64)
        .map(|t| shift(init, h, w, t * vy, t * vx))
        .collect()
}

pub fn gen_advection(spec: &TaskSpec, index: usize) -> Result<SequenceSample> {
    spec.validate()?;
    let mut r = sample_rng(spec, index);
    let init = smooth_field(&mut r, spec.height, spec.width);
    let vy = r.random_range(-2..=2);
    let vx = r.random_range(-2..=2);
    let frames = advection_frames(&init, spec.height, spec.width, vy, vx, spec.frames());
    split_frames(spec, broadcast_channels(spec, &frames))
}

// ---- batching ------------------------------------------------------------

/// One optimization step's worth of samples from a single task.
#[derive(Clone, Debug)]
pub struct Batch {
    pub task: usize,
    pub indices: Vec<usize>,
    /// `[(B T_in), C, H, W]`
    pub input: Tensor,
    /// `[(B T_out), C, H, W]`
    pub target: Tensor,
}

/// Stacks samples along the leading axis.
pub fn stack(samples: &[SequenceSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty sample list".into()))?;
    let (si, st) = (first.input.shape().to_vec(), first.target.shape().to_vec());
    let mut inp = Vec::with_capacity(samples.len() * first.input.numel());
    let mut tgt = Vec::with_capacity(samples.len() * first.target.numel());
    for s in samples {
        inp.extend_from_slice(s.input.data());
        tgt.extend_from_slice(s.target.data());
    }
    let n = samples.len();
    Ok((
        Tensor::new([n * si[0], si[1], si[2], si[3]], inp)?,
        Tensor::new([n * st[0], st[1], st[2], st[3]], tgt)?,
    ))
}

/// Batches per task per epoch: enough to cover the largest training split.
pub fn batches_per_task(suite: &[TaskSpec], batch_size: usize) -> usize {
    suite
        .iter()
        .map(|t| t.n_train.div_ceil(batch_size.max(1)))
        .max()
        .unwrap_or(0)
}

pub fn steps_per_epoch(suite: &[TaskSpec], batch_size: usize) -> usize {
    suite.len() * batches_per_task(suite, batch_size)
}

/// Task and training indices for global step `step`. Tasks alternate
/// round-robin; each task walks a fresh permutation of its split per epoch.
pub fn batch_plan(suite: &[TaskSpec], batch_size: usize, step: usize, seed: u64) -> Result<(usize, Vec<usize>)> {
    if suite.is_empty() {
        return Err(Error::Contract("make_batch: empty task suite".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let per_epoch = steps_per_epoch(suite, batch_size);
    let (epoch, within) = (step / per_epoch, step % per_epoch);
    let task = within % suite.len();
    let k = within / suite.len();
    let spec = &suite[task];
    if spec.n_train == 0 {
        return Err(Error::Config(format!("task {}: empty training split", spec.id)));
    }
    let mut perm: Vec<usize> = (0..spec.n_train).collect();
    perm.shuffle(&mut rng::rng(derive_seed(&[seed, hash_str(&spec.id), epoch as u64])));
    let indices = (0..batch_size)
        .map(|j| perm[(k * batch_size + j) % spec.n_train])
        .collect();
    Ok((task, indices))
}

pub fn make_batch(suite: &[TaskSpec], batch_size: usize, step: usize, seed: u64) -> Result<Batch> {
    let (task, indices) = batch_plan(suite, batch_size, step, seed)?;
    let samples = indices
        .iter()
        .map(|&i| generate(&suite[task], sample_index(&suite[task], Split::Train, i)))
        .collect::<Result<Vec<_>>>()?;
    let (input, target) = stack(&samples)?;
    Ok(Batch {
        task,
        indices,
        input,
        target,
    })
}

/// Consecutive test samples `[start, start + len)` of one task.
pub fn test_batch(spec: &TaskSpec, start: usize, len: usize) -> Result<(Tensor, Tensor)> {
    let samples = (start..(start + len).min(spec.n_test))
        .map(|i| generate(spec, sample_index(spec, Split::Test, i)))
        .collect::<Result<Vec<_>>>()?;
    stack(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_squares_are_static() {
        let sq = [Square { y: 3, x: 5, vy: 0, vx: 0 }, Square { y: 8, x: 1, vy: 0, vx: 0 }];
        let f = bouncing_frames(16, 16, 4, &sq, 6).unwrap();
        assert!(f.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn wall_reflection() {
        assert_eq!(bounce_step(12, 1, 12), (11, -1));
        assert_eq!(bounce_step(0, -1, 12), (1, 1));
        assert_eq!(bounce_step(5, 2, 12), (7, 2));
        assert!(bouncing_frames(4, 4, 5, &[], 1).is_err());
    }

    #[test]
    fn samples_are_reproducible() {
        for g in [Generator::Bouncing, Generator::Diffusion, Generator::Advection] {
            let s = TaskSpec::desk(g);
            assert_eq!(generate(&s, 17).unwrap(), generate(&s, 17).unwrap());
            assert_ne!(generate(&s, 17).unwrap(), generate(&s, 18).unwrap());
            let x = generate(&s, 3).unwrap();
            assert!(x.input.data().iter().chain(x.target.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn uniform_field_is_steady() {
        let f = diffusion_frames(vec![0.3; 64], 8, 8, 0.25, 2, 5).unwrap();
        assert!(f.iter().all(|fr| fr.iter().all(|&v| v == 0.3)));
        assert!(heat_step(&[0.0; 4], 2, 2, 0.3).is_err());
    }

    #[test]
    fn diffusion_conserves_and_smooths() {
        let s = TaskSpec::desk(Generator::Diffusion);
        let x = gen_diffusion(&s, 4).unwrap();
        let all: Vec<f64> = x.input.data().iter().chain(x.target.data()).copied().collect();
        let frames: Vec<&[f64]> = all.chunks(256).collect();
        let sum0: f64 = frames[0].iter().sum();
        let mut prev_var = f64::INFINITY;
        for f in &frames {
            let s: f64 = f.iter().sum();
            assert!((s - sum0).abs() < 1e-9);
            let m = s / 256.0;
            let var = f.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 256.0;
            assert!(var <= prev_var + 1e-15);
            prev_var = var;
        }
    }

    #[test]
    fn advection_shift_oracle() {
        let init: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        let still = advection_frames(&init, 6, 8, 0, 0, 4);
        assert!(still.iter().all(|f| *f == init));
        let f = advection_frames(&init, 6, 8, 0, 1, 9);
        assert_eq!(f[8], init);
        let f = advection_frames(&init, 6, 8, -2, 3, 5);
        for (t, fr) in f.iter().enumerate() {
            for y in 0..6i64 {
                for x in 0..8i64 {
                    let sy = (y + 2 * t as i64).rem_euclid(6);
                    let sx = (x - 3 * t as i64).rem_euclid(8);
                    assert_eq!(fr[(y * 8 + x) as usize], init[(sy * 8 + sx) as usize]);
                }
            }
        }
    }

    #[test]
    fn round_robin_and_shapes() {
        let suite: Vec<TaskSpec> = [Generator::Diffusion, Generator::Advection, Generator::Bouncing]
            .into_iter()
            .map(|g| TaskSpec {
                n_train: 40,
                ..TaskSpec::desk(g)
            })
            .collect();
        let mut counts = [0; 3];
        for step in 0..6 {
            let b = make_batch(&suite, 4, step, 0).unwrap();
            counts[b.task] += 1;
            assert_eq!(b.input.shape(), &[16, 1, 16, 16]);
            assert_eq!(b.target.shape(), &[16, 1, 16, 16]);
        }
        assert_eq!(counts, [2, 2, 2]);
        assert!(make_batch(&[], 4, 0, 0).is_err());
    }

    #[test]
    fn epoch_covers_split_once() {
        let suite = vec![TaskSpec {
            n_train: 10,
            ..TaskSpec::desk(Generator::Advection)
        }];
        let mut seen: Vec<usize> = (0..steps_per_epoch(&suite, 5))
            .flat_map(|s| batch_plan(&suite, 5, s, 1).unwrap().1)
            .collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
