//! Fixtures shared by the benchmarks.

use rankmoe_core::backbone::BackboneConfig;
use rankmoe_core::codec::EncoderConfig;
use rankmoe_core::model::Model;
use rankmoe_core::{rng, Ctx, ForwardOptions, Result, Tensor};

/// One 16x16 single-channel task with four input and four output frames.
pub fn desk_encoder(dim: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        t_in: 4,
        t_out: 4,
        height: 16,
        width: 16,
        num_blocks: 2,
        hidden: 16,
        dim,
        groups: 8,
    }
}

pub fn desk_model() -> Model {
    let cfg = BackboneConfig::desk();
    Model::new(&cfg, &[("task".into(), desk_encoder(cfg.dim))], 0).expect("desk config is valid")
}

/// `batch` random input sequences.
pub fn frames(batch: usize, seed: u64) -> Tensor {
    rng::uniform(&mut rng::rng(seed), [batch * 4, 1, 16, 16], 0.0, 1.0)
}

/// Forward, mean-squared loss against `target`, backward. Returns the loss.
pub fn train_step(model: &Model, input: &Tensor, target: &Tensor) -> Result<f64> {
    let mut ctx = Ctx::new(&model.store, ForwardOptions::default());
    let x = ctx.graph.constant(input.clone());
    let y = model.forward(&mut ctx, "task", x)?;
    let t = ctx.graph.constant(target.clone());
    let d = ctx.graph.sub(y, t)?;
    let sq = ctx.graph.square(d);
    let loss = ctx.graph.mean(sq);
    let grads = ctx.graph.backward(loss)?;
    std::hint::black_box(ctx.param_grads(&grads));
    ctx.graph.value(loss).item()
}
