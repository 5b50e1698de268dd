//! Shared backbone plus per-task codecs.

use crate::adapters::RaMoeLayer;
use crate::backbone::{BackboneConfig, Block};
use crate::codec::{Codec, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, ForwardOptions, ParamId, ParamKind, ParamStore};
use crate::rng::{self, derive_seed, hash_str};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub store: ParamStore,
    pub blocks: Vec<Block>,
    heads: Vec<(String, Codec)>,
}

impl Model {
    /// Builds the backbone and one codec per `(task id, encoder config)`.
    /// Each component draws from its own seeded stream.
    pub fn new(backbone: &BackboneConfig, tasks: &[(String, EncoderConfig)], seed: u64) -> Result<Self> {
        backbone.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::rng(derive_seed(&[seed, hash_str("backbone")]));
        let blocks = (0..backbone.depth)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), backbone, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::with_capacity(tasks.len());
        for (id, enc) in tasks {
            if enc.dim != backbone.dim {
                return Err(Error::Config(format!(
                    "task {id}: projection width {} differs from backbone width {}",
                    enc.dim, backbone.dim
                )));
            }
            if heads.iter().any(|(h, _)| h == id) {
                return Err(Error::Config(format!("duplicate task id {id}")));
            }
            let mut r = rng::rng(derive_seed(&[seed, hash_str("codec"), hash_str(id)]));
            heads.push((id.clone(), Codec::new(&mut store, &format!("tasks.{id}"), enc, &mut r)?));
        }
        Ok(Model {
            backbone: backbone.clone(),
            store,
            blocks,
            heads,
        })
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.heads.iter().map(|(id, _)| id.as_str())
    }

    pub fn codec(&self, task: &str) -> Result<&Codec> {
        self.heads
            .iter()
            .find(|(id, _)| id == task)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    /// `[(B T_in), C, H, W]` to `[(B T_out), C, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, task: &str, frames: Var) -> Result<Var> {
        let codec = self.codec(task)?;
        let mut x = codec.encode(ctx, frames)?;
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        codec.decode(ctx, x)
    }

    /// Forward pass outside of training.
    pub fn predict(&self, task: &str, frames: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.store, opts);
        let x = ctx.graph.constant(frames.clone());
        let y = self.forward(&mut ctx, task, x)?;
        Ok(ctx.graph.value(y).clone())
    }

    /// Every RA-MoE site labelled `blocks.{i}.{site}`.
    pub fn moe_layers(&self) -> Vec<(String, &RaMoeLayer)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.moe_sites()
                    .into_iter()
                    .map(move |(s, l)| (format!("blocks.{i}.{s}"), l))
            })
            .collect()
    }

    pub fn rank_ids(&self) -> Vec<ParamId> {
        self.store.rank_ids()
    }

    /// Mean rank of each RA-MoE site, in layer order.
    pub fn layer_mean_ranks(&self) -> Vec<(String, f64)> {
        self.moe_layers()
            .into_iter()
            .map(|(name, l)| {
                let rs: Vec<f64> = l.rank_ids().map(|id| self.store.rank(id)).collect();
                (name, rs.iter().sum::<f64>() / rs.len() as f64)
            })
            .collect()
    }

    pub fn rank_sum(&self) -> f64 {
        self.store.ranks().iter().sum()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Frozen)
            .map(|(id, _)| id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> EncoderConfig {
        EncoderConfig {
            in_channels: 1,
            t_in: 2,
            t_out: 3,
            height: 8,
            width: 8,
            num_blocks: 1,
            hidden: 8,
            dim: 16,
            groups: 4,
        }
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            dim: 16,
            heads: 2,
            ..BackboneConfig::desk()
        }
    }

    #[test]
    fn output_contract_and_determinism() {
        let m = Model::new(&small(), &[("a".into(), enc())], 0).unwrap();
        let x = rng::uniform(&mut rng::rng(1), [4, 1, 8, 8], 0.0, 1.0);
        let y1 = m.predict("a", &x, ForwardOptions::default()).unwrap();
        let y2 = m.predict("a", &x, ForwardOptions::default()).unwrap();
        assert_eq!(y1.shape(), &[6, 1, 8, 8]);
        assert_eq!(y1, y2);
        assert!(matches!(
            m.predict("b", &x, ForwardOptions::default()),
            Err(Error::UnknownTask(_))
        ));
    }

    #[test]
    fn backbone_independent_of_task_list() {
        let m1 = Model::new(&small(), &[("a".into(), enc())], 3).unwrap();
        let m2 = Model::new(&small(), &[("z".into(), enc()), ("a".into(), enc())], 3).unwrap();
        let w = "blocks.1.attn.q.base";
        assert_eq!(m1.store.by_name(w).unwrap().value, m2.store.by_name(w).unwrap().value);
        let c = "tasks.a.enc.0.conv1.w";
        assert_eq!(m1.store.by_name(c).unwrap().value, m2.store.by_name(c).unwrap().value);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut e = enc();
        e.dim = 32;
        assert!(Model::new(&small(), &[("a".into(), e)], 0).is_err());
    }
}
