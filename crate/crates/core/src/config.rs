//! JSON run configuration.
//!
//! Every section and every key is optional; missing keys take the defaults
//! below and unknown keys are rejected. An empty document (`{}` or an empty
//! file) is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, RankBudget};
use crate::backbone::{BackboneConfig, TemporalMode};
use crate::codec::EncoderConfig;
use crate::error::{Error, Result};
use crate::tasks::{Generator, TaskSpec};

/// Which adapter scheme a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Rank-adaptive mixture of experts plus the temporal module.
    #[default]
    Full,
    /// Mixture of experts without the temporal module.
    NoTemporal,
    /// One fixed-rank adapter per site, no temporal module.
    FixedLora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub experts_qkv: usize,
    pub experts_proj: usize,
    pub experts_temporal: usize,
    pub temporal_ratio: usize,
    pub r_init: f64,
    pub r_max: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub temporal_mode: TemporalMode,
    pub init_std: f64,
    /// Rank of the single adapter in the `fixed_lora` variant.
    pub fixed_rank: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            depth: 2,
            dim: 64,
            heads: 4,
            ffn_ratio: 4,
            experts_qkv: 6,
            experts_proj: 2,
            experts_temporal: 2,
            temporal_ratio: 6,
            r_init: 4.5,
            r_max: 8,
            alpha: 1.0,
            gamma: 1.0,
            temporal_mode: TemporalMode::Additive,
            init_std: 0.02,
            fixed_rank: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub num_blocks: usize,
    /// Hidden channels C′.
    pub hidden: usize,
    pub groups: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            num_blocks: 2,
            hidden: 16,
            groups: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    #[serde(flatten)]
    pub spec: TaskSpec,
    /// Per-task override of the shared encoder section.
    #[serde(default)]
    pub encoder: Option<EncoderSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub lr_ranks: f64,
    pub nesterov: bool,
    pub beta: f64,
    /// Rank budget C; defaults to four per expert.
    pub budget: Option<f64>,
    pub rank_epochs: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr_weights: 7e-4,
            weight_decay: 1e-5,
            warmup_epochs: 1,
            lr_ranks: 0.05,
            nesterov: true,
            beta: 1.0,
            budget: None,
            rank_epochs: 10,
            eval_batch: 50,
        }
    }
}

impl TrainConfig {
    /// Learning rate 0.01 with weight decay 0.05.
    pub fn high_lr_preset() -> Self {
        TrainConfig {
            lr_weights: 0.01,
            weight_decay: 0.05,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub checked_math: bool,
    pub backbone: BackboneSection,
    pub encoder: EncoderSection,
    pub tasks: Vec<TaskEntry>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            variant: Variant::Full,
            checked_math: true,
            backbone: BackboneSection::default(),
            encoder: EncoderSection::default(),
            tasks: [Generator::Diffusion, Generator::Advection, Generator::Bouncing]
                .into_iter()
                .map(|g| TaskEntry {
                    spec: TaskSpec::desk(g),
                    encoder: None,
                })
                .collect(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON document. Whitespace-only input is the
    /// default configuration.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = if text.trim().is_empty() {
            RunConfig::default()
        } else {
            serde_json::from_str(text).map_err(|e| {
                Error::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Seeds every task with the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.r_init < 1.0 {
            return Err(Error::Config(format!(
                "backbone.r_init = {} is below the rank floor 1",
                b.r_init
            )));
        }
        if b.r_init > b.r_max as f64 {
            return Err(Error::Config(format!(
                "backbone.r_init = {} exceeds backbone.r_max = {}",
                b.r_init, b.r_max
            )));
        }
        if b.fixed_rank == 0 || b.fixed_rank > b.r_max {
            return Err(Error::Config(format!(
                "backbone.fixed_rank = {} outside [1, r_max]",
                b.fixed_rank
            )));
        }
        self.backbone_config().validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("tasks: at least one task required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.spec.id == t.spec.id) {
                return Err(Error::Config(format!("tasks: duplicate id `{}`", t.spec.id)));
            }
            t.spec.validate()?;
            if t.spec.n_test == 0 {
                return Err(Error::Config(format!("tasks.{}: n_test must be at least 1", t.spec.id)));
            }
            self.encoder_config(t).validate()?;
        }
        let tr = &self.train;
        if tr.batch_size == 0 || tr.eval_batch == 0 {
            return Err(Error::Config("train.batch_size and train.eval_batch must be at least 1".into()));
        }
        if tr.epochs > 0 && tr.warmup_epochs >= tr.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs = {} must be below train.epochs = {}",
                tr.warmup_epochs, tr.epochs
            )));
        }
        if tr.rank_epochs > tr.epochs {
            return Err(Error::Config(format!(
                "train.rank_epochs = {} exceeds train.epochs = {}",
                tr.rank_epochs, tr.epochs
            )));
        }
        if !tr.nesterov {
            return Err(Error::Config("train.nesterov = false is not supported".into()));
        }
        for (k, v) in [
            ("train.lr_weights", tr.lr_weights),
            ("train.weight_decay", tr.weight_decay),
            ("train.lr_ranks", tr.lr_ranks),
            ("train.beta", tr.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be finite and non-negative")));
            }
        }
        self.budget()?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let b = &self.backbone;
        let mut cfg = BackboneConfig {
            depth: b.depth,
            dim: b.dim,
            heads: b.heads,
            ffn_ratio: b.ffn_ratio,
            experts_qkv: b.experts_qkv,
            experts_proj: b.experts_proj,
            experts_temporal: b.experts_temporal,
            temporal_ratio: b.temporal_ratio,
            adapter: AdapterConfig {
                max_rank: b.r_max,
                init_rank: b.r_init,
                alpha: b.alpha,
                gamma: b.gamma,
            },
            temporal_mode: b.temporal_mode,
            init_std: b.init_std,
        };
        match self.variant {
            Variant::Full => {}
            Variant::NoTemporal => cfg.temporal_mode = TemporalMode::Identity,
            Variant::FixedLora => {
                cfg.temporal_mode = TemporalMode::Identity;
                cfg.experts_qkv = 1;
                cfg.experts_proj = 1;
                cfg.experts_temporal = 1;
                cfg.adapter.init_rank = b.fixed_rank as f64;
            }
        }
        cfg
    }

    pub fn encoder_config(&self, task: &TaskEntry) -> EncoderConfig {
        let e = task.encoder.as_ref().unwrap_or(&self.encoder);
        EncoderConfig {
            in_channels: task.spec.channels,
            t_in: task.spec.t_in,
            t_out: task.spec.t_out,
            height: task.spec.height,
            width: task.spec.width,
            num_blocks: e.num_blocks,
            hidden: e.hidden,
            dim: self.backbone.dim,
            groups: e.groups,
        }
    }

    /// Task specs carrying the run seed.
    pub fn suite(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| TaskSpec {
                seed: self.seed,
                ..t.spec.clone()
            })
            .collect()
    }

    pub fn heads(&self) -> Vec<(String, EncoderConfig)> {
        self.tasks
            .iter()
            .map(|t| (t.spec.id.clone(), self.encoder_config(t)))
            .collect()
    }

    pub fn budget(&self) -> Result<RankBudget> {
        let target = self
            .train
            .budget
            .unwrap_or(4.0 * self.backbone_config().total_experts() as f64);
        RankBudget::new(target, self.train.beta)
    }

    /// Whether ranks are searched at all in this run.
    pub fn searches_ranks(&self) -> bool {
        self.variant != Variant::FixedLora
    }
}
