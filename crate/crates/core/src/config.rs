//! Run configuration files: one JSON document with optional sections whose
//! fields mirror the command-line flags. Every field is optional so that a
//! partial file composes with flags; resolution order is flag, then file,
//! then built-in default. Each artifact-producing run writes the fully
//! resolved document back out as `config.echo.json`, which can be fed to
//! `--config` to reproduce the run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticWorldConfig;
use crate::engine::{InferenceConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::forward::{NoiseSchedule, OpKind};
use crate::model::optim::{OptimConfig, OptimizerKind};
use crate::model::ModelHyper;

macro_rules! overlay_fields {
    ($base:expr, $over:expr, $($f:ident),+ $(,)?) => {{
        Self {
            $($f: $over.$f.clone().or_else(|| $base.$f.clone()),)+
        }
    }};
}

/// Synthetic-world knobs (see the data module for semantics).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    /// Number of users.
    pub n_users: Option<usize>,
    /// Catalog size.
    pub n_items: Option<usize>,
    /// Number of sessions (last 20% become the test split).
    pub n_sessions: Option<usize>,
    /// Latent topic count.
    pub n_topics: Option<usize>,
    /// Per-slot position-bias curve; its length sets the list length.
    pub position_bias: Option<Vec<f64>>,
    /// Redundancy penalty weight.
    pub lambda: Option<f64>,
    /// Feedback noise scale.
    pub noise: Option<f64>,
    /// Pre-ranker noise scale (how wrong the logged order is).
    pub preranker_noise: Option<f64>,
    /// Bootstrap history length per user.
    pub history_len: Option<usize>,
    /// World seed.
    pub seed: Option<u64>,
}

impl WorldSection {
    /// Field-wise overlay: `over`'s set fields win.
    pub fn overlay(&self, over: &WorldSection) -> WorldSection {
        overlay_fields!(
            self,
            over,
            n_users,
            n_items,
            n_sessions,
            n_topics,
            position_bias,
            lambda,
            noise,
            preranker_noise,
            history_len,
            seed,
        )
    }

    /// Fills unset fields from the built-in defaults.
    pub fn materialize(&self) -> SyntheticWorldConfig {
        let d = SyntheticWorldConfig::default();
        SyntheticWorldConfig {
            n_users: self.n_users.unwrap_or(d.n_users),
            n_items: self.n_items.unwrap_or(d.n_items),
            n_sessions: self.n_sessions.unwrap_or(d.n_sessions),
            n_topics: self.n_topics.unwrap_or(d.n_topics),
            position_bias: self.position_bias.clone().unwrap_or(d.position_bias),
            lambda: self.lambda.unwrap_or(d.lambda),
            noise: self.noise.unwrap_or(d.noise),
            preranker_noise: self.preranker_noise.unwrap_or(d.preranker_noise),
            history_len: self.history_len.unwrap_or(d.history_len),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    /// A section with every field pinned to `cfg`'s values.
    pub fn pinned(cfg: &SyntheticWorldConfig) -> WorldSection {
        WorldSection {
            n_users: Some(cfg.n_users),
            n_items: Some(cfg.n_items),
            n_sessions: Some(cfg.n_sessions),
            n_topics: Some(cfg.n_topics),
            position_bias: Some(cfg.position_bias.clone()),
            lambda: Some(cfg.lambda),
            noise: Some(cfg.noise),
            preranker_noise: Some(cfg.preranker_noise),
            history_len: Some(cfg.history_len),
            seed: Some(cfg.seed),
        }
    }
}

/// Model widths and temperature.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Item-embedding width `D`.
    pub dim: Option<usize>,
    /// Evaluator MLP hidden width.
    pub hidden: Option<usize>,
    /// Candidate-score softmax temperature.
    pub tau: Option<f64>,
}

/// Built-in model defaults shared by the trainer and the CLI.
pub const DEFAULT_HYPER: ModelHyper = ModelHyper {
    dim: 16,
    hidden: 32,
    tau: 0.1,
};

impl ModelSection {
    /// Field-wise overlay: `over`'s set fields win.
    pub fn overlay(&self, over: &ModelSection) -> ModelSection {
        overlay_fields!(self, over, dim, hidden, tau)
    }

    /// Fills unset fields from the built-in defaults.
    pub fn materialize(&self) -> ModelHyper {
        ModelHyper {
            dim: self.dim.unwrap_or(DEFAULT_HYPER.dim),
            hidden: self.hidden.unwrap_or(DEFAULT_HYPER.hidden),
            tau: self.tau.unwrap_or(DEFAULT_HYPER.tau),
        }
    }

    /// A section with every field pinned to `h`'s values.
    pub fn pinned(h: ModelHyper) -> ModelSection {
        ModelSection {
            dim: Some(h.dim),
            hidden: Some(h.hidden),
            tau: Some(h.tau),
        }
    }
}

/// Training knobs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Passes over the training sessions.
    pub epochs: Option<usize>,
    /// Sessions per optimizer update.
    pub batch_size: Option<usize>,
    /// Corruption process to train against.
    pub op: Option<OpKind>,
    /// Per-step corruption probability.
    pub beta: Option<f64>,
    /// Forward horizon.
    pub t_max: Option<usize>,
    /// Update rule.
    pub optimizer: Option<OptimizerKind>,
    /// Learning rate.
    pub lr: Option<f64>,
    /// Proposal-model learning rate, when it should differ from `lr`.
    pub lr_denoiser: Option<f64>,
    /// Seed for init, draws, and shuffling.
    pub seed: Option<u64>,
}

impl TrainSection {
    /// Field-wise overlay: `over`'s set fields win.
    pub fn overlay(&self, over: &TrainSection) -> TrainSection {
        overlay_fields!(
            self, over, epochs, batch_size, op, beta, t_max, optimizer, lr, lr_denoiser, seed,
        )
    }

    /// Fills unset fields from the built-in defaults.
    pub fn materialize(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            op: self.op.unwrap_or(d.op),
            schedule: NoiseSchedule {
                beta: self.beta.unwrap_or(d.schedule.beta),
                t_max: self.t_max.unwrap_or(d.schedule.t_max),
            },
            optim: OptimConfig {
                kind: self.optimizer.unwrap_or(d.optim.kind),
                lr: self.lr.unwrap_or(d.optim.lr),
                ..d.optim
            },
            denoiser_lr: self.lr_denoiser.or(d.denoiser_lr),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    /// A section with every field pinned to `cfg`'s values.
    pub fn pinned(cfg: &TrainConfig) -> TrainSection {
        TrainSection {
            epochs: Some(cfg.epochs),
            batch_size: Some(cfg.batch_size),
            op: Some(cfg.op),
            beta: Some(cfg.schedule.beta),
            t_max: Some(cfg.schedule.t_max),
            optimizer: Some(cfg.optim.kind),
            lr: Some(cfg.optim.lr),
            lr_denoiser: cfg.denoiser_lr,
            seed: Some(cfg.seed),
        }
    }
}

/// Inference knobs. The condition policy is not a file knob: batch runs
/// always ask for positive feedback, and ad-hoc runs take it per request.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    /// Beam width.
    pub beam: Option<usize>,
    /// Maximum reverse steps.
    pub max_steps: Option<usize>,
    /// Early-stop improvement threshold.
    pub early_stop: Option<f64>,
    /// Token-level per-slot shortlist width.
    pub top_m: Option<usize>,
}

impl InferSection {
    /// Field-wise overlay: `over`'s set fields win.
    pub fn overlay(&self, over: &InferSection) -> InferSection {
        overlay_fields!(self, over, beam, max_steps, early_stop, top_m)
    }

    /// Fills unset fields from the built-in defaults.
    pub fn materialize(&self) -> InferenceConfig {
        let d = InferenceConfig::default();
        InferenceConfig {
            beam: self.beam.unwrap_or(d.beam),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            early_stop: self.early_stop.unwrap_or(d.early_stop),
            condition: d.condition,
            top_m: self.top_m.unwrap_or(d.top_m),
        }
    }

    /// A section with every field pinned to `cfg`'s values.
    pub fn pinned(cfg: &InferenceConfig) -> InferSection {
        InferSection {
            beam: Some(cfg.beam),
            max_steps: Some(cfg.max_steps),
            early_stop: Some(cfg.early_stop),
            top_m: Some(cfg.top_m),
        }
    }
}

/// Comparison knobs for the evaluate command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Bootstrap resamples for paired significance tests.
    pub bootstrap_samples: Option<usize>,
    /// Bootstrap seed.
    pub bootstrap_seed: Option<u64>,
    /// NDCG cutoff.
    pub ndcg_k: Option<usize>,
}

/// Built-in defaults for the evaluate command.
pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 2000;
/// Default bootstrap seed.
pub const DEFAULT_BOOTSTRAP_SEED: u64 = 7;
/// Default NDCG cutoff.
pub const DEFAULT_NDCG_K: usize = 3;

impl EvaluateSection {
    /// Field-wise overlay: `over`'s set fields win.
    pub fn overlay(&self, over: &EvaluateSection) -> EvaluateSection {
        overlay_fields!(self, over, bootstrap_samples, bootstrap_seed, ndcg_k)
    }

    /// Fills unset fields from the built-in defaults.
    pub fn materialize(&self) -> (usize, u64, usize) {
        (
            self.bootstrap_samples.unwrap_or(DEFAULT_BOOTSTRAP_SAMPLES),
            self.bootstrap_seed.unwrap_or(DEFAULT_BOOTSTRAP_SEED),
            self.ndcg_k.unwrap_or(DEFAULT_NDCG_K),
        )
    }

    /// A section with every field pinned.
    pub fn pinned(samples: usize, seed: u64, ndcg_k: usize) -> EvaluateSection {
        EvaluateSection {
            bootstrap_samples: Some(samples),
            bootstrap_seed: Some(seed),
            ndcg_k: Some(ndcg_k),
        }
    }
}

/// The whole configuration document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic-world generation.
    pub world: WorldSection,
    /// Model widths.
    pub model: ModelSection,
    /// Training.
    pub train: TrainSection,
    /// Inference.
    pub infer: InferSection,
    /// Evaluation.
    pub evaluate: EvaluateSection,
}

impl RunConfig {
    /// Parses a JSON config file; unknown fields are rejected.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path)?;
        serde_json::from_str(&body).map_err(|e| {
            Error::InvalidArgument(format!("config {}: {e}", path.display()))
        })
    }

    /// Writes the document as pretty JSON (the echo artifact).
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("serialize config: {e}")))?;
        std::fs::write(path, body + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_materializes_to_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").expect("empty config parses");
        assert_eq!(cfg.world.materialize(), SyntheticWorldConfig::default());
        assert_eq!(cfg.train.materialize(), TrainConfig::default());
        assert_eq!(cfg.infer.materialize(), InferenceConfig::default());
        assert_eq!(cfg.model.materialize(), DEFAULT_HYPER);
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file: TrainSection = serde_json::from_str(r#"{"epochs": 3, "lr": 0.5}"#).unwrap();
        let flags = TrainSection {
            lr: Some(0.25),
            ..TrainSection::default()
        };
        let resolved = file.overlay(&flags).materialize();
        assert_eq!(resolved.epochs, 3, "file value survives");
        assert_eq!(resolved.optim.lr, 0.25, "flag wins over file");
        assert_eq!(
            resolved.batch_size,
            TrainConfig::default().batch_size,
            "default fills the rest"
        );
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"wrold": {}}"#);
        assert!(err.is_err(), "typo in a section name must not pass silently");
        let err = serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#);
        assert!(err.is_err(), "typo in a field name must not pass silently");
    }

    #[test]
    fn pinned_sections_round_trip_through_materialize() {
        let world = SyntheticWorldConfig {
            lambda: 2.5,
            seed: 99,
            ..SyntheticWorldConfig::default()
        };
        assert_eq!(WorldSection::pinned(&world).materialize(), world);

        let train = TrainConfig {
            epochs: 4,
            op: OpKind::Token,
            ..TrainConfig::default()
        };
        assert_eq!(TrainSection::pinned(&train).materialize(), train);

        let infer = InferenceConfig {
            beam: 9,
            ..InferenceConfig::default()
        };
        assert_eq!(InferSection::pinned(&infer).materialize(), infer);
    }

    #[test]
    fn echo_file_round_trips(){
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("config.echo.json");
        let mut cfg = RunConfig::default();
        cfg.world = WorldSection::pinned(&SyntheticWorldConfig::default());
        cfg.save(&path).expect("writes");
        let back = RunConfig::load(&path).expect("parses");
        assert_eq!(back, cfg);
    }
}
