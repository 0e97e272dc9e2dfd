//! Experiment configuration: one TOML file with a section per subsystem.
//! Unknown keys are rejected; every run re-serializes the fully resolved
//! config next to its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffgen::DiffusionTrainConfig;
use crate::downstream::PredictorConfig;
use crate::encoders::{BasePretrainConfig, EncoderConfig};
use crate::losses::{DistanceKind, LossConfig};
use crate::pareto::{ParetoConfig, TieBreak};
use crate::rvegen::{GenConfig, Sampling, R_F_REF};
use crate::trainer::{TrainConfig, TrainMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub rvegen: RvegenSection,
    pub encoders: EncodersSection,
    pub losses: LossesSection,
    pub pareto: ParetoSection,
    pub trainer: TrainerSection,
    pub downstream: DownstreamSection,
    pub diffgen: DiffgenSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "run".to_string(),
            rvegen: RvegenSection::default(),
            encoders: EncodersSection::default(),
            losses: LossesSection::default(),
            pareto: ParetoSection::default(),
            trainer: TrainerSection::default(),
            downstream: DownstreamSection::default(),
            diffgen: DiffgenSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvegenSection {
    pub count: usize,
    pub image_size: usize,
    pub noise: bool,
    pub r_f: f64,
    /// "uniform" or "grid"
    pub sampling: String,
}

impl Default for RvegenSection {
    fn default() -> Self {
        Self {
            count: 436,
            image_size: 64,
            noise: true,
            r_f: R_F_REF,
            sampling: "uniform".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodersSection {
    pub d: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub vision_layers: usize,
    pub tabular_layers: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub freeze_base: bool,
    pub normalize: bool,
    /// Base (rotation) pretraining budget.
    pub base_epochs: usize,
    pub base_lr: f64,
    pub aux_count: usize,
    pub ramp: f64,
}

impl Default for EncodersSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            d: e.d,
            model_dim: e.model_dim,
            heads: e.heads,
            vision_layers: e.vision_layers,
            tabular_layers: e.tabular_layers,
            patch_size: e.patch_size,
            mlp_ratio: e.mlp_ratio,
            lora_rank: e.lora_rank,
            lora_alpha: e.lora_alpha,
            freeze_base: e.freeze_base,
            normalize: e.normalize,
            base_epochs: 60,
            base_lr: 1e-3,
            aux_count: 256,
            ramp: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossesSection {
    pub tau: f64,
    /// Fixed weight used by the `order_alpha` mode.
    pub alpha: f64,
    pub include_positive: bool,
    /// "l2" or "l1"
    pub distance: String,
}

impl Default for LossesSection {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 0.2,
            include_positive: false,
            distance: "l2".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParetoSection {
    pub epsilon: f64,
    /// 0 means "use the train batch size".
    pub val_batch: usize,
    pub tie_break: String,
    pub use_adam: bool,
    pub val_full: bool,
}

impl Default for ParetoSection {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            val_batch: 0,
            tie_break: "max_min".to_string(),
            use_adam: true,
            val_full: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// "order_dyn", "order_alpha", or "cmcl"
    pub mode: String,
    pub flip_prob: f64,
    pub split_seed: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 3e-4,
            batch_size: 32,
            mode: "order_dyn".to_string(),
            flip_prob: 0.1,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    pub k: Vec<usize>,
    pub predictor_lr: f64,
    pub predictor_epochs: usize,
    pub predictor_batch: usize,
    pub patience: usize,
    pub predict_split_seed: u64,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            k: vec![1, 5],
            predictor_lr: 5e-4,
            predictor_epochs: 100,
            predictor_batch: 32,
            patience: 20,
            predict_split_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffgenSection {
    pub timesteps: usize,
    pub gen_size: usize,
    pub prior_epochs: usize,
    pub decoder_epochs: usize,
    pub lr: f64,
    pub prior_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for DiffgenSection {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            gen_size: 32,
            prior_epochs: 200,
            decoder_epochs: 200,
            lr: 1e-4,
            prior_hidden: 256,
            decoder_hidden: 256,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.sampling()?;
        self.distance()?;
        self.tie_break()?;
        self.train_mode()?;
        if self.trainer.batch_size < 2 {
            return Err(Error::ConfigInvalid(
                "trainer.batch_size must be >= 2".into(),
            ));
        }
        Ok(())
    }

    pub fn sampling(&self) -> Result<Sampling> {
        match self.rvegen.sampling.as_str() {
            "uniform" => Ok(Sampling::Uniform),
            "grid" => Ok(Sampling::Grid),
            other => Err(Error::ConfigInvalid(format!(
                "rvegen.sampling: unknown value {other:?} (expected \"uniform\" or \"grid\")"
            ))),
        }
    }

    pub fn distance(&self) -> Result<DistanceKind> {
        match self.losses.distance.as_str() {
            "l2" => Ok(DistanceKind::L2),
            "l1" => Ok(DistanceKind::L1),
            other => Err(Error::ConfigInvalid(format!(
                "losses.distance: unknown value {other:?} (expected \"l2\" or \"l1\")"
            ))),
        }
    }

    pub fn tie_break(&self) -> Result<TieBreak> {
        match self.pareto.tie_break.as_str() {
            "max_min" => Ok(TieBreak::MaxMin),
            other => Err(Error::ConfigInvalid(format!(
                "pareto.tie_break: unknown value {other:?} (expected \"max_min\")"
            ))),
        }
    }

    pub fn train_mode(&self) -> Result<TrainMode> {
        match self.trainer.mode.as_str() {
            "order_dyn" => Ok(TrainMode::OrderDyn),
            "order_alpha" => Ok(TrainMode::OrderAlpha(self.losses.alpha)),
            "cmcl" => Ok(TrainMode::Cmcl),
            other => Err(Error::ConfigInvalid(format!(
                "trainer.mode: unknown value {other:?} (expected \"order_dyn\", \"order_alpha\" or \"cmcl\")"
            ))),
        }
    }

    pub fn gen_config(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            count: self.rvegen.count,
            seed: self.seed,
            image_size: (self.rvegen.image_size, self.rvegen.image_size),
            noise: self.rvegen.noise,
            r_f: self.rvegen.r_f,
            sampling: self.sampling()?,
        })
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.encoders.d,
            model_dim: self.encoders.model_dim,
            heads: self.encoders.heads,
            vision_layers: self.encoders.vision_layers,
            tabular_layers: self.encoders.tabular_layers,
            patch_size: self.encoders.patch_size,
            image_size: self.rvegen.image_size,
            mlp_ratio: self.encoders.mlp_ratio,
            lora_rank: self.encoders.lora_rank,
            lora_alpha: self.encoders.lora_alpha,
            freeze_base: self.encoders.freeze_base,
            normalize: self.encoders.normalize,
        }
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            tau: self.losses.tau,
            include_positive_in_denominator: self.losses.include_positive,
            distance: self.distance()?,
        })
    }

    pub fn pareto_config(&self) -> Result<ParetoConfig> {
        Ok(ParetoConfig {
            epsilon: self.pareto.epsilon,
            val_batch: (self.pareto.val_batch > 0).then_some(self.pareto.val_batch),
            tie_break: self.tie_break()?,
            use_adam: self.pareto.use_adam,
            val_full: self.pareto.val_full,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.trainer.epochs,
            lr: self.trainer.lr,
            batch_size: self.trainer.batch_size,
            mode: self.train_mode()?,
            flip_prob: self.trainer.flip_prob,
            seed: self.seed,
            loss: self.loss_config()?,
            pareto: self.pareto_config()?,
            encoder: self.encoder_config(),
        })
    }

    pub fn base_pretrain_config(&self) -> BasePretrainConfig {
        BasePretrainConfig {
            epochs: self.encoders.base_epochs,
            batch_size: self.trainer.batch_size,
            lr: self.encoders.base_lr,
            seed: self.seed,
            holdout: 0.25,
        }
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        PredictorConfig {
            lr: self.downstream.predictor_lr,
            epochs: self.downstream.predictor_epochs,
            batch_size: self.downstream.predictor_batch,
            patience: self.downstream.patience,
            seed: self.seed,
        }
    }

    pub fn prior_train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            lr: self.diffgen.lr,
            epochs: self.diffgen.prior_epochs,
            batch_size: self.trainer.batch_size,
            hidden: self.diffgen.prior_hidden,
            seed: self.seed,
        }
    }

    pub fn decoder_train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            lr: self.diffgen.lr,
            epochs: self.diffgen.decoder_epochs,
            batch_size: self.trainer.batch_size,
            hidden: self.diffgen.decoder_hidden,
            seed: self.seed,
        }
    }
}
