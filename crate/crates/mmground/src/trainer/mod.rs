//! Joint training of the language model and the grounding decoder, with the
//! ablation toggles and baseline/reasoning modes the comparison studies need.

mod modes;
mod optim;
mod run;

pub use modes::{apply_baseline_mode, prepare_sample, quantize_box_tokens, target_has_rationale, TrainSample};
pub use optim::{warmup_decay_lr, AdamW};
pub use run::{
    load_checkpoint, save_checkpoint, train, Checkpoint, LogRecord, TrainOutcome, Trainer,
};

use crate::error::{Error, Result};
use crate::grounder::GrounderConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};

/// Which grounding tokens are trained; Table-style ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub use_seg: bool,
    pub use_det: bool,
    pub use_rej: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self { use_seg: true, use_det: true, use_rej: true }
    }
}

impl AblationToggles {
    pub fn any_grounding(&self) -> bool {
        self.use_seg || self.use_det || self.use_rej
    }
}

/// Textual grounding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningMode {
    /// Rationales stripped; everything trains as simple.
    None,
    /// A rationale is forced into every target.
    Inter,
    /// Rationale generated in a first pass, consumed in a second.
    Pre,
    /// Targets as labeled; the model learns the simple/complex choice.
    #[default]
    Selective,
}

/// Box-as-text baselines; all of them disable the grounding decoder and the
/// rejection/detection/segmentation losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    #[default]
    None,
    BtlGeneration,
    BtlCaption,
    BtlBoth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub total_steps: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub ablation: AblationToggles,
    pub reasoning_mode: ReasoningMode,
    pub baseline_mode: BaselineMode,
    pub model: ModelConfig,
    pub grounder: GrounderConfig,
    /// Fraction of scenes held out of training for evaluation.
    pub holdout_fraction: f64,
    /// Prepend the self-reflection instruction to every prompt. Off by
    /// default: it almost doubles text length for the same supervision.
    pub include_reflection_prompt: bool,
    pub max_grad_norm: Option<f64>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 100,
            batch_size: 2,
            grad_accum: 10,
            total_steps: 2000,
            weights: LossWeights::default(),
            seed: 0,
            ablation: AblationToggles::default(),
            reasoning_mode: ReasoningMode::Selective,
            baseline_mode: BaselineMode::None,
            model: ModelConfig::default(),
            grounder: GrounderConfig::default(),
            holdout_fraction: 0.1,
            include_reflection_prompt: false,
            max_grad_norm: Some(1.0),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction outside [0,1)".into()));
        }
        self.weights.validate()?;
        if self.baseline_mode != BaselineMode::None && self.ablation.any_grounding() {
            return Err(Error::Config(
                "baseline modes replace the grounding pathway; grounding toggles conflict"
                    .into(),
            ));
        }
        if self.model.d_model != self.grounder.d_model {
            return Err(Error::Config(format!(
                "grounder d_model {} must match model d_model {}",
                self.grounder.d_model, self.model.d_model
            )));
        }
        if self.model.image_size != self.grounder.image_size {
            return Err(Error::Config("model/grounder image_size mismatch".into()));
        }
        Ok(())
    }

    /// Grounding losses are active only for the full pathway.
    pub fn grounding_losses_active(&self) -> bool {
        self.baseline_mode == BaselineMode::None && (self.ablation.use_seg || self.ablation.use_det)
    }

    pub fn rejection_loss_active(&self) -> bool {
        self.baseline_mode == BaselineMode::None && self.ablation.use_rej
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_plus_toggles_conflict() {
        let mut c = TrainConfig { baseline_mode: BaselineMode::BtlGeneration, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        c.ablation = AblationToggles { use_seg: false, use_det: false, use_rej: false };
        c.model.vocab_size = 300;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn warmup_must_precede_total() {
        let c = TrainConfig { warmup_steps: 50, total_steps: 50, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
