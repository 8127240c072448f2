//! Training loop: MixMatch SSL plus the transform-ensemble regularizers,
//! a split optimizer (Adam for encoder+classifier, SGD with momentum and a
//! cosine schedule for the decoders), and an EMA teacher evaluated with the
//! mean error over the last few evaluations.

mod metrics;
mod optim;
mod run;

pub use metrics::{read_metrics, write_metrics_line, MetricsRecord};
pub use optim::{adam_step, cosine_lr, ema_update, ramp_weight, sgd_momentum_step, AdamParams};
pub use run::{evaluate, train, EvalPoint, TrainOutput, TrainSession};

use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::losses::{LossError, LossWeights, SslConfig, StepConfig};
use crate::model::{ModelConfig, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot train on this split: {0}")]
    BadSplit(String),
    #[error("evaluation needs a non-empty test set")]
    EmptyEval,
    #[error("teacher/student mismatch in EMA update: {0}")]
    EmaShape(String),
    #[error("{0} is not finite at step {1}; aborting")]
    NonFinite(String, u64),
    #[error("checkpoint does not match this run: {0}")]
    BadResume(String),
    #[error("metrics line {line}: {message}")]
    Metrics { line: usize, message: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full run description. Serializes to a flat key-value file (TOML, no
/// sections); unknown keys are rejected and missing keys fall back to the
/// defaults below, so a config file only needs the fields it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Teacher decay: teacher = alpha * teacher + (1 - alpha) * student.
    pub ema_alpha: f64,
    /// Adam rate for the encoder and classifier.
    pub lr_enc_cls: f64,
    /// Decoder SGD rate, cosine-annealed from init to final over the run.
    pub lr_dec_init: f64,
    pub lr_dec_final: f64,
    pub momentum_dec: f64,
    pub weight_decay_dec: f64,
    /// Per-family regression weights, strongest family first.
    pub lambda_k: [f64; 5],
    /// Consistency weight shared by all families.
    pub gamma: f64,
    /// Unlabeled SSL weight at the top of the ramp.
    pub lambda_u_max: f64,
    /// Linear warmup length for every regularizer weight; 0 picks a tenth
    /// of the total step count.
    pub ramp_steps: u64,
    /// Label sharpening temperature.
    pub temperature: f64,
    /// Augmented copies per unlabeled image.
    pub k_augment: usize,
    /// Beta(a, a) parameter for the mixup draw.
    pub beta_param: f64,
    /// Flip/translate augmentation on labeled and unlabeled inputs.
    pub augment: bool,
    /// Also route labeled images through the transform regression branches.
    pub aet_include_labeled: bool,
    /// Hard per-family switch, in the canonical family order. Disabled
    /// families run no branches at all; single-family ablations use this.
    pub families_enabled: [bool; 5],
    pub labels_per_class: usize,
    pub seed: u64,
    /// Evaluate every this many epochs.
    pub eval_every: usize,
    /// Reported error is the mean over this many trailing evaluations.
    pub last_k_report: usize,
    pub widths: [usize; 5],
    pub stem_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 30,
            ema_alpha: 0.999,
            lr_enc_cls: 0.002,
            lr_dec_init: 0.1,
            lr_dec_final: 1e-4,
            momentum_dec: 0.9,
            weight_decay_dec: 5e-4,
            lambda_k: [1.0, 0.75, 0.5, 0.2, 0.05],
            gamma: 0.2,
            lambda_u_max: 25.0,
            ramp_steps: 0,
            temperature: 0.5,
            k_augment: 2,
            beta_param: 0.75,
            augment: true,
            aet_include_labeled: false,
            families_enabled: [true; 5],
            labels_per_class: 10,
            seed: 0,
            eval_every: 1,
            last_k_report: 20,
            widths: [16, 16, 32, 64, 64],
            stem_stride: 1,
        }
    }
}

impl TrainConfig {
    /// Settings matching the published CIFAR-10 recipe. Far beyond what a
    /// CPU run can finish; kept as the reference point the desk defaults
    /// scale down from.
    pub fn paper() -> Self {
        Self { batch_size: 128, epochs: 1024, lambda_u_max: 75.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr_enc_cls", self.lr_enc_cls),
            ("lr_dec_init", self.lr_dec_init),
            ("lr_dec_final", self.lr_dec_final),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be a positive rate, got {v}"));
            }
        }
        if self.lr_dec_final > self.lr_dec_init {
            return bad("lr_dec_final exceeds lr_dec_init".into());
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return bad(format!("ema_alpha must lie in (0, 1), got {}", self.ema_alpha));
        }
        if !(self.momentum_dec >= 0.0 && self.momentum_dec < 1.0) {
            return bad(format!("momentum_dec must lie in [0, 1), got {}", self.momentum_dec));
        }
        if !(self.weight_decay_dec.is_finite() && self.weight_decay_dec >= 0.0) {
            return bad(format!("weight_decay_dec must be nonnegative, got {}", self.weight_decay_dec));
        }
        self.max_weights().validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.k_augment == 0 {
            return bad("k_augment must be at least 1".into());
        }
        if !(self.beta_param.is_finite() && self.beta_param > 0.0) {
            return bad(format!("beta_param must be positive, got {}", self.beta_param));
        }
        if self.labels_per_class == 0 {
            return bad("labels_per_class must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1 epoch".into());
        }
        if self.last_k_report == 0 {
            return bad("last_k_report must be at least 1".into());
        }
        Ok(())
    }

    /// Regularizer weights at the top of the shared ramp.
    pub fn max_weights(&self) -> LossWeights {
        LossWeights { lambda_u: self.lambda_u_max, lambda_aet: self.lambda_k, gamma: self.gamma }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            ssl: SslConfig {
                temperature: self.temperature,
                k_augment: self.k_augment,
                mix_alpha: self.beta_param,
                augment: self.augment,
                lambda_override: None,
            },
            aet_include_labeled: self.aet_include_labeled,
            families_enabled: self.families_enabled,
        }
    }

    /// Network shape for a dataset with the given image geometry.
    pub fn model_config(&self, input_channels: usize, num_classes: usize, image_hw: (usize, usize)) -> ModelConfig {
        ModelConfig {
            input_channels,
            num_classes,
            image_hw,
            stem_stride: self.stem_stride,
            widths: self.widths,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        for line in text.lines() {
            assert!(!line.starts_with('['), "flat file must not open a section: {line}");
        }
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);

        let paper = TrainConfig::paper();
        paper.validate().unwrap();
        assert_eq!(paper.batch_size, 128);
        assert_eq!(paper.epochs, 1024);
        assert_eq!(paper.lambda_u_max, 75.0);
        assert_eq!(paper.ema_alpha, 0.999);
        assert_eq!(paper.lr_enc_cls, 0.002);
        assert_eq!(paper.lambda_k, [1.0, 0.75, 0.5, 0.2, 0.05]);
        assert_eq!(paper.gamma, 0.2);
    }

    #[test]
    fn partial_config_file_fills_in_defaults() {
        let cfg = TrainConfig::from_toml("epochs = 3\nseed = 9\nlambda_u_max = 5.0\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lambda_u_max, 5.0);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(TrainConfig::from_toml("learning_rate = 0.1\n").is_err());

        let cases: &[fn(&mut TrainConfig)] = &[
            |c| c.batch_size = 0,
            |c| c.lr_enc_cls = 0.0,
            |c| c.lr_dec_init = -0.1,
            |c| c.lr_dec_final = 0.2,
            |c| c.ema_alpha = 1.0,
            |c| c.ema_alpha = 0.0,
            |c| c.momentum_dec = 1.0,
            |c| c.weight_decay_dec = -1.0,
            |c| c.lambda_k[2] = -0.5,
            |c| c.gamma = f64::NAN,
            |c| c.temperature = 0.0,
            |c| c.k_augment = 0,
            |c| c.beta_param = 0.0,
            |c| c.labels_per_class = 0,
            |c| c.eval_every = 0,
            |c| c.last_k_report = 0,
        ];
        for mutate in cases {
            let mut cfg = TrainConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err(), "expected rejection for {cfg:?}");
        }
    }
}