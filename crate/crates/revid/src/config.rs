//! TOML experiment configuration.
//!
//! Every field has a default carrying the reported hyperparameters (KL
//! weight 0.1, three-step sequences, learning rate 1e-4 decaying by 0.1,
//! stage lengths 70/50/70), so an empty file is a complete, runnable
//! experiment on the bundled synthetic dataset. Validation checks the whole
//! document and reports every violated field at once, each message naming
//! the field it refers to.

use crate::data::{AugmentParams, SyntheticSpec};
use crate::eval::Metric;
use crate::losses::KlForm;
use crate::optim::LrSchedule;
use crate::pipeline::{
    BackboneKind, ModelConfig, PipelineError, Regime, TrainOptions, TrainPlan,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Errors from reading, parsing, or validating a configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {}", violations.join("; "))]
    Invalid { violations: Vec<String> },
}

/// Where training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Generate the seeded synthetic corpus described by the sibling fields.
    #[default]
    Synthetic,
    /// Load instances from a feature file at `train_path`.
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Identities in the synthetic corpus.
    pub num_identities: usize,
    /// Images per identity per viewpoint.
    pub images_per_identity: usize,
    /// Camera viewpoints.
    pub viewpoint_count: usize,
    /// Per-pixel noise standard deviation.
    pub noise_scale: f64,
    /// Feature file holding training instances (`kind = "features"`).
    pub train_path: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            num_identities: 10,
            images_per_identity: 6,
            viewpoint_count: 3,
            noise_scale: 0.02,
            train_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    /// Hidden width of the MLP backbone; ignored for passthrough.
    pub backbone_hidden: usize,
    /// Backbone output width. Omitted means "same as the input width",
    /// which is the only valid choice for the passthrough backbone.
    pub feature_width: Option<usize>,
    pub vfl_width: usize,
    pub lstm_units: usize,
    pub time_steps: usize,
    pub alpha: f64,
    pub kl_form: KlForm,
    pub sample_latent: bool,
    pub l2_normalize_parts: bool,
    pub regime: Regime,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Passthrough,
            backbone_hidden: 64,
            feature_width: None,
            vfl_width: 64,
            lstm_units: 64,
            time_steps: 3,
            alpha: 0.1,
            kl_form: KlForm::Paper,
            sample_latent: false,
            l2_normalize_parts: false,
            regime: Regime::Separate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub epochs: usize,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub backbone: StageSection,
    pub vfl: StageSection,
    pub lstm: StageSection,
    /// Stage settings for the `joint_vfl` regime.
    pub joint: StageSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 16,
            initial_lr: 1e-4,
            decay_factor: 0.1,
            backbone: StageSection {
                epochs: 70,
                decay_every: 30,
            },
            vfl: StageSection {
                epochs: 50,
                decay_every: 20,
            },
            lstm: StageSection {
                epochs: 70,
                decay_every: 30,
            },
            joint: StageSection {
                epochs: 50,
                decay_every: 20,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Crop area fraction range.
    pub crop_min: f64,
    pub crop_max: f64,
    /// Maximum rotation in degrees, either direction.
    pub rotate_degrees: f64,
    /// Brightness multiplier range.
    pub brightness_min: f64,
    pub brightness_max: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            crop_min: 0.8,
            crop_max: 1.0,
            rotate_degrees: 15.0,
            brightness_min: 0.8,
            brightness_max: 1.2,
        }
    }
}

/// The whole experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub metric: Metric,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentSection,
}

/// Reads and parses a config file. The result is not yet validated; call
/// [`Config::validate`] before building anything from it.
pub fn load_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_owned(),
        source: Box::new(source),
    })
}

impl Config {
    /// Checks every field and returns all violations together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut violations = Vec::new();
        let mut check = |ok: bool, message: &str| {
            if !ok {
                violations.push(message.to_owned());
            }
        };

        match self.dataset.kind {
            DatasetKind::Synthetic => {
                check(
                    self.dataset.num_identities >= 2,
                    "dataset.num_identities must be at least 2",
                );
                check(
                    self.dataset.images_per_identity >= 1,
                    "dataset.images_per_identity must be at least 1",
                );
                check(
                    self.dataset.viewpoint_count >= 1,
                    "dataset.viewpoint_count must be at least 1",
                );
                check(
                    self.dataset.noise_scale.is_finite() && self.dataset.noise_scale >= 0.0,
                    "dataset.noise_scale must be finite and >= 0",
                );
            }
            DatasetKind::Features => {
                check(
                    self.dataset.train_path.is_some(),
                    "dataset.train_path is required when dataset.kind = \"features\"",
                );
            }
        }

        if self.model.backbone == BackboneKind::MlpStub {
            check(
                self.model.backbone_hidden >= 1,
                "model.backbone_hidden must be positive for the mlp_stub backbone",
            );
        }
        if let Some(f) = self.model.feature_width {
            check(f >= 1, "model.feature_width must be positive");
        }
        check(self.model.vfl_width >= 1, "model.vfl_width must be positive");
        check(self.model.lstm_units >= 1, "model.lstm_units must be positive");
        check(
            self.model.time_steps >= 1,
            "model.time_steps must be at least 1",
        );
        check(
            self.model.alpha.is_finite() && self.model.alpha >= 0.0,
            "model.alpha must be finite and >= 0",
        );

        check(
            self.train.batch_size >= 1,
            "train.batch_size must be at least 1",
        );
        check(
            self.train.initial_lr.is_finite() && self.train.initial_lr > 0.0,
            "train.initial_lr must be finite and > 0",
        );
        check(
            self.train.decay_factor.is_finite()
                && self.train.decay_factor > 0.0
                && self.train.decay_factor <= 1.0,
            "train.decay_factor must be in (0, 1]",
        );
        for (name, stage) in [
            ("backbone", &self.train.backbone),
            ("vfl", &self.train.vfl),
            ("lstm", &self.train.lstm),
            ("joint", &self.train.joint),
        ] {
            check(
                stage.epochs >= 1,
                &format!("train.{name}.epochs must be at least 1"),
            );
            check(
                stage.decay_every >= 1,
                &format!("train.{name}.decay_every must be at least 1"),
            );
        }

        check(
            self.augment.crop_min > 0.0
                && self.augment.crop_min <= self.augment.crop_max
                && self.augment.crop_max <= 1.0,
            "augment.crop_min/crop_max must satisfy 0 < min <= max <= 1",
        );
        check(
            self.augment.rotate_degrees.is_finite() && self.augment.rotate_degrees >= 0.0,
            "augment.rotate_degrees must be finite and >= 0",
        );
        check(
            self.augment.brightness_min >= 0.0
                && self.augment.brightness_min <= self.augment.brightness_max
                && self.augment.brightness_max.is_finite(),
            "augment.brightness_min/brightness_max must satisfy 0 <= min <= max",
        );

        if violations.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid { violations })
        }
    }

    /// The synthetic generation spec, when the dataset is synthetic.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self.dataset.kind {
            DatasetKind::Synthetic => Some(SyntheticSpec {
                num_identities: self.dataset.num_identities,
                images_per_identity: self.dataset.images_per_identity,
                viewpoint_count: self.dataset.viewpoint_count,
                noise_scale: self.dataset.noise_scale,
                seed: self.seed,
            }),
            DatasetKind::Features => None,
        }
    }

    /// Builds the model configuration once the input width and identity
    /// count are known from the data.
    pub fn model_config(&self, input_width: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_width,
            backbone: self.model.backbone,
            backbone_hidden: self.model.backbone_hidden,
            feature_width: self.model.feature_width.unwrap_or(input_width),
            vfl_width: self.model.vfl_width,
            lstm_units: self.model.lstm_units,
            num_classes,
            time_steps: self.model.time_steps,
            alpha: self.model.alpha,
            kl_form: self.model.kl_form,
            sample_latent: self.model.sample_latent,
            l2_normalize_parts: self.model.l2_normalize_parts,
            regime: self.model.regime,
        }
    }

    /// Builds the stage plan for the configured regime.
    pub fn train_plan(&self) -> Result<TrainPlan, PipelineError> {
        let schedule = |stage: &StageSection| {
            LrSchedule::new(self.train.initial_lr, self.train.decay_factor, stage.decay_every)
        };
        Ok(match self.model.regime {
            Regime::Separate => TrainPlan::separate(
                (self.train.backbone.epochs, schedule(&self.train.backbone)?),
                (self.train.vfl.epochs, schedule(&self.train.vfl)?),
                (self.train.lstm.epochs, schedule(&self.train.lstm)?),
            ),
            Regime::JointVfl => {
                TrainPlan::joint_vfl(self.train.joint.epochs, schedule(&self.train.joint)?)
            }
        })
    }

    /// Builds the run-level training options.
    pub fn train_options(&self) -> Result<TrainOptions, ConfigError> {
        let augment = AugmentParams::new(
            (self.augment.crop_min, self.augment.crop_max),
            self.augment.rotate_degrees,
            (self.augment.brightness_min, self.augment.brightness_max),
        )
        .map_err(|e| ConfigError::Invalid {
            violations: vec![format!("augment: {e}")],
        })?;
        Ok(TrainOptions {
            batch_size: self.train.batch_size,
            seed: self.seed,
            augment,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_yields_the_reported_defaults() {
        let config: Config = toml::from_str("").unwrap();
        assert_eq!(config, Config::default());
        config.validate().unwrap();
        assert_eq!(config.model.alpha, 0.1);
        assert_eq!(config.model.time_steps, 3);
        assert_eq!(config.train.initial_lr, 1e-4);
        assert_eq!(config.train.decay_factor, 0.1);
        assert_eq!(config.train.backbone.epochs, 70);
        assert_eq!(config.train.backbone.decay_every, 30);
        assert_eq!(config.train.vfl.epochs, 50);
        assert_eq!(config.train.vfl.decay_every, 20);
        assert_eq!(config.train.lstm.epochs, 70);
        assert_eq!(config.metric, Metric::Cosine);
        assert_eq!(config.model.regime, Regime::Separate);
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let config: Config = toml::from_str(
            "seed = 7\n[model]\nlstm_units = 128\n[train]\nbatch_size = 4\n",
        )
        .unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.model.lstm_units, 128);
        assert_eq!(config.model.vfl_width, 64);
        assert_eq!(config.train.batch_size, 4);
        assert_eq!(config.train.initial_lr, 1e-4);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = toml::from_str::<Config>("[model]\nwidht = 3\n").unwrap_err();
        assert!(err.to_string().contains("widht"));
    }

    #[test]
    fn enum_fields_parse_their_snake_case_names() {
        let config: Config = toml::from_str(
            "metric = \"euclidean\"\n[model]\nbackbone = \"mlp_stub\"\nkl_form = \"standard\"\nregime = \"joint_vfl\"\n",
        )
        .unwrap();
        assert_eq!(config.metric, Metric::Euclidean);
        assert_eq!(config.model.backbone, BackboneKind::MlpStub);
        assert_eq!(config.model.kl_form, KlForm::Standard);
        assert_eq!(config.model.regime, Regime::JointVfl);
    }

    #[test]
    fn validation_collects_every_violation_with_field_names() {
        let mut config = Config::default();
        config.dataset.num_identities = 1;
        config.model.vfl_width = 0;
        config.model.alpha = -0.5;
        config.train.batch_size = 0;
        config.train.vfl.epochs = 0;
        config.augment.crop_min = 0.0;
        let err = config.validate().unwrap_err();
        let ConfigError::Invalid { violations } = &err else {
            panic!("expected Invalid, got {err:?}");
        };
        assert_eq!(violations.len(), 6);
        let text = err.to_string();
        for field in [
            "dataset.num_identities",
            "model.vfl_width",
            "model.alpha",
            "train.batch_size",
            "train.vfl.epochs",
            "augment.crop_min",
        ] {
            assert!(text.contains(field), "missing {field} in: {text}");
        }
    }

    #[test]
    fn features_kind_requires_a_train_path() {
        let mut config = Config::default();
        config.dataset.kind = DatasetKind::Features;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("dataset.train_path"));
        config.dataset.train_path = Some(PathBuf::from("train.tsv"));
        config.validate().unwrap();
        assert!(config.synthetic_spec().is_none());
    }

    #[test]
    fn model_config_derives_feature_width_from_the_input() {
        let config = Config::default();
        let mc = config.model_config(256, 10);
        assert_eq!(mc.feature_width, 256);
        assert_eq!(mc.num_classes, 10);
        mc.validate().unwrap();

        let mut config = Config::default();
        config.model.backbone = BackboneKind::MlpStub;
        config.model.feature_width = Some(32);
        let mc = config.model_config(256, 10);
        assert_eq!(mc.feature_width, 32);
    }

    #[test]
    fn train_plan_matches_the_regime() {
        let config = Config::default();
        let plan = config.train_plan().unwrap();
        assert_eq!(plan.stages.len(), 3);
        assert_eq!(plan.stages[0].name, "backbone");
        assert_eq!(plan.stages[0].epochs, 70);
        assert_eq!(plan.stages[0].schedule.lr_at(0), 1e-4);
        assert_eq!(plan.stages[1].schedule.lr_at(20), 1e-5);

        let mut config = Config::default();
        config.model.regime = Regime::JointVfl;
        let plan = config.train_plan().unwrap();
        assert_eq!(plan.stages.len(), 1);
        assert_eq!(plan.stages[0].name, "joint_vfl");
        assert_eq!(plan.stages[0].epochs, 50);
    }

    #[test]
    fn load_config_reports_missing_files_with_the_path() {
        let err = load_config(Path::new("/nonexistent/config.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/config.toml"));
    }

    #[test]
    fn synthetic_spec_uses_the_global_seed() {
        let mut config = Config::default();
        config.seed = 99;
        let spec = config.synthetic_spec().unwrap();
        assert_eq!(spec.seed, 99);
        assert_eq!(spec.num_identities, 10);
        assert_eq!(spec.viewpoint_count, 3);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut config = Config::default();
        config.seed = 3;
        config.model.lstm_units = 256;
        config.dataset.train_path = Some(PathBuf::from("x.tsv"));
        let text = toml::to_string(&config).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }
}
