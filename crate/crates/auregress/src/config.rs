//! Run configuration: one JSON document holding every hyperparameter, seed
//! and dataset size, plus the stage fingerprints derived from it.

use std::collections::BTreeMap;
use std::path::Path;

use auregress_core::extractor::{RegionWeights, SegmenterTraining};
use auregress_core::generator::GeneratorTraining;
use auregress_core::identity::IdentityTraining;
use auregress_core::params::ParamSpaceConfig;
use auregress_core::perturb::Photometric;
use auregress_core::training::RegressorTraining;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetKind, DatasetSpec};
use crate::error::{AppError, Result};

pub const SEED_ENV: &str = "AUREGRESS_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Clean renders with masks; the generator's training pairs come first.
    pub clean_train: usize,
    /// Clean renders held out for segmenter and generator scoring.
    pub clean_held_out: usize,
    /// Unlabelled perturbed images for regressor training.
    pub real: usize,
    /// Perturbed images with ground truth, used only for evaluation.
    pub eval: usize,
    pub photometric: Photometric,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clean_train: 5000,
            clean_held_out: 500,
            real: 2000,
            eval: 500,
            photometric: Photometric::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterStage {
    pub train_images: usize,
    pub held_out_images: usize,
    pub training: SegmenterTraining,
}

impl Default for SegmenterStage {
    fn default() -> Self {
        Self {
            train_images: 2000,
            held_out_images: 200,
            training: SegmenterTraining::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityStage {
    pub embedding_dim: usize,
    pub training: IdentityTraining,
}

impl Default for IdentityStage {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            training: IdentityTraining::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorStage {
    pub pairs: usize,
    pub training: GeneratorTraining,
}

impl Default for GeneratorStage {
    fn default() -> Self {
        Self {
            pairs: 5000,
            training: GeneratorTraining::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Evaluation images timed (and fitted) by the speed benchmark.
    pub images: usize,
    pub iterative_steps: usize,
    pub step_size: f64,
    /// Untimed runs before measuring.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            images: 50,
            iterative_steps: 100,
            step_size: 0.02,
            warmup: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Unlabelled images each ablation variant trains on.
    pub images: usize,
    pub epochs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            images: 1000,
            epochs: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: ParamSpaceConfig,
    /// Seed of the synthetic datasets.
    pub seed: u64,
    pub data: DataConfig,
    pub region_weights: RegionWeights,
    pub segmenter: SegmenterStage,
    pub identity: IdentityStage,
    pub generator: GeneratorStage,
    pub regressor: RegressorTraining,
    pub bench: BenchConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            space: ParamSpaceConfig::desk(),
            seed: 7,
            data: DataConfig::default(),
            region_weights: RegionWeights::default(),
            segmenter: SegmenterStage::default(),
            identity: IdentityStage::default(),
            generator: GeneratorStage::default(),
            regressor: RegressorTraining {
                epochs: 20,
                ..RegressorTraining::default()
            },
            bench: BenchConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    /// A 32-pixel configuration with tiny datasets and single-epoch stages,
    /// for smoke tests of the whole pipeline.
    pub fn smoke() -> Self {
        let d = Self::default();
        let space = ParamSpaceConfig {
            image_size: 32,
            ..ParamSpaceConfig::desk()
        };
        Self {
            space,
            data: DataConfig {
                clean_train: 48,
                clean_held_out: 16,
                real: 24,
                eval: 20,
                ..d.data
            },
            segmenter: SegmenterStage {
                train_images: 48,
                held_out_images: 16,
                training: SegmenterTraining {
                    epochs: 1,
                    ..d.segmenter.training
                },
            },
            identity: IdentityStage {
                embedding_dim: 16,
                training: IdentityTraining {
                    n_identities: 6,
                    renders_per_identity: 4,
                    held_out_identities: 3,
                    epochs: 1,
                    batch: 8,
                    ..d.identity.training
                },
            },
            generator: GeneratorStage {
                pairs: 48,
                training: GeneratorTraining {
                    epochs: 1,
                    batch: 16,
                    ..d.generator.training
                },
            },
            regressor: RegressorTraining {
                epochs: 1,
                batch: 8,
                shape: auregress_core::regressor::RegressorShape {
                    fusion_size: 4,
                    conv_channels: 8,
                    hidden: 32,
                    se_ratio: 4,
                },
                ..d.regressor
            },
            bench: BenchConfig {
                images: 4,
                iterative_steps: 5,
                warmup: 1,
                ..d.bench
            },
            ablation: AblationConfig { images: 16, epochs: 1 },
            ..d
        }
    }
}

/// The datasets a run generates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Clean,
    Real,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Clean, Split::Real, Split::Eval];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Clean => "clean",
            Split::Real => "real",
            Split::Eval => "eval",
        }
    }
}

/// Hex SHA-256 of a tag and the JSON form of `value`.
pub fn digest(tag: &str, value: &impl Serialize) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(value).expect("config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Expected fingerprint of every stage output for a configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub config: String,
    pub clean: String,
    pub real: String,
    pub eval: String,
    pub segmenter: String,
    pub identity: String,
    pub generator: String,
    pub regressor: String,
}

pub type Upstream = BTreeMap<String, String>;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::fsutil::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.space.validate()?;
        self.regressor.weights.validate()?;
        let d = &self.data;
        let problems = [
            (
                self.segmenter.train_images > d.clean_train,
                "segmenter.train_images exceeds data.clean_train",
            ),
            (
                self.segmenter.held_out_images > d.clean_held_out,
                "segmenter.held_out_images exceeds data.clean_held_out",
            ),
            (
                self.generator.pairs > d.clean_train,
                "generator.pairs exceeds data.clean_train",
            ),
            (self.generator.pairs == 0, "generator.pairs must be positive"),
            (d.real < 2, "data.real needs at least two images"),
            (d.eval < 3, "data.eval needs at least three images"),
            (self.ablation.images > d.real, "ablation.images exceeds data.real"),
            (self.bench.images > d.eval, "bench.images exceeds data.eval"),
            (
                self.region_weights.0.iter().any(|w| *w < 0.0),
                "region weights must be nonnegative",
            ),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(AppError::Config(msg.to_string())),
            None => Ok(()),
        }
    }

    /// Replaces the dataset seed and every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.segmenter.training.seed = seed;
        self.identity.training.seed = seed;
        self.generator.training.seed = seed;
        self.regressor.seed = seed;
        self
    }

    /// Applies the seed override from the environment, when set.
    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| AppError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        let (kind, count, stream) = match split {
            Split::Clean => (DatasetKind::Clean, self.data.clean_train + self.data.clean_held_out, 1),
            Split::Real => (DatasetKind::Perturbed, self.data.real, 2),
            Split::Eval => (DatasetKind::Perturbed, self.data.eval, 3),
        };
        DatasetSpec {
            kind,
            count,
            seed: self.seed,
            stream,
            photometric: self.data.photometric,
        }
    }

    /// Hash of the whole configuration.
    pub fn fingerprint(&self) -> String {
        digest("config", self)
    }

    pub fn dataset_fingerprint(&self, split: Split) -> String {
        digest("dataset", &(self.space, self.dataset_spec(split)))
    }

    pub fn segmenter_fingerprint(&self, up: &Upstream) -> String {
        digest("segmenter", &(self.space, self.segmenter, self.data.clean_train, up))
    }

    pub fn identity_fingerprint(&self) -> String {
        digest("identity", &(self.space, self.identity))
    }

    pub fn generator_fingerprint(&self, up: &Upstream) -> String {
        digest("generator", &(self.space, self.generator, self.data.clean_train, up))
    }

    pub fn regressor_fingerprint(&self, up: &Upstream) -> String {
        digest("regressor", &(self.space, self.regressor, self.region_weights, up))
    }

    pub fn segmenter_upstream(&self, clean: &str) -> Upstream {
        Upstream::from([("clean".into(), clean.into())])
    }

    /// The generator depends on the extractor only through its perceptual term.
    pub fn generator_upstream(&self, clean: &str, segmenter: &str) -> Upstream {
        let mut up = Upstream::from([("clean".into(), clean.into())]);
        if self.generator.training.lambda_per > 0.0 {
            up.insert("segmenter".into(), segmenter.into());
        }
        up
    }

    pub fn regressor_upstream(&self, real: &str, segmenter: &str, identity: &str, generator: &str) -> Upstream {
        Upstream::from([
            ("real".into(), real.into()),
            ("segmenter".into(), segmenter.into()),
            ("identity".into(), identity.into()),
            ("generator".into(), generator.into()),
        ])
    }

    pub fn fingerprints(&self) -> Fingerprints {
        let clean = self.dataset_fingerprint(Split::Clean);
        let real = self.dataset_fingerprint(Split::Real);
        let eval = self.dataset_fingerprint(Split::Eval);
        let segmenter = self.segmenter_fingerprint(&self.segmenter_upstream(&clean));
        let identity = self.identity_fingerprint();
        let generator = self.generator_fingerprint(&self.generator_upstream(&clean, &segmenter));
        let regressor = self.regressor_fingerprint(&self.regressor_upstream(&real, &segmenter, &identity, &generator));
        Fingerprints {
            config: self.fingerprint(),
            clean,
            real,
            eval,
            segmenter,
            identity,
            generator,
            regressor,
        }
    }
}
