//! Facial parameter space: head pose, action units, continuous identity and
//! a discrete brow style.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POSE_DIM: usize = 2;
pub const BASE_POSE: f64 = 0.5;
pub const BASE_IDENTITY: f64 = 0.5;
pub const BASE_AU: f64 = 0.02;

/// Action unit channel meanings, in channel order.
pub mod au {
    pub const SMILE: usize = 0;
    pub const JAW_DROP: usize = 1;
    pub const BROW_RAISE: usize = 2;
    pub const EYE_CLOSE: usize = 3;
    pub const JAW_LEFT: usize = 4;
    pub const JAW_RIGHT: usize = 5;
    pub const NAMES: [&str; 6] = ["smile", "jaw-drop", "brow-raise", "eye-close", "jaw-left", "jaw-right"];
}

/// Continuous identity channel meanings, in channel order.
pub mod idc {
    pub const FACE_WIDTH: usize = 0;
    pub const FACE_HEIGHT: usize = 1;
    pub const EYE_SPACING: usize = 2;
    pub const EYE_SIZE: usize = 3;
    pub const EYE_HEIGHT: usize = 4;
    pub const BROW_HEIGHT: usize = 5;
    pub const BROW_THICKNESS: usize = 6;
    pub const NOSE_LENGTH: usize = 7;
    pub const NOSE_WIDTH: usize = 8;
    pub const MOUTH_WIDTH: usize = 9;
    pub const MOUTH_HEIGHT: usize = 10;
    pub const LIP_THICKNESS: usize = 11;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpaceConfig {
    pub au_dim: usize,
    pub id_cont_dim: usize,
    pub brow_styles: usize,
    pub image_size: usize,
}

impl Default for ParamSpaceConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ParamSpaceConfig {
    pub const fn desk() -> Self {
        Self {
            au_dim: 6,
            id_cont_dim: 12,
            brow_styles: 4,
            image_size: 64,
        }
    }

    pub const fn reference() -> Self {
        Self {
            au_dim: 23,
            id_cont_dim: 208,
            brow_styles: 36,
            image_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.au_dim < 2 || self.brow_styles < 2 || self.image_size < 16 {
            return Err(Error::invalid(alloc::format!(
                "parameter space needs au_dim >= 2, brow_styles >= 2, image_size >= 16: {self:?}"
            )));
        }
        Ok(())
    }

    /// Channel count with the brow style counted as one entry.
    pub fn channel_count(&self) -> usize {
        POSE_DIM + self.au_dim + self.id_cont_dim + 1
    }

    /// Length of the generator input: pose, AU, identity, brow distribution.
    pub fn encoded_len(&self) -> usize {
        POSE_DIM + self.au_dim + self.id_cont_dim + self.brow_styles
    }

    /// The mutually exclusive AU pair (jaw-left, jaw-right on the desk layout).
    pub fn exclusive_pair(&self) -> (usize, usize) {
        if self.au_dim > au::JAW_RIGHT {
            (au::JAW_LEFT, au::JAW_RIGHT)
        } else {
            (self.au_dim - 2, self.au_dim - 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacialParams {
    pub pose: [f64; 2],
    pub au: Vec<f64>,
    pub id: Vec<f64>,
    pub brow: usize,
}

impl FacialParams {
    pub fn base(cfg: &ParamSpaceConfig) -> Self {
        Self {
            pose: [BASE_POSE; 2],
            au: vec![BASE_AU; cfg.au_dim],
            id: vec![BASE_IDENTITY; cfg.id_cont_dim],
            brow: 0,
        }
    }

    /// Every channel uniform on [0, 1], brow style uniform.
    pub fn sample(seed: u64, cfg: &ParamSpaceConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(&mut rng, cfg)
    }

    pub fn sample_with(rng: &mut impl Rng, cfg: &ParamSpaceConfig) -> Self {
        let pose = [rng.random::<f64>(), rng.random::<f64>()];
        let au = (0..cfg.au_dim).map(|_| rng.random::<f64>()).collect();
        let id = (0..cfg.id_cont_dim).map(|_| rng.random::<f64>()).collect();
        let brow = rng.random_range(0..cfg.brow_styles);
        Self { pose, au, id, brow }
    }

    /// Like [`sample_with`](Self::sample_with), but at most one side of the
    /// exclusive AU pair is active; the other rests at the base value.
    pub fn sample_exclusive_with(rng: &mut impl Rng, cfg: &ParamSpaceConfig) -> Self {
        let mut p = Self::sample_with(rng, cfg);
        let (a, b) = cfg.exclusive_pair();
        let rest = if rng.random::<bool>() { a } else { b };
        p.au[rest] = BASE_AU;
        p
    }

    pub fn validate(&self, cfg: &ParamSpaceConfig) -> Result<()> {
        if self.au.len() != cfg.au_dim || self.id.len() != cfg.id_cont_dim {
            return Err(Error::shape(
                "params",
                alloc::format!(
                    "expected {} AU and {} identity channels, got {} and {}",
                    cfg.au_dim,
                    cfg.id_cont_dim,
                    self.au.len(),
                    self.id.len()
                ),
            ));
        }
        for (channel, value) in self.continuous().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::ParamRange { channel, value });
            }
        }
        if self.brow >= cfg.brow_styles {
            return Err(Error::BrowStyle {
                index: self.brow,
                styles: cfg.brow_styles,
            });
        }
        Ok(())
    }

    /// Pose, AU and identity channels in flat order.
    pub fn continuous(&self) -> impl Iterator<Item = f64> + '_ {
        self.pose.iter().chain(&self.au).chain(&self.id).copied()
    }

    /// Generator input with a one-hot brow slot.
    pub fn encode(&self, cfg: &ParamSpaceConfig) -> Result<Vec<f64>> {
        if self.brow >= cfg.brow_styles {
            return Err(Error::BrowStyle {
                index: self.brow,
                styles: cfg.brow_styles,
            });
        }
        let mut brow = vec![0.0; cfg.brow_styles];
        brow[self.brow] = 1.0;
        encode_soft(cfg, &self.pose, &self.au, &self.id, &brow)
    }
}

/// Generator input with a probability vector in the brow slot.
pub fn encode_soft(cfg: &ParamSpaceConfig, pose: &[f64], au: &[f64], id: &[f64], brow: &[f64]) -> Result<Vec<f64>> {
    if pose.len() != POSE_DIM || au.len() != cfg.au_dim || id.len() != cfg.id_cont_dim || brow.len() != cfg.brow_styles
    {
        return Err(Error::shape(
            "encode",
            alloc::format!(
                "lengths pose {} au {} id {} brow {} do not fit {:?}",
                pose.len(),
                au.len(),
                id.len(),
                brow.len(),
                cfg
            ),
        ));
    }
    let total: f64 = brow.iter().sum();
    if brow.iter().any(|&p| p < 0.0) || libm::fabs(total - 1.0) > 1e-6 {
        return Err(Error::invalid(alloc::format!(
            "brow slot is not a distribution (sum {total})"
        )));
    }
    Ok(pose.iter().chain(au).chain(id).chain(brow).copied().collect())
}

/// Regressor output: continuous channels plus a brow distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftParams {
    pub pose: [f64; 2],
    pub au: Vec<f64>,
    pub id: Vec<f64>,
    pub brow: Vec<f64>,
}

impl SoftParams {
    /// Hard parameters with the most probable brow style.
    pub fn hard(&self) -> FacialParams {
        let brow = self
            .brow
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &p)| if p > best.1 { (i, p) } else { best },
            )
            .0;
        FacialParams {
            pose: self.pose,
            au: self.au.clone(),
            id: self.id.clone(),
            brow,
        }
    }

    pub fn from_hard(p: &FacialParams, cfg: &ParamSpaceConfig) -> Self {
        let mut brow = vec![0.0; cfg.brow_styles];
        brow[p.brow.min(cfg.brow_styles - 1)] = 1.0;
        Self {
            pose: p.pose,
            au: p.au.clone(),
            id: p.id.clone(),
            brow,
        }
    }
}
