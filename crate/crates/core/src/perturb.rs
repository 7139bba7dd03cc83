//! Photometric perturbation that turns clean renders into the "real" image
//! domain: flat background tint, brightness/contrast jitter, pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{FacialParams, ParamSpaceConfig};
use crate::render::{self, RenderOutput};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Photometric {
    /// Additive brightness shift drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Per-channel background tint offset drawn from `[-tint, tint]`.
    pub tint: f64,
}

impl Default for Photometric {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.1,
            noise: 0.02,
            tint: 0.15,
        }
    }
}

impl Photometric {
    /// Brightness, contrast and noise applied in place; values stay in [0, 1].
    pub fn jitter(&self, image: &mut Tensor, rng: &mut impl Rng) {
        let gain = 1.0 + rng.random_range(-1.0..=1.0) * self.contrast;
        let shift = rng.random_range(-1.0..=1.0) * self.brightness;
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("finite deviation");
        for v in image.data_mut() {
            let n = if self.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            *v = ((*v - 0.5) * gain + 0.5 + shift + n).clamp(0.0, 1.0);
        }
    }

    pub fn background(&self, rng: &mut impl Rng) -> [f64; 3] {
        let bg = render::style(0).expect("reference style").palette.background;
        bg.map(|c| (c + rng.random_range(-1.0..=1.0) * self.tint).clamp(0.0, 1.0))
    }

    /// Renders `params` over a random background, then jitters the pixels.
    pub fn render(&self, cfg: &ParamSpaceConfig, params: &FacialParams, rng: &mut impl Rng) -> Result<RenderOutput> {
        let bg = self.background(rng);
        let mut out = render::render_with_background(cfg, params, 0, Some(bg))?;
        self.jitter(&mut out.image, rng);
        Ok(out)
    }
}
