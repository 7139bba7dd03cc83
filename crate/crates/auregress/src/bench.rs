//! Regressor inference against per-image iterative fitting: wall time and
//! reconstruction quality on the same images.

use std::time::Instant;

use auregress_core::extractor::{RegionWeights, RepresentationValue, Segmenter};
use auregress_core::generator::Generator;
use auregress_core::metrics::{median, Timing};
use auregress_core::params::{encode_soft, ParamSpaceConfig, SoftParams};
use auregress_core::regressor::Regressor;
use auregress_core::training::{facial_content_loss, iterative_fit};
use auregress_core::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images: usize,
    pub iterative_steps: usize,
    pub timing: Timing,
    /// Mean content loss of generator reconstructions from regressor predictions.
    pub regressor_content: f64,
    /// Mean best content loss reached by iterative fitting.
    pub iterative_content: f64,
    /// `regressor_content / iterative_content`.
    pub content_ratio: f64,
    pub regressor_ms: Vec<f64>,
    pub iterative_ms: Vec<f64>,
}

pub struct BenchNets<'a> {
    pub segmenter: &'a Segmenter,
    pub generator: &'a Generator,
    pub regressor: &'a Regressor,
    pub region_weights: RegionWeights,
}

/// Content loss between the generator's rendering of `params` and a target representation.
pub fn reconstruction_loss(
    cfg: &ParamSpaceConfig,
    nets: &BenchNets<'_>,
    params: &SoftParams,
    target: &RepresentationValue,
) -> Result<f64> {
    let row = encode_soft(cfg, &params.pose, &params.au, &params.id, &params.brow)?;
    let image = nets.generator.generate_encoded(&[row])?;
    let rep = nets.segmenter.extract_values(&image, &nets.region_weights)?;
    let mut g = Graph::new();
    let a = rep.constant(&mut g);
    let b = target.constant(&mut g);
    let loss = facial_content_loss(&mut g, &a, &b)?;
    Ok(g.value(loss).item())
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Times regressor inference (extract + regress, one image at a time) and
/// `iterative_fit` on each image, after `warmup` untimed runs of both.
pub fn speed_bench(
    cfg: &ParamSpaceConfig,
    nets: &BenchNets<'_>,
    images: &[Tensor],
    iterative_steps: usize,
    step_size: f64,
    warmup: usize,
) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(AppError::Invalid("speed benchmark needs at least one image".into()));
    }
    let s = cfg.image_size;
    let single = |img: &Tensor| img.clone().reshape(&[1, 3, s, s]);
    for img in images.iter().cycle().take(warmup) {
        let x = single(img)?;
        nets.regressor.predict(nets.segmenter, &x, &nets.region_weights)?;
        iterative_fit(
            cfg,
            nets.segmenter,
            nets.generator,
            &nets.region_weights,
            &x,
            iterative_steps,
            step_size,
        )?;
    }
    let mut regressor_ms = Vec::with_capacity(images.len());
    let mut iterative_ms = Vec::with_capacity(images.len());
    let (mut reg_loss, mut fit_loss) = (0.0, 0.0);
    for img in images {
        let x = single(img)?;
        let t = Instant::now();
        let pred = nets.regressor.predict(nets.segmenter, &x, &nets.region_weights)?;
        regressor_ms.push(ms(t));

        let t = Instant::now();
        let fit = iterative_fit(
            cfg,
            nets.segmenter,
            nets.generator,
            &nets.region_weights,
            &x,
            iterative_steps,
            step_size,
        )?;
        iterative_ms.push(ms(t));

        let target = nets.segmenter.extract_values(&x, &nets.region_weights)?;
        reg_loss += reconstruction_loss(cfg, nets, &pred[0], &target)?;
        fit_loss += fit.loss;
    }
    let n = images.len() as f64;
    let (regressor_content, iterative_content) = (reg_loss / n, fit_loss / n);
    let r = median(&regressor_ms).expect("nonempty");
    let i = median(&iterative_ms).expect("nonempty");
    Ok(BenchReport {
        images: images.len(),
        iterative_steps,
        timing: Timing {
            regressor_ms: r,
            iterative_ms: i,
            speedup: i / r,
        },
        regressor_content,
        iterative_content,
        content_ratio: regressor_content / iterative_content,
        regressor_ms,
        iterative_ms,
    })
}
