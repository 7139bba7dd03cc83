//! Agreement metrics for AU intensity: ICC(3,1) and mean absolute error,
//! per-channel evaluation reports and the loss-ablation variants.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{au, FacialParams, ParamSpaceConfig, SoftParams};
use crate::training::LossWeights;

/// AU intensities are reported on a 0–5 scale.
pub const INTENSITY_SCALE: f64 = 5.0;

/// ICC(3,1) between two raters (consistency, single measures).
///
/// With two raters the two-way mean squares reduce to
/// `2 cov(p, g) / (var(p) + var(g))`.
pub fn icc31(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(alloc::format!(
            "icc31 length mismatch {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len();
    if n < 3 {
        return Err(Error::UndefinedMetric(alloc::format!(
            "icc31 needs at least 3 targets, got {n}"
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mp, mg) = (mean(pred), mean(gt));
    let (mut spp, mut sgg, mut spg) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        spp += dp * dp;
        sgg += dg * dg;
        spg += dp * dg;
    }
    // a constant rater carries no consistency information
    let tol = 1e-12 * (1.0 + mp.abs().max(mg.abs())).powi(2) * n as f64;
    if spp <= tol || sgg <= tol {
        return Err(Error::UndefinedMetric("icc31 with a constant rater".to_string()));
    }
    Ok((2.0 * spg / (spp + sgg)).clamp(-1.0, 1.0))
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(alloc::format!(
            "mae length mismatch {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("mae of empty input"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Median of a non-empty list.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMetrics {
    pub channel: String,
    /// `None` when ICC is undefined for this channel.
    pub icc: Option<f64>,
    pub mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub regressor_ms: f64,
    pub iterative_ms: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub channels: Vec<ChannelMetrics>,
    /// Mean ICC over channels where it is defined.
    pub avg_icc: f64,
    pub undefined_icc: usize,
    pub avg_mae: f64,
    pub samples: usize,
    /// Fraction of samples with both sides of the exclusive AU pair above 0.3.
    pub exclusive_overlap: f64,
    pub timing: Option<Timing>,
    pub fingerprint: String,
}

fn channel_name(cfg: &ParamSpaceConfig, c: usize) -> String {
    if cfg.au_dim == au::NAMES.len() {
        au::NAMES[c].to_string()
    } else {
        alloc::format!("au{c}")
    }
}

/// Per-AU ICC and MAE on the 0–5 scale.
pub fn evaluate(cfg: &ParamSpaceConfig, predicted: &[SoftParams], truth: &[FacialParams]) -> Result<EvalReport> {
    if truth.is_empty() || predicted.len() != truth.len() {
        return Err(Error::invalid(alloc::format!(
            "evaluation needs ground truth for every prediction ({} predictions, {} labels)",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.iter().any(|p| p.au.len() != cfg.au_dim) || truth.iter().any(|t| t.au.len() != cfg.au_dim) {
        return Err(Error::shape("evaluate", "AU vectors do not match the configuration"));
    }
    let mut channels = Vec::with_capacity(cfg.au_dim);
    for c in 0..cfg.au_dim {
        let p: Vec<f64> = predicted.iter().map(|s| s.au[c] * INTENSITY_SCALE).collect();
        let g: Vec<f64> = truth.iter().map(|s| s.au[c] * INTENSITY_SCALE).collect();
        let icc = match icc31(&p, &g) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        channels.push(ChannelMetrics {
            channel: channel_name(cfg, c),
            icc,
            mae: mae(&p, &g)?,
        });
    }
    let defined: Vec<f64> = channels.iter().filter_map(|c| c.icc).collect();
    let avg_icc = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let avg_mae = channels.iter().map(|c| c.mae).sum::<f64>() / channels.len() as f64;
    let (a, b) = cfg.exclusive_pair();
    let overlap = predicted.iter().filter(|p| p.au[a] > 0.3 && p.au[b] > 0.3).count();
    Ok(EvalReport {
        undefined_icc: channels.len() - defined.len(),
        channels,
        avg_icc,
        avg_mae,
        samples: truth.len(),
        exclusive_overlap: overlap as f64 / truth.len() as f64,
        timing: None,
        fingerprint: String::new(),
    })
}

/// The full weights plus one variant per auxiliary loss with that weight set to 0.
pub fn ablation_variants(full: &LossWeights) -> [(&'static str, LossWeights); 5] {
    [
        ("full", *full),
        ("no-identity", LossWeights { w_id: 0.0, ..*full }),
        ("no-loopback", LossWeights { w_lp: 0.0, ..*full }),
        ("no-parameter", LossWeights { w_pr: 0.0, ..*full }),
        ("no-adversarial", LossWeights { w_adv: 0.0, ..*full }),
    ]
}
