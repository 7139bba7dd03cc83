//! Parameter regressor: four heads reading the facial representation.
//!
//! Each head runs fusion -> strided conv + batch norm -> attention -> FC ->
//! attention -> FC. The pose head reads only the global feature, the identity
//! and AU heads read the eye, nose, mouth and face maps, and the brow head reads
//! the brow map.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::extractor::{region, Representation, RepresentationValue, Segmenter, REGION_COUNT};
use crate::nn::{BatchNorm, Bound, Conv2d, Linear, NormPass, ParamStore, SeBlock};
use crate::params::{ParamSpaceConfig, SoftParams, POSE_DIM};
use crate::tensor::Tensor;

/// Encoder stage feeding each region, in region order.
const REGION_STAGE: [usize; REGION_COUNT] = [0, 0, 1, 1, 2];
/// Regions read by the identity and AU heads.
const SHAPE_REGIONS: [usize; 4] = [region::EYES, region::NOSE, region::MOUTH, region::FACE];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorShape {
    /// Common spatial side the fused maps are pooled to.
    pub fusion_size: usize,
    pub conv_channels: usize,
    pub hidden: usize,
    pub se_ratio: usize,
}

impl Default for RegressorShape {
    fn default() -> Self {
        Self {
            fusion_size: 8,
            conv_channels: 32,
            hidden: 256,
            se_ratio: 4,
        }
    }
}

/// Average-pools each `[n, c_i, h_i, w_i]` map to `size x size` and
/// concatenates along channels.
pub fn feature_fusion(g: &mut Graph, maps: &[Var], size: usize) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::invalid("feature fusion needs at least one map"));
    }
    let mut pooled = Vec::with_capacity(maps.len());
    for &m in maps {
        let s = g.shape(m).to_vec();
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] != s[2] {
            return Err(Error::shape(
                "feature-fusion",
                alloc::format!("cannot pool {s:?} to {size}x{size}"),
            ));
        }
        pooled.push(g.avg_pool(m, s[2] / size)?);
    }
    if pooled.len() == 1 {
        return Ok(pooled[0]);
    }
    g.concat(&pooled, 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Output {
    Sigmoid,
    Softmax,
}

#[derive(Clone, Debug)]
struct Head {
    fusion_size: usize,
    conv: Conv2d,
    norm: BatchNorm,
    se1: SeBlock,
    fc1: Linear,
    se2: SeBlock,
    fc2: Linear,
    output: Output,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        fusion_size: usize,
        out: usize,
        output: Output,
        shape: &RegressorShape,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = shape.conv_channels;
        let conv = Conv2d::new(store, &alloc::format!("{name}.conv"), in_channels, c, 3, 2, 1, rng);
        let norm = BatchNorm::new(store, &alloc::format!("{name}.norm"), c);
        let side = fusion_size.div_ceil(2);
        let flat = c * side * side;
        let se1 = SeBlock::new(store, &alloc::format!("{name}.att1"), flat, shape.se_ratio, rng)?;
        let fc1 = Linear::new(store, &alloc::format!("{name}.fc1"), flat, shape.hidden, rng);
        let se2 = SeBlock::new(store, &alloc::format!("{name}.att2"), shape.hidden, shape.se_ratio, rng)?;
        let fc2 = Linear::new(store, &alloc::format!("{name}.fc2"), shape.hidden, out, rng);
        fc2.scale_weights(store, 0.1);
        Ok(Self {
            fusion_size,
            conv,
            norm,
            se1,
            fc1,
            se2,
            fc2,
            output,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        store: &ParamStore,
        maps: &[Var],
        pass: &mut NormPass<'_>,
    ) -> Result<Var> {
        let fused = feature_fusion(g, maps, self.fusion_size)?;
        let h = self.conv.forward(g, p, fused)?;
        let h = self.norm.forward(g, p, store, h, pass)?;
        let h = g.relu(h);
        let h = g.flatten(h)?;
        let h = self.se1.forward(g, p, h)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.se2.forward(g, p, h)?;
        let logits = self.fc2.forward(g, p, h)?;
        match self.output {
            Output::Sigmoid => Ok(g.sigmoid(logits)),
            Output::Softmax => g.softmax(logits),
        }
    }
}

/// Predicted parameters for a batch, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub pose: Var,
    pub au: Var,
    pub id: Var,
    pub brow: Var,
}

impl Prediction {
    /// Generator input `[n, encoded_len]`.
    pub fn encode(&self, g: &mut Graph) -> Result<Var> {
        g.concat(&[self.pose, self.au, self.id, self.brow], 1)
    }

    pub fn values(&self, g: &Graph) -> Vec<SoftParams> {
        let n = g.shape(self.pose)[0];
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            let d = t.len() / n;
            t.data().chunks(d).map(<[f64]>::to_vec).collect()
        };
        let (pose, au, id, brow) = (rows(self.pose), rows(self.au), rows(self.id), rows(self.brow));
        (0..n)
            .map(|i| SoftParams {
                pose: [pose[i][0], pose[i][1]],
                au: au[i].clone(),
                id: id[i].clone(),
                brow: brow[i].clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Regressor {
    pub store: ParamStore,
    cfg: ParamSpaceConfig,
    shape: RegressorShape,
    pose: Head,
    id: Head,
    au: Head,
    brow: Head,
}

impl Regressor {
    pub fn new(cfg: &ParamSpaceConfig, shape: &RegressorShape, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let stage_side = |stage: usize| cfg.image_size >> (stage + 1);
        if shape.fusion_size == 0 || (0..3).any(|s| stage_side(s) % shape.fusion_size != 0) {
            return Err(Error::invalid(alloc::format!(
                "fusion size {} does not divide the feature maps of a {} image",
                shape.fusion_size,
                cfg.image_size
            )));
        }
        let channels = Segmenter::STAGE_CHANNELS;
        let shape_in: usize = SHAPE_REGIONS.iter().map(|&r| channels[REGION_STAGE[r]]).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pose = Head::new(
            &mut store,
            "pose",
            channels[2],
            1,
            POSE_DIM,
            Output::Sigmoid,
            shape,
            &mut rng,
        )?;
        let fs = shape.fusion_size;
        let id = Head::new(
            &mut store,
            "identity",
            shape_in,
            fs,
            cfg.id_cont_dim,
            Output::Sigmoid,
            shape,
            &mut rng,
        )?;
        let au = Head::new(
            &mut store,
            "au",
            shape_in,
            fs,
            cfg.au_dim,
            Output::Sigmoid,
            shape,
            &mut rng,
        )?;
        let brow_in = channels[REGION_STAGE[region::BROWS]];
        let brow = Head::new(
            &mut store,
            "brow",
            brow_in,
            fs,
            cfg.brow_styles,
            Output::Softmax,
            shape,
            &mut rng,
        )?;
        Ok(Self {
            store,
            cfg: *cfg,
            shape: *shape,
            pose,
            id,
            au,
            brow,
        })
    }

    pub fn config(&self) -> &ParamSpaceConfig {
        &self.cfg
    }

    pub fn shape(&self) -> &RegressorShape {
        &self.shape
    }

    /// Predicts parameters from a representation batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        rep: &Representation,
        pass: &mut NormPass<'_>,
    ) -> Result<Prediction> {
        let n = g.shape(rep.global)[0];
        let global = g.reshape(rep.global, &[n, Segmenter::STAGE_CHANNELS[2], 1, 1])?;
        let shape_maps: Vec<Var> = SHAPE_REGIONS.iter().map(|&r| rep.regions[r]).collect();
        Ok(Prediction {
            pose: self.pose.forward(g, p, &self.store, &[global], pass)?,
            au: self.au.forward(g, p, &self.store, &shape_maps, pass)?,
            id: self.id.forward(g, p, &self.store, &shape_maps, pass)?,
            brow: self
                .brow
                .forward(g, p, &self.store, &[rep.regions[region::BROWS]], pass)?,
        })
    }

    /// Inference with stored batch-norm statistics.
    pub fn regress(&self, rep: &RepresentationValue) -> Result<Vec<SoftParams>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let r = rep.constant(&mut g);
        let pred = self.forward(&mut g, &p, &r, &mut NormPass::Eval)?;
        Ok(pred.values(&g))
    }

    /// Extracts and regresses a batch of images `[n, 3, s, s]`.
    pub fn predict(
        &self,
        seg: &Segmenter,
        images: &Tensor,
        weights: &crate::extractor::RegionWeights,
    ) -> Result<Vec<SoftParams>> {
        self.regress(&seg.extract_values(images, weights)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::RegionWeights;
    use crate::nn::BatchStats;
    use crate::params::FacialParams;
    use crate::render;

    fn rep_values(seeds: &[u64]) -> RepresentationValue {
        let cfg = ParamSpaceConfig::desk();
        let mut seg = Segmenter::new(64, 2).unwrap();
        seg.store.freeze();
        let imgs: Vec<Tensor> = seeds
            .iter()
            .map(|&s| render::render(&cfg, &FacialParams::sample(s, &cfg), 0).unwrap().image)
            .collect();
        seg.extract_values(
            &Tensor::stack(&imgs.iter().collect::<Vec<_>>()).unwrap(),
            &RegionWeights::default(),
        )
        .unwrap()
    }

    fn check_ranges(out: &[SoftParams]) {
        for p in out {
            assert!(p.pose.iter().chain(&p.au).chain(&p.id).all(|&v| v > 0.0 && v < 1.0));
            assert!(p.brow.iter().all(|&v| v >= 0.0));
            assert!((p.brow.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_pools_and_concatenates() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 8, 16, 16], 0.25));
        let b_data: Vec<f64> = (0..4 * 64).map(|v| v as f64).collect();
        let b = g.constant(Tensor::new(&[1, 4, 8, 8], b_data.clone()).unwrap());
        let f = feature_fusion(&mut g, &[a, b], 8).unwrap();
        assert_eq!(g.shape(f), &[1, 12, 8, 8]);
        assert!(g.value(f).data()[..8 * 64].iter().all(|&v| v == 0.25));
        assert_eq!(&g.value(f).data()[8 * 64..], b_data.as_slice());
        let single = feature_fusion(&mut g, &[b], 8).unwrap();
        assert_eq!(g.value(single).data(), b_data.as_slice());
        assert!(feature_fusion(&mut g, &[], 8).is_err());
        assert!(feature_fusion(&mut g, &[a], 5).is_err());
    }

    #[test]
    fn outputs_stay_in_range_for_extreme_features() {
        let cfg = ParamSpaceConfig::desk();
        let r = Regressor::new(&cfg, &RegressorShape::default(), 1).unwrap();
        let mut rep = rep_values(&[1, 2]);
        check_ranges(&r.regress(&rep).unwrap());
        for (k, t) in rep.regions.iter_mut().enumerate() {
            let sign = if k % 2 == 0 { 1e3 } else { -1e3 };
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = if i % 3 == 0 { sign } else { -sign });
        }
        rep.global.data_mut().iter_mut().for_each(|v| *v = 1e3);
        let out = r.regress(&rep).unwrap();
        for p in &out {
            assert!(p
                .pose
                .iter()
                .chain(&p.au)
                .chain(&p.id)
                .all(|&v| (0.0..=1.0).contains(&v)));
            assert!((p.brow.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zeroed_brow_map_still_gives_a_distribution() {
        let cfg = ParamSpaceConfig::desk();
        let r = Regressor::new(&cfg, &RegressorShape::default(), 1).unwrap();
        let mut rep = rep_values(&[3]);
        rep.regions[region::BROWS].data_mut().iter_mut().for_each(|v| *v = 0.0);
        check_ranges(&r.regress(&rep).unwrap());
    }

    #[test]
    fn global_feature_only_moves_pose() {
        let cfg = ParamSpaceConfig::desk();
        let r = Regressor::new(&cfg, &RegressorShape::default(), 4).unwrap();
        let rep = rep_values(&[5, 6]);
        let before = r.regress(&rep).unwrap();
        let mut moved = rep.clone();
        moved
            .global
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v += 0.5 + i as f64 * 0.1);
        let after = r.regress(&moved).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert_ne!(a.pose, b.pose);
            assert_eq!((&a.au, &a.id, &a.brow), (&b.au, &b.id, &b.brow));
        }
    }

    #[test]
    fn pose_term_gradient_is_isolated_to_the_pose_head() {
        let cfg = ParamSpaceConfig::desk();
        let r = Regressor::new(&cfg, &RegressorShape::default(), 4).unwrap();
        let rep = rep_values(&[7, 8]);
        let mut g = Graph::new();
        let p = r.store.bind(&mut g);
        let reps = rep.constant(&mut g);
        let mut stats = BatchStats::new();
        let pred = r.forward(&mut g, &p, &reps, &mut NormPass::Train(&mut stats)).unwrap();
        let sq = g.square(pred.pose);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let grads = r.store.grads(&g, &p);
        for ((name, _), grad) in r.store.iter().zip(&grads) {
            let norm = grad
                .as_ref()
                .map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>());
            if name.starts_with("pose.") {
                continue;
            }
            assert_eq!(norm, 0.0, "{name}");
        }
        let pose_norm: f64 = r
            .store
            .iter()
            .zip(&grads)
            .filter(|((n, _), _)| n.starts_with("pose.") && n.ends_with("weight"))
            .map(|(_, g)| g.as_ref().map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>()))
            .sum();
        assert!(pose_norm > 0.0);
    }

    #[test]
    fn fusion_size_must_divide_maps() {
        let cfg = ParamSpaceConfig::desk();
        let bad = RegressorShape {
            fusion_size: 3,
            ..Default::default()
        };
        assert!(Regressor::new(&cfg, &bad, 1).is_err());
    }
}
