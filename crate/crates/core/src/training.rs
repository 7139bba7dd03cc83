//! Unsupervised regressor objective and training loop, plus the iterative
//! per-image fit the regressor amortizes.
//!
//! The objective is `L_ct + w_id L_id + w_pr L_pr + w_lp L_lp + w_adv L_adv`:
//! representation matching against the real image, identity agreement of the
//! expressionless re-render, a pull toward base parameters, loopback
//! consistency of re-regressed renders, and a mouth-feature match between the
//! expressionless re-render and the base face.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::extractor::{region, RegionWeights, Representation, RepresentationValue, Segmenter, REGION_COUNT};
use crate::generator::Generator;
use crate::identity::IdentityModel;
use crate::nn::{Adam, BatchStats, NormPass, ParamStore};
use crate::params::{
    encode_soft, FacialParams, ParamSpaceConfig, SoftParams, BASE_AU, BASE_IDENTITY, BASE_POSE, POSE_DIM,
};
use crate::regressor::{Prediction, Regressor, RegressorShape};
use crate::render;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_id: f64,
    pub w_pr: f64,
    pub w_lp: f64,
    pub w_adv: f64,
    /// Identity share of the parameter loss.
    pub alpha: f64,
    /// AU share of the parameter loss.
    pub beta: f64,
    /// Weight of the base-identity loopback branch.
    pub lambda_le: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_id: 0.1,
            w_pr: 0.1,
            w_lp: 0.1,
            w_adv: 0.1,
            alpha: 0.1,
            beta: 0.01,
            lambda_le: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_id,
            self.w_pr,
            self.w_lp,
            self.w_adv,
            self.alpha,
            self.beta,
            self.lambda_le,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid(alloc::format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Sum over regions of the mean absolute difference between two representations.
pub fn facial_content_loss(g: &mut Graph, a: &Representation, b: &Representation) -> Result<Var> {
    let mut total = g.l1_distance(a.regions[0], b.regions[0])?;
    for r in 1..REGION_COUNT {
        let term = g.l1_distance(a.regions[r], b.regions[r])?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Batch mean of `1 - cos` between unit embeddings.
pub fn identity_loss(g: &mut Graph, generated: Var, real: Var) -> Result<Var> {
    let cos = g.cosine_similarity(generated, real)?;
    let mean = g.mean(cos);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Squared distance of predicted pose, identity and AU from the base values,
/// with identity and AU scaled by `alpha` and `beta`; batch mean.
pub fn parameter_loss(g: &mut Graph, pred: &Prediction, weights: &LossWeights) -> Result<Var> {
    let n = g.shape(pred.pose)[0] as f64;
    let term = |g: &mut Graph, v: Var, base: f64, scale: f64| {
        let d = g.add_scalar(v, -base);
        let sq = g.square(d);
        let s = g.sum(sq);
        g.scale(s, scale / n)
    };
    let pose = term(g, pred.pose, BASE_POSE, 1.0);
    let id = term(g, pred.id, BASE_IDENTITY, weights.alpha);
    let au = term(g, pred.au, BASE_AU, weights.beta);
    let sum = g.add(pose, id)?;
    g.add(sum, au)
}

/// Mean absolute difference between target and predicted encoded rows.
fn row_l1(g: &mut Graph, target: Var, predicted: Var) -> Result<Var> {
    g.l1_distance(target, predicted)
}

/// `|y_gbe - R(F(I_gbe))|_1 + lambda_le |y_gbi - R(F(I_gbi))|_1` on encoded
/// rows `[n, encoded_len]` (brow slots compared as distributions). Like the
/// content loss, each norm is averaged over its elements so the default
/// weights keep the content term dominant.
pub fn loopback_loss(
    g: &mut Graph,
    target_gbe: Var,
    predicted_gbe: Var,
    target_gbi: Var,
    predicted_gbi: Var,
    lambda_le: f64,
) -> Result<Var> {
    let expressionless = row_l1(g, target_gbe, predicted_gbe)?;
    let base_identity = row_l1(g, target_gbi, predicted_gbi)?;
    let weighted = g.scale(base_identity, lambda_le);
    g.add(expressionless, weighted)
}

/// Mean absolute difference between mouth maps of the expressionless
/// re-render and of the base face (broadcast over the batch).
pub fn adversarial_loss(g: &mut Graph, mouth: Var, base_mouth: &Tensor) -> Result<Var> {
    let n = g.shape(mouth)[0];
    let tiled = Tensor::stack(&vec![base_mouth; n])?;
    let base = g.constant(tiled);
    g.l1_distance(mouth, base)
}

/// The two re-render targets built from a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopbackPair {
    /// Base AU, predicted identity and brow, frontal (or predicted) pose.
    pub expressionless: Vec<f64>,
    /// Predicted pose and AU, base identity and base brow.
    pub base_identity: Vec<f64>,
}

impl LoopbackPair {
    pub fn new(cfg: &ParamSpaceConfig, pred: &SoftParams, frontal: bool) -> Result<Self> {
        let base = FacialParams::base(cfg);
        let pose = if frontal { base.pose } else { pred.pose };
        let expressionless = encode_soft(cfg, &pose, &base.au, &pred.id, &pred.brow)?;
        let mut brow = vec![0.0; cfg.brow_styles];
        brow[base.brow] = 1.0;
        let base_identity = encode_soft(cfg, &pred.pose, &pred.au, &base.id, &brow)?;
        Ok(Self {
            expressionless,
            base_identity,
        })
    }
}

/// The frozen networks the objective runs through.
#[derive(Clone, Copy)]
pub struct FrozenNets<'a> {
    pub segmenter: &'a Segmenter,
    pub identity: &'a IdentityModel,
    pub generator: &'a Generator,
    pub region_weights: RegionWeights,
}

impl FrozenNets<'_> {
    fn check(&self, cfg: &ParamSpaceConfig) -> Result<()> {
        let frozen = [
            ("feature extractor", self.segmenter.store.is_frozen()),
            ("identity embedder", self.identity.store.is_frozen()),
            ("generator", self.generator.store.is_frozen()),
        ];
        if let Some((name, _)) = frozen.iter().find(|(_, f)| !f) {
            return Err(Error::Prerequisite(alloc::format!(
                "{name} must be pretrained and frozen"
            )));
        }
        if self.generator.config() != cfg
            || self.segmenter.image_size() != cfg.image_size
            || self.identity.image_size() != cfg.image_size
        {
            return Err(Error::Prerequisite(
                "pretrained networks were built for a different parameter space".to_string(),
            ));
        }
        Ok(())
    }

    /// Checksums of the extractor, embedder and generator parameters.
    pub fn checksums(&self) -> [u64; 3] {
        [
            self.segmenter.store.checksum(),
            self.identity.store.checksum(),
            self.generator.store.checksum(),
        ]
    }
}

/// Values of the five objective terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub content: f64,
    pub identity: f64,
    pub parameter: f64,
    pub loopback: f64,
    pub adversarial: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn all_finite(&self) -> bool {
        [
            self.content,
            self.identity,
            self.parameter,
            self.loopback,
            self.adversarial,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossTerms, scale: f64) {
        self.content += other.content * scale;
        self.identity += other.identity * scale;
        self.parameter += other.parameter * scale;
        self.loopback += other.loopback * scale;
        self.adversarial += other.adversarial * scale;
        self.total += other.total * scale;
    }
}

/// Builds the full objective for one batch of real images `[n, 3, s, s]`.
/// Returns the total node and the logged term values.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    g: &mut Graph,
    model: &Regressor,
    p: &crate::nn::Bound,
    nets: &FrozenNets<'_>,
    base_mouth: &Tensor,
    images: &Tensor,
    opts: &RegressorTraining,
    pass: &mut NormPass<'_>,
) -> Result<(Var, LossTerms)> {
    let cfg = *model.config();
    let w = &opts.weights;
    let n = images.shape()[0];
    let sp = nets.segmenter.store.bind(g);
    let ip = nets.identity.store.bind(g);
    let gp = nets.generator.store.bind(g);

    let x = g.constant(images.clone());
    let real_rep = nets.segmenter.extract(g, &sp, x, &nets.region_weights)?;
    let real_emb = nets.identity.embed(g, &ip, x)?;

    let pred = model.forward(g, p, &real_rep, pass)?;
    let y_pred = pred.encode(g)?;
    let base = FacialParams::base(&cfg);
    let rows = |v: &[f64]| Tensor::new(&[n, v.len()], v.iter().copied().cycle().take(n * v.len()).collect());
    let expr_pose = if opts.frontal_identity_pose {
        g.constant(rows(&base.pose)?)
    } else {
        pred.pose
    };
    let base_au = g.constant(rows(&base.au)?);
    let y_gbe = g.concat(&[expr_pose, base_au, pred.id, pred.brow], 1)?;

    // reconstruction and expressionless re-render share one generator pass
    let y_both = g.concat(&[y_pred, y_gbe], 0)?;
    let rendered = nets.generator.forward(g, &gp, y_both)?;
    let both_rep = nets.segmenter.extract(g, &sp, rendered, &nets.region_weights)?;
    let half = |g: &mut Graph, v: Var, start: usize| g.slice(v, 0, start, n);
    let mut gen_rep = both_rep;
    let mut gbe_rep = both_rep;
    gen_rep.global = half(g, both_rep.global, 0)?;
    gbe_rep.global = half(g, both_rep.global, n)?;
    for r in 0..REGION_COUNT {
        gen_rep.regions[r] = half(g, both_rep.regions[r], 0)?;
        gbe_rep.regions[r] = half(g, both_rep.regions[r], n)?;
    }
    let gbe_image = half(g, rendered, n)?;

    let content = facial_content_loss(g, &gen_rep, &real_rep)?;
    let gbe_emb = nets.identity.embed(g, &ip, gbe_image)?;
    let identity = identity_loss(g, gbe_emb, real_emb)?;
    let parameter = parameter_loss(g, &pred, w)?;
    let adversarial = adversarial_loss(g, gbe_rep.regions[region::MOUTH], base_mouth)?;

    // loopback: re-regress the two re-renders against fixed targets
    let target_gbe = g.detach(y_gbe);
    let soft = pred.values(g);
    let gbi_rows: Vec<Vec<f64>> = soft
        .iter()
        .map(|s| LoopbackPair::new(&cfg, s, opts.frontal_identity_pose).map(|l| l.base_identity))
        .collect::<Result<_>>()?;
    let gbi_images = nets.generator.generate_encoded(&gbi_rows)?;
    let gbi_rep = nets
        .segmenter
        .extract_values(&gbi_images, &nets.region_weights)?
        .constant(g);
    let target_gbi = g.constant(Tensor::new(&[n, cfg.encoded_len()], gbi_rows.concat())?);
    let gbe_fixed = gbe_rep.detach(g);
    let pred_gbe = model
        .forward(g, p, &gbe_fixed, &mut NormPass::TrainNoRecord)?
        .encode(g)?;
    let pred_gbi = model.forward(g, p, &gbi_rep, &mut NormPass::TrainNoRecord)?.encode(g)?;
    let loopback = loopback_loss(g, target_gbe, pred_gbe, target_gbi, pred_gbi, w.lambda_le)?;

    let mut total = content;
    for (weight, term) in [
        (w.w_id, identity),
        (w.w_pr, parameter),
        (w.w_lp, loopback),
        (w.w_adv, adversarial),
    ] {
        if weight > 0.0 {
            let scaled = g.scale(term, weight);
            total = g.add(total, scaled)?;
        }
    }
    let terms = LossTerms {
        content: g.value(content).item(),
        identity: g.value(identity).item(),
        parameter: g.value(parameter).item(),
        loopback: g.value(loopback).item(),
        adversarial: g.value(adversarial).item(),
        total: g.value(total).item(),
    };
    Ok((total, terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Render the expressionless image at frontal pose rather than the predicted one.
    pub frontal_identity_pose: bool,
    pub bn_momentum: f64,
    pub shape: RegressorShape,
}

impl Default for RegressorTraining {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            seed: 7,
            weights: LossWeights::default(),
            frontal_identity_pose: true,
            bn_momentum: 0.1,
            shape: RegressorShape::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch-size-weighted means over the epoch.
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorReport {
    pub epochs: Vec<EpochLog>,
    /// Every per-step term was finite.
    pub all_finite: bool,
    /// Extractor, embedder and generator checksums before and after training.
    pub frozen_before: [u64; 3],
    pub frozen_after: [u64; 3],
}

/// Mouth map of the rendered base face, `[1, c, h, w]`.
pub fn base_mouth(cfg: &ParamSpaceConfig, nets: &FrozenNets<'_>) -> Result<Tensor> {
    let s = cfg.image_size;
    let base = render::base_face(cfg)?.image.reshape(&[1, 3, s, s])?;
    let rep = nets.segmenter.extract_values(&base, &nets.region_weights)?;
    let [_, _, _, mouth, _] = rep.regions;
    Ok(mouth)
}

/// Trains a regressor on unlabelled images `[3, s, s]`; only the regressor's
/// parameters change.
pub fn train_regressor(
    cfg: &ParamSpaceConfig,
    nets: &FrozenNets<'_>,
    real: &[Tensor],
    opts: &RegressorTraining,
) -> Result<(Regressor, RegressorReport)> {
    nets.check(cfg)?;
    opts.weights.validate()?;
    if real.len() < 2 || opts.batch < 2 {
        return Err(Error::invalid(
            "regressor training needs at least two images and a batch of two",
        ));
    }
    let frozen_before = nets.checksums();
    let base_mouth = base_mouth(cfg, nets)?;
    let mut model = Regressor::new(cfg, &opts.shape, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7e9);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..real.len()).collect();
    let mut epochs = Vec::with_capacity(opts.epochs);
    let mut all_finite = true;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let mut seen = 0usize;
        // a lone trailing sample would give degenerate batch statistics
        for idx in order.chunks(opts.batch).filter(|c| c.len() >= 2) {
            let images = Tensor::stack(&idx.iter().map(|&i| &real[i]).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let mut stats = BatchStats::new();
            let (total, terms) = batch_objective(
                &mut g,
                &model,
                &p,
                nets,
                &base_mouth,
                &images,
                opts,
                &mut NormPass::Train(&mut stats),
            )?;
            all_finite &= terms.all_finite();
            g.backward(total)?;
            let grads = model.store.grads(&g, &p);
            adam.step(&mut model.store, &grads)?;
            stats.apply(&mut model.store, &g, opts.bn_momentum);
            sums.accumulate(&terms, idx.len() as f64);
            seen += idx.len();
        }
        let mut terms = LossTerms::default();
        terms.accumulate(&sums, 1.0 / seen.max(1) as f64);
        epochs.push(EpochLog { epoch, terms });
    }
    let frozen_after = nets.checksums();
    if frozen_after != frozen_before {
        return Err(Error::Prerequisite(
            "a frozen network changed during regressor training".to_string(),
        ));
    }
    Ok((
        model,
        RegressorReport {
            epochs,
            all_finite,
            frozen_before,
            frozen_after,
        },
    ))
}

/// Outcome of [`iterative_fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Best parameters seen.
    pub params: SoftParams,
    pub loss: f64,
    /// Content loss of the starting (base) parameters.
    pub initial_loss: f64,
    /// Best-so-far content loss after each step.
    pub trace: Vec<f64>,
}

fn project(cfg: &ParamSpaceConfig, y: &mut [f64]) {
    let cont = POSE_DIM + cfg.au_dim + cfg.id_cont_dim;
    y.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let brow = &mut y[cont..];
    let sum: f64 = brow.iter().sum();
    if sum > 0.0 {
        brow.iter_mut().for_each(|v| *v /= sum);
    } else {
        let u = 1.0 / brow.len() as f64;
        brow.iter_mut().for_each(|v| *v = u);
    }
}

fn split(cfg: &ParamSpaceConfig, y: &[f64]) -> SoftParams {
    let (a, i) = (POSE_DIM + cfg.au_dim, POSE_DIM + cfg.au_dim + cfg.id_cont_dim);
    SoftParams {
        pose: [y[0], y[1]],
        au: y[POSE_DIM..a].to_vec(),
        id: y[a..i].to_vec(),
        brow: y[i..].to_vec(),
    }
}

/// Gradient descent (Adam steps of size `step_size`) on the encoded parameter
/// vector, from the base parameters, matching the image's representation
/// through the generator. Parameters are projected back to [0, 1] (and the
/// brow slot to a distribution) after every step.
pub fn iterative_fit(
    cfg: &ParamSpaceConfig,
    segmenter: &Segmenter,
    generator: &Generator,
    region_weights: &RegionWeights,
    image: &Tensor,
    steps: usize,
    step_size: f64,
) -> Result<FitResult> {
    if steps < 1 {
        return Err(Error::invalid("iterative fit needs at least one step"));
    }
    if !segmenter.store.is_frozen() || !generator.store.is_frozen() {
        return Err(Error::Prerequisite(
            "iterative fit needs a frozen extractor and generator".to_string(),
        ));
    }
    let s = cfg.image_size;
    let image = image.clone().reshape(&[1, 3, s, s])?;
    let target: RepresentationValue = segmenter.extract_values(&image, region_weights)?;
    let mut store = ParamStore::new();
    let id = store.add(
        "params",
        Tensor::new(&[1, cfg.encoded_len()], FacialParams::base(cfg).encode(cfg)?)?,
    );
    let mut adam = Adam::new(step_size);
    let mut best = (f64::INFINITY, store.get(id).data().to_vec());
    let mut initial_loss = f64::NAN;
    let mut trace = Vec::with_capacity(steps);
    for step in 0..=steps {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let sp = segmenter.store.bind(&mut g);
        let gp = generator.store.bind(&mut g);
        let rendered = generator.forward(&mut g, &gp, p[id])?;
        let rep = segmenter.extract(&mut g, &sp, rendered, region_weights)?;
        let t = target.constant(&mut g);
        let loss = facial_content_loss(&mut g, &rep, &t)?;
        let value = g.value(loss).item();
        if step == 0 {
            initial_loss = value;
        }
        if value < best.0 {
            best = (value, store.get(id).data().to_vec());
        }
        if step > 0 {
            trace.push(best.0);
        }
        if step == steps {
            break;
        }
        g.backward(loss)?;
        let grads = store.grads(&g, &p);
        adam.step(&mut store, &grads)?;
        project(cfg, store.get_mut(id).data_mut());
    }
    Ok(FitResult {
        params: split(cfg, &best.1),
        loss: best.0,
        initial_loss,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Bound;
    use proptest::prelude::*;

    fn graph_pred(g: &mut Graph, params: &[SoftParams]) -> Prediction {
        let n = params.len();
        let mut col = |f: &dyn Fn(&SoftParams) -> Vec<f64>| {
            let data: Vec<f64> = params.iter().flat_map(f).collect();
            let d = data.len() / n;
            g.constant(Tensor::new(&[n, d], data).unwrap())
        };
        Prediction {
            pose: col(&|p| p.pose.to_vec()),
            au: col(&|p| p.au.clone()),
            id: col(&|p| p.id.clone()),
            brow: col(&|p| p.brow.clone()),
        }
    }

    fn base_soft(cfg: &ParamSpaceConfig) -> SoftParams {
        SoftParams::from_hard(&FacialParams::base(cfg), cfg)
    }

    #[test]
    fn parameter_loss_at_and_near_base() {
        let cfg = ParamSpaceConfig::desk();
        let w = LossWeights::default();
        let mut g = Graph::new();
        let base = graph_pred(&mut g, &[base_soft(&cfg)]);
        let l = parameter_loss(&mut g, &base, &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let mut turned = base_soft(&cfg);
        turned.pose = [1.0, 1.0];
        let pred = graph_pred(&mut g, &[turned]);
        let l = parameter_loss(&mut g, &pred, &w).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-12);

        let mut wide = base_soft(&cfg);
        wide.id = vec![0.6; 12];
        let pred = graph_pred(&mut g, &[wide]);
        let l = parameter_loss(&mut g, &pred, &w).unwrap();
        assert!((g.value(l).item() - 0.012).abs() < 1e-12);
    }

    #[test]
    fn content_loss_identities() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, offset: f64| Representation {
            global: g.constant(Tensor::full(&[2, 4], offset)),
            regions: core::array::from_fn(|r| {
                let data = (0..2 * 3 * 4 * 4)
                    .map(|i| (i * (r + 1)) as f64 * 0.01 + offset)
                    .collect();
                g.constant(Tensor::new(&[2, 3, 4, 4], data).unwrap())
            }),
        };
        let a = mk(&mut g, 0.0);
        let b = mk(&mut g, 0.5);
        let same = facial_content_loss(&mut g, &a, &a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let ab = facial_content_loss(&mut g, &a, &b).unwrap();
        let ba = facial_content_loss(&mut g, &b, &a).unwrap();
        assert!((g.value(ab).item() - 0.5 * REGION_COUNT as f64).abs() < 1e-12);
        assert_eq!(g.value(ab).item(), g.value(ba).item());
    }

    #[test]
    fn identity_loss_range_ends() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.6, 0.8]).unwrap());
        let neg = g.constant(Tensor::new(&[2, 3], vec![-1.0, 0.0, 0.0, 0.0, -0.6, -0.8]).unwrap());
        let same = identity_loss(&mut g, a, a).unwrap();
        let opposite = identity_loss(&mut g, a, neg).unwrap();
        assert!(g.value(same).item().abs() < 1e-12);
        assert!((g.value(opposite).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loopback_and_adversarial_basics() {
        let mut g = Graph::new();
        let t1 = g.constant(Tensor::new(&[2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let t2 = g.constant(Tensor::new(&[2, 3], vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4]).unwrap());
        let off = g.add_scalar(t2, 0.1);
        let exact = loopback_loss(&mut g, t1, t1, t2, t2, 1.0).unwrap();
        assert_eq!(g.value(exact).item(), 0.0);
        let no_second = loopback_loss(&mut g, t1, t1, t2, off, 0.0).unwrap();
        assert_eq!(g.value(no_second).item(), 0.0);
        let second = loopback_loss(&mut g, t1, t1, t2, off, 1.0).unwrap();
        assert!((g.value(second).item() - 0.1).abs() < 1e-12);

        let base = Tensor::full(&[1, 2, 2, 2], 0.25);
        let m1 = g.constant(Tensor::full(&[3, 2, 2, 2], 0.5));
        let m2 = g.constant(Tensor::full(&[3, 2, 2, 2], 0.75));
        let a1 = adversarial_loss(&mut g, m1, &base).unwrap();
        let a2 = adversarial_loss(&mut g, m2, &base).unwrap();
        assert!((2.0 * g.value(a1).item() - g.value(a2).item()).abs() < 1e-12);
        let zero = g.constant(Tensor::full(&[3, 2, 2, 2], 0.25));
        let a0 = adversarial_loss(&mut g, zero, &base).unwrap();
        assert_eq!(g.value(a0).item(), 0.0);
    }

    #[test]
    fn loopback_pair_layout() {
        let cfg = ParamSpaceConfig::desk();
        let mut pred = base_soft(&cfg);
        pred.pose = [0.1, 0.9];
        pred.au = vec![0.7; 6];
        pred.id = vec![0.3; 12];
        pred.brow = vec![0.1, 0.2, 0.3, 0.4];
        let pair = LoopbackPair::new(&cfg, &pred, true).unwrap();
        assert_eq!(&pair.expressionless[..2], &[0.5, 0.5]);
        assert_eq!(&pair.expressionless[2..8], &[BASE_AU; 6]);
        assert_eq!(&pair.expressionless[8..20], &[0.3; 12]);
        assert_eq!(&pair.expressionless[20..], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(&pair.base_identity[..2], &[0.1, 0.9]);
        assert_eq!(&pair.base_identity[2..8], &[0.7; 6]);
        assert_eq!(&pair.base_identity[8..20], &[BASE_IDENTITY; 12]);
        assert_eq!(&pair.base_identity[20..], &[1.0, 0.0, 0.0, 0.0]);
        let posed = LoopbackPair::new(&cfg, &pred, false).unwrap();
        assert_eq!(&posed.expressionless[..2], &[0.1, 0.9]);
    }

    #[test]
    fn weights_reject_negative_values() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            beta: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn frozen_nets(cfg: &ParamSpaceConfig) -> (Segmenter, IdentityModel, Generator) {
        let mut seg = Segmenter::new(cfg.image_size, 1).unwrap();
        seg.store.freeze();
        let mut id = IdentityModel::new(cfg.image_size, 16, 2).unwrap();
        id.store.freeze();
        let mut gen = Generator::new(cfg, 3).unwrap();
        gen.store.freeze();
        (seg, id, gen)
    }

    fn real_images(cfg: &ParamSpaceConfig, seeds: core::ops::Range<u64>) -> Vec<Tensor> {
        seeds
            .map(|s| render::render(cfg, &FacialParams::sample(s, cfg), 0).unwrap().image)
            .collect()
    }

    fn small_cfg() -> ParamSpaceConfig {
        ParamSpaceConfig {
            image_size: 32,
            ..ParamSpaceConfig::desk()
        }
    }

    #[test]
    fn one_step_moves_only_the_regressor() {
        let cfg = small_cfg();
        let (seg, id, gen) = frozen_nets(&cfg);
        let nets = FrozenNets {
            segmenter: &seg,
            identity: &id,
            generator: &gen,
            region_weights: RegionWeights::default(),
        };
        let opts = RegressorTraining {
            shape: RegressorShape {
                fusion_size: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = Regressor::new(&cfg, &opts.shape, 1).unwrap();
        let images = real_images(&cfg, 0..4);
        let images = Tensor::stack(&images.iter().collect::<Vec<_>>()).unwrap();
        let mouth = base_mouth(&cfg, &nets).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let mut stats = BatchStats::new();
        let (total, terms) = batch_objective(
            &mut g,
            &model,
            &p,
            &nets,
            &mouth,
            &images,
            &opts,
            &mut NormPass::Train(&mut stats),
        )
        .unwrap();
        assert!(terms.all_finite());
        assert!([
            terms.content,
            terms.identity,
            terms.parameter,
            terms.loopback,
            terms.adversarial
        ]
        .iter()
        .all(|&t| t >= 0.0));
        g.backward(total).unwrap();
        assert!(ParamStore::grad_norm(&model.store.grads(&g, &p)) > 0.0);
        // frozen stores bind as constants: nothing flows into them
        for store in [&seg.store, &id.store, &gen.store] {
            let bound: Bound = store.bind(&mut g);
            assert_eq!(ParamStore::grad_norm(&store.grads(&g, &bound)), 0.0);
        }
    }

    #[test]
    fn training_requires_frozen_networks() {
        let cfg = small_cfg();
        let (seg, id, mut gen) = frozen_nets(&cfg);
        gen.store.unfreeze();
        let nets = FrozenNets {
            segmenter: &seg,
            identity: &id,
            generator: &gen,
            region_weights: RegionWeights::default(),
        };
        let err = train_regressor(&cfg, &nets, &real_images(&cfg, 0..4), &RegressorTraining::default());
        assert!(matches!(err, Err(Error::Prerequisite(_))));
    }

    #[test]
    fn iterative_fit_contract() {
        let cfg = small_cfg();
        let (seg, _, gen) = frozen_nets(&cfg);
        let image = &real_images(&cfg, 5..6)[0];
        let w = RegionWeights::default();
        assert!(iterative_fit(&cfg, &seg, &gen, &w, image, 0, 0.01).is_err());
        let fit = iterative_fit(&cfg, &seg, &gen, &w, image, 8, 0.05).unwrap();
        assert_eq!(fit.trace.len(), 8);
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.loss <= fit.initial_loss);
        assert!(fit
            .params
            .pose
            .iter()
            .chain(&fit.params.au)
            .chain(&fit.params.id)
            .all(|v| (0.0..=1.0).contains(v)));
        assert!((fit.params.brow.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn parameter_loss_shrinks_toward_base(channel in 0usize..20, start in 0.0f64..1.0, frac in 0.05f64..0.95) {
            let cfg = ParamSpaceConfig::desk();
            let w = LossWeights::default();
            let mut p = base_soft(&cfg);
            let mut flat: Vec<f64> = p.pose.iter().chain(&p.au).chain(&p.id).copied().collect();
            let base = flat[channel];
            prop_assume!((start - base).abs() > 1e-6);
            flat[channel] = start;
            let set = |flat: &[f64], p: &mut SoftParams| {
                p.pose = [flat[0], flat[1]];
                p.au = flat[2..8].to_vec();
                p.id = flat[8..20].to_vec();
            };
            set(&flat, &mut p);
            let mut g = Graph::new();
            let far = graph_pred(&mut g, &[p.clone()]);
            let far = parameter_loss(&mut g, &far, &w).unwrap();
            flat[channel] = base + (start - base) * frac;
            set(&flat, &mut p);
            let near = graph_pred(&mut g, &[p]);
            let near = parameter_loss(&mut g, &near, &w).unwrap();
            prop_assert!(g.value(near).item() < g.value(far).item());
        }

        #[test]
        fn parameter_loss_ignores_batch_order(seed in 0u64..1000) {
            let cfg = ParamSpaceConfig::desk();
            let w = LossWeights::default();
            let rows: Vec<SoftParams> = (0..4)
                .map(|i| SoftParams::from_hard(&FacialParams::sample(seed * 4 + i, &cfg), &cfg))
                .collect();
            let mut rev = rows.clone();
            rev.reverse();
            let mut g = Graph::new();
            let a = graph_pred(&mut g, &rows);
            let b = graph_pred(&mut g, &rev);
            let la = parameter_loss(&mut g, &a, &w).unwrap();
            let lb = parameter_loss(&mut g, &b, &w).unwrap();
            prop_assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-12);
        }
    }
}
