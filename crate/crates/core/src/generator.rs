//! Neural imitation of the renderer: encoded parameters to a `[3, s, s]`
//! image through eight transposed convolutions.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::extractor::Segmenter;
use crate::nn::{Adam, Bound, ConvTranspose2d, InstanceNorm, Linear, ParamStore};
use crate::params::{FacialParams, ParamSpaceConfig};
use crate::tensor::Tensor;

/// `(output channels, stride)` of the eight transposed convolutions.
const LAYERS: [(usize, usize); 8] = [(32, 1), (32, 2), (32, 1), (24, 2), (24, 1), (16, 2), (8, 2), (3, 1)];
const SEED_CHANNELS: usize = 32;

#[derive(Clone, Debug)]
pub struct Generator {
    pub store: ParamStore,
    cfg: ParamSpaceConfig,
    seed_side: usize,
    project: Linear,
    layers: Vec<(ConvTranspose2d, Option<InstanceNorm>)>,
}

impl Generator {
    pub fn new(cfg: &ParamSpaceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.image_size % 16 != 0 {
            return Err(Error::invalid(alloc::format!(
                "generator needs an image size divisible by 16, got {}",
                cfg.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let seed_side = cfg.image_size / 16;
        let project = Linear::new(
            &mut store,
            "project",
            cfg.encoded_len(),
            SEED_CHANNELS * seed_side * seed_side,
            &mut rng,
        );
        let mut layers = Vec::with_capacity(LAYERS.len());
        let mut cin = SEED_CHANNELS;
        for (i, &(cout, stride)) in LAYERS.iter().enumerate() {
            let (k, pad) = if stride == 1 { (3, 1) } else { (4, 1) };
            let name = alloc::format!("up{}", i + 1);
            let conv = ConvTranspose2d::new(&mut store, &name, cin, cout, k, stride, pad, &mut rng);
            let norm =
                (i + 1 < LAYERS.len()).then(|| InstanceNorm::new(&mut store, &alloc::format!("{name}.norm"), cout));
            layers.push((conv, norm));
            cin = cout;
        }
        Ok(Self {
            store,
            cfg: *cfg,
            seed_side,
            project,
            layers,
        })
    }

    pub fn config(&self) -> &ParamSpaceConfig {
        &self.cfg
    }

    /// `y`: `[n, encoded_len]` -> images `[n, 3, s, s]` in [0, 1].
    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let s = g.shape(y);
        if s.len() != 2 || s[1] != self.cfg.encoded_len() {
            return Err(Error::shape(
                "generate",
                alloc::format!("expected [n, {}] parameters, got {s:?}", self.cfg.encoded_len()),
            ));
        }
        let n = s[0];
        let h = self.project.forward(g, p, y)?;
        let h = g.relu(h);
        let mut h = g.reshape(h, &[n, SEED_CHANNELS, self.seed_side, self.seed_side])?;
        for (conv, norm) in &self.layers {
            h = conv.forward(g, p, h)?;
            h = match norm {
                Some(norm) => {
                    let z = norm.forward(g, p, h)?;
                    g.relu(z)
                }
                None => g.sigmoid(h),
            };
        }
        Ok(h)
    }

    /// Images for a batch of encoded parameter rows; inputs are clamped to [0, 1].
    pub fn generate_encoded(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let len = self.cfg.encoded_len();
        if rows.is_empty() || rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("generate", alloc::format!("rows must have length {len}")));
        }
        let data = rows.iter().flatten().map(|v| v.clamp(0.0, 1.0)).collect();
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let y = g.constant(Tensor::new(&[rows.len(), len], data)?);
        let out = self.forward(&mut g, &p, y)?;
        Ok(g.value(out).clone())
    }

    /// One image `[3, s, s]` for valid parameters.
    pub fn generate(&self, params: &FacialParams) -> Result<Tensor> {
        params.validate(&self.cfg)?;
        let img = self.generate_encoded(&[params.encode(&self.cfg)?])?;
        let s = self.cfg.image_size;
        img.reshape(&[3, s, s])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub params: FacialParams,
    pub image: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorTraining {
    pub lambda_per: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GeneratorTraining {
    fn default() -> Self {
        Self {
            lambda_per: 0.1,
            epochs: 20,
            batch: 32,
            lr: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    /// Value of the optimized objective node.
    pub objective: f64,
    /// Mean absolute pixel error, recomputed outside the graph.
    pub appearance: f64,
    /// Perceptual term before weighting.
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub steps: Vec<StepLog>,
    pub epoch_objective: Vec<f64>,
    pub held_out_l1: f64,
}

/// Perceptual distance between generated and target images: per stage, the
/// per-sample Euclidean feature distance scaled by `1 / sqrt(feature size)`,
/// averaged over the batch, summed over the three encoder stages.
pub fn perceptual_loss(g: &mut Graph, seg: &Segmenter, p: &Bound, generated: Var, target: Var) -> Result<Var> {
    let a = seg.encode(g, p, generated)?;
    let b = seg.encode(g, p, target)?;
    let mut total: Option<Var> = None;
    for (fa, fb) in a.iter().zip(&b) {
        let per = g.value(*fa).len() / g.shape(*fa)[0];
        let d = g.l2_distance(*fa, *fb)?;
        let m = g.mean(d);
        let term = g.scale(m, 1.0 / libm::sqrt(per as f64));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("three stages"))
}

fn batch_inputs(cfg: &ParamSpaceConfig, pairs: &[&PairedSample]) -> Result<(Tensor, Tensor)> {
    let mut rows = Vec::with_capacity(pairs.len() * cfg.encoded_len());
    for s in pairs {
        rows.extend(s.params.encode(cfg)?);
    }
    let y = Tensor::new(&[pairs.len(), cfg.encoded_len()], rows)?;
    let images = Tensor::stack(&pairs.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    Ok((y, images))
}

/// Mean per-pixel L1 of the generator over `pairs`.
pub fn mean_l1(model: &Generator, pairs: &[PairedSample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(32) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let (y, images) = batch_inputs(&model.cfg, &refs)?;
        let rows: Vec<Vec<f64>> = y.data().chunks(model.cfg.encoded_len()).map(|r| r.to_vec()).collect();
        let out = model.generate_encoded(&rows)?;
        total += out.mean_abs_diff(&images) * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Fits the generator to the renderer on `pairs` and returns it frozen.
pub fn train_generator(
    cfg: &ParamSpaceConfig,
    pairs: &[PairedSample],
    held_out: &[PairedSample],
    perceptual: Option<&Segmenter>,
    opts: &GeneratorTraining,
) -> Result<(Generator, GeneratorReport)> {
    if pairs.is_empty() || opts.batch == 0 {
        return Err(Error::invalid(
            "generator training needs pairs and a positive batch size",
        ));
    }
    if !(opts.lambda_per >= 0.0) {
        return Err(Error::invalid("perceptual weight must be non-negative"));
    }
    let seg = match perceptual {
        Some(seg) if seg.store.is_frozen() => Some(seg),
        _ if opts.lambda_per == 0.0 => None,
        _ => {
            return Err(Error::Prerequisite(
                "perceptual loss needs a pretrained, frozen feature extractor".to_string(),
            ))
        }
    };
    let mut model = Generator::new(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6e4);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut steps = Vec::new();
    let mut epoch_objective = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(opts.batch) {
            let refs: Vec<&PairedSample> = idx.iter().map(|&i| &pairs[i]).collect();
            let (y, images) = batch_inputs(cfg, &refs)?;
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let y = g.constant(y);
            let target = g.constant(images.clone());
            let out = model.forward(&mut g, &p, y)?;
            let appearance = g.l1_distance(out, target)?;
            let (objective, per) = match seg {
                Some(seg) => {
                    let sp = seg.store.bind(&mut g);
                    let per = perceptual_loss(&mut g, seg, &sp, out, target)?;
                    let weighted = g.scale(per, opts.lambda_per);
                    (g.add(appearance, weighted)?, g.value(per).item())
                }
                None => (appearance, 0.0),
            };
            g.backward(objective)?;
            let log = StepLog {
                epoch,
                step: steps.len(),
                objective: g.value(objective).item(),
                appearance: g.value(out).mean_abs_diff(&images),
                perceptual: per,
            };
            total += log.objective;
            count += 1;
            steps.push(log);
            let grads = model.store.grads(&g, &p);
            adam.step(&mut model.store, &grads)?;
        }
        epoch_objective.push(total / count as f64);
    }
    model.store.freeze();
    let held_out_l1 = if held_out.is_empty() {
        f64::NAN
    } else {
        mean_l1(&model, held_out)?
    };
    Ok((
        model,
        GeneratorReport {
            steps,
            epoch_objective,
            held_out_l1,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render;

    fn pairs(n: u64) -> Vec<PairedSample> {
        let cfg = ParamSpaceConfig::desk();
        (0..n)
            .map(|s| {
                let params = FacialParams::sample(s, &cfg);
                let image = render::render(&cfg, &params, 0).unwrap().image;
                PairedSample { params, image }
            })
            .collect()
    }

    #[test]
    fn output_shape_and_range_even_for_wild_inputs() {
        let cfg = ParamSpaceConfig::desk();
        let g = Generator::new(&cfg, 1).unwrap();
        let img = g.generate(&FacialParams::base(&cfg)).unwrap();
        assert_eq!(img.shape(), &[3, 64, 64]);
        let wild = g
            .generate_encoded(&[alloc::vec![50.0; 24], alloc::vec![-50.0; 24]])
            .unwrap();
        assert!(wild.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(g.generate_encoded(&[alloc::vec![0.5; 23]]).is_err());
    }

    #[test]
    fn perceptual_weight_needs_extractor() {
        let cfg = ParamSpaceConfig::desk();
        let opts = GeneratorTraining {
            epochs: 1,
            ..Default::default()
        };
        let err = train_generator(&cfg, &pairs(4), &[], None, &opts).unwrap_err();
        assert!(matches!(err, Error::Prerequisite(_)));
    }

    #[test]
    fn zero_lambda_objective_is_pure_appearance() {
        let cfg = ParamSpaceConfig::desk();
        let opts = GeneratorTraining {
            lambda_per: 0.0,
            epochs: 2,
            batch: 4,
            ..Default::default()
        };
        let (_, report) = train_generator(&cfg, &pairs(8), &[], None, &opts).unwrap();
        assert_eq!(report.steps.len(), 4);
        for s in &report.steps {
            assert!((s.objective - s.appearance).abs() <= 1e-12);
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let cfg = ParamSpaceConfig::desk();
        let model = {
            let mut m = Generator::new(&cfg, 4).unwrap();
            m.store.freeze();
            m
        };
        let y0 = FacialParams::sample(2, &cfg).encode(&cfg).unwrap();
        let mean_pixel = |y: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let v = g.variable(Tensor::new(&[1, 24], y.to_vec()).unwrap());
            let out = model.forward(&mut g, &p, v).unwrap();
            let m = g.mean(out);
            g.backward(m).unwrap();
            (g.value(m).item(), g.grad_or_zeros(v).into_data())
        };
        let (_, grad) = mean_pixel(&y0);
        let eps = 1e-5;
        for i in 0..24 {
            let mut up = y0.clone();
            up[i] += eps;
            let mut down = y0.clone();
            down[i] -= eps;
            let numeric = (mean_pixel(&up).0 - mean_pixel(&down).0) / (2.0 * eps);
            let err = (grad[i] - numeric).abs() / numeric.abs().max(1.0);
            assert!(err < 1e-4, "channel {i}: {} vs {numeric}", grad[i]);
        }
    }

    #[test]
    fn perfect_generator_has_zero_appearance_loss() {
        let p = pairs(2);
        let images = Tensor::stack(&[&p[0].image, &p[1].image]).unwrap();
        let mut g = Graph::new();
        let a = g.constant(images.clone());
        let b = g.constant(images);
        let l = g.l1_distance(a, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
