//! Small encoder–decoder face segmenter whose encoder features, weighted by
//! its own predicted region masks, form the facial representation.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv2d, ConvTranspose2d, ParamStore};
use crate::params::ParamSpaceConfig;
use crate::perturb::Photometric;
use crate::render::{class, CLASS_COUNT};
use crate::tensor::Tensor;

pub const REGION_COUNT: usize = 5;
pub const REGION_NAMES: [&str; REGION_COUNT] = ["eyes", "brows", "nose", "mouth", "face"];

pub mod region {
    pub const EYES: usize = 0;
    pub const BROWS: usize = 1;
    pub const NOSE: usize = 2;
    pub const MOUTH: usize = 3;
    pub const FACE: usize = 4;
}

/// Encoder stage feeding each region, in region order.
const REGION_STAGE: [usize; REGION_COUNT] = [0, 0, 1, 1, 2];

/// Per-region feature weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionWeights(pub [f64; REGION_COUNT]);

impl Default for RegionWeights {
    fn default() -> Self {
        Self([1.0; REGION_COUNT])
    }
}

/// Global feature plus the five weighted region maps, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct Representation {
    pub global: Var,
    pub regions: [Var; REGION_COUNT],
}

/// Plain-value copy of a [`Representation`] for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationValue {
    pub global: Tensor,
    pub regions: [Tensor; REGION_COUNT],
}

impl Representation {
    pub fn value(&self, g: &Graph) -> RepresentationValue {
        RepresentationValue {
            global: g.value(self.global).clone(),
            regions: self.regions.map(|r| g.value(r).clone()),
        }
    }

    pub fn detach(&self, g: &mut Graph) -> Representation {
        Representation {
            global: g.detach(self.global),
            regions: self.regions.map(|r| g.detach(r)),
        }
    }
}

impl RepresentationValue {
    /// Adds the tensors to `g` as constants.
    pub fn constant(&self, g: &mut Graph) -> Representation {
        Representation {
            global: g.constant(self.global.clone()),
            regions: self.regions.clone().map(|r| g.constant(r)),
        }
    }

    /// Rows `indices` of every tensor, stacked into a new batch.
    pub fn gather(parts: &[&RepresentationValue], indices: &[(usize, usize)]) -> Result<RepresentationValue> {
        let pick = |f: &dyn Fn(&RepresentationValue) -> &Tensor| -> Result<Tensor> {
            let rows: Vec<Tensor> = indices.iter().map(|&(p, i)| f(parts[p]).sample(i)).collect();
            Tensor::stack(&rows.iter().collect::<Vec<_>>())
        };
        let global = pick(&|r| &r.global)?;
        let mut regions = Vec::with_capacity(REGION_COUNT);
        for k in 0..REGION_COUNT {
            regions.push(pick(&|r| &r.regions[k])?);
        }
        Ok(RepresentationValue {
            global,
            regions: regions.try_into().expect("five regions"),
        })
    }

    pub fn batch_len(&self) -> usize {
        self.global.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct SegmenterPass {
    /// Encoder stage activations at 1/2, 1/4 and 1/8 resolution.
    pub stages: [Var; 3],
    /// Per-pixel class probabilities `[n, 6, h, w]`.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub store: ParamStore,
    image_size: usize,
    enc: [Conv2d; 3],
    dec: [ConvTranspose2d; 3],
    head: Conv2d,
}

impl Segmenter {
    pub const STAGE_CHANNELS: [usize; 3] = [12, 24, 32];
    const DECODER_OUT: usize = 8;

    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if image_size % 8 != 0 || image_size < 16 {
            return Err(Error::invalid(alloc::format!(
                "segmenter needs an image size divisible by 8, got {image_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c1, c2, c3] = Self::STAGE_CHANNELS;
        let enc = [
            Conv2d::new(&mut store, "enc1", 3, c1, 3, 2, 1, &mut rng),
            Conv2d::new(&mut store, "enc2", c1, c2, 3, 2, 1, &mut rng),
            Conv2d::new(&mut store, "enc3", c2, c3, 3, 2, 1, &mut rng),
        ];
        let dec = [
            ConvTranspose2d::new(&mut store, "dec3", c3, c2, 4, 2, 1, &mut rng),
            ConvTranspose2d::new(&mut store, "dec2", c2, c1, 4, 2, 1, &mut rng),
            ConvTranspose2d::new(&mut store, "dec1", c1, Self::DECODER_OUT, 4, 2, 1, &mut rng),
        ];
        let head = Conv2d::new(&mut store, "head", Self::DECODER_OUT, CLASS_COUNT, 1, 1, 0, &mut rng);
        Ok(Self {
            store,
            image_size,
            enc,
            dec,
            head,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::shape(
                "extract",
                alloc::format!("expected [n, 3, {0}, {0}] images, got {s:?}", self.image_size),
            ));
        }
        Ok(())
    }

    /// Encoder stages only.
    pub fn encode(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<[Var; 3]> {
        self.check_input(g, x)?;
        let mut h = x;
        let mut stages = [x; 3];
        for (i, conv) in self.enc.iter().enumerate() {
            let z = conv.forward(g, p, h)?;
            h = g.relu(z);
            stages[i] = h;
        }
        Ok(stages)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<SegmenterPass> {
        let stages = self.encode(g, p, x)?;
        let mut h = stages[2];
        for (i, de) in self.dec.iter().enumerate() {
            let z = de.forward(g, p, h)?;
            h = g.relu(z);
            if i < 2 {
                h = g.add(h, stages[1 - i])?;
            }
        }
        let logits = self.head.forward(g, p, h)?;
        let probs = g.softmax(logits)?;
        Ok(SegmenterPass { stages, probs })
    }

    /// Facial representation of a batch of images; requires a frozen model.
    pub fn extract(&self, g: &mut Graph, p: &Bound, x: Var, weights: &RegionWeights) -> Result<Representation> {
        if !self.store.is_frozen() {
            return Err(Error::Prerequisite(
                "feature extractor must be pretrained and frozen".to_string(),
            ));
        }
        let pass = self.forward(g, p, x)?;
        self.represent(g, &pass, weights)
    }

    /// Builds the representation from a forward pass.
    pub fn represent(&self, g: &mut Graph, pass: &SegmenterPass, weights: &RegionWeights) -> Result<Representation> {
        let global = g.global_avg_pool(pass.stages[2])?;
        let bg = g.slice(pass.probs, 1, class::BACKGROUND as usize, 1)?;
        let neg = g.scale(bg, -1.0);
        let face = g.add_scalar(neg, 1.0);
        let masks = [
            g.slice(pass.probs, 1, class::EYES as usize, 1)?,
            g.slice(pass.probs, 1, class::BROWS as usize, 1)?,
            g.slice(pass.probs, 1, class::NOSE as usize, 1)?,
            g.slice(pass.probs, 1, class::MOUTH as usize, 1)?,
            face,
        ];
        let mut regions = [global; REGION_COUNT];
        for r in 0..REGION_COUNT {
            let stage = REGION_STAGE[r];
            let mask = g.avg_pool(masks[r], 2 << stage)?;
            let weighted = g.mul(pass.stages[stage], mask)?;
            regions[r] = g.scale(weighted, weights.0[r]);
        }
        Ok(Representation { global, regions })
    }

    /// Representation values for a batch `[n, 3, h, w]`, no gradients.
    pub fn extract_values(&self, images: &Tensor, weights: &RegionWeights) -> Result<RepresentationValue> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        Ok(self.extract(&mut g, &p, x, weights)?.value(&g))
    }

    /// Arg-max class per pixel for a batch, sample-major then row-major.
    pub fn predict_classes(&self, images: &Tensor) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, &p, x)?;
        let probs = g.value(pass.probs);
        let (n, c, h, w) = probs.dims4()?;
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for s in 0..n {
            let base = s * c * plane;
            for i in 0..plane {
                let best = (0..c)
                    .max_by(|&a, &b| probs.data()[base + a * plane + i].total_cmp(&probs.data()[base + b * plane + i]))
                    .unwrap_or(0);
                out.push(best as u8);
            }
        }
        Ok(out)
    }

    /// Conservative receptive-field radius, in image pixels, of each region
    /// map cell (feature and mask paths combined), measured from the cell
    /// centre in Chebyshev distance.
    pub fn receptive_radius(region: usize) -> f64 {
        // (radius, pixels per cell) after each layer; convolutions with k = 3
        // reach one input cell, the k = 4 / s = 2 transposed convolutions reach
        // one input cell as well.
        let conv = |(r, f): (f64, f64), stride: f64| (r + f, f * stride);
        let up = |(r, f): (f64, f64)| (r + f, f / 2.0);
        let c1 = conv((0.0, 1.0), 2.0);
        let c2 = conv(c1, 2.0);
        let c3 = conv(c2, 2.0);
        let d3 = up(c3);
        let d2 = up((d3.0.max(c2.0), d3.1));
        let d1 = up((d2.0.max(c1.0), d2.1));
        let stage = [c1, c2, c3][REGION_STAGE[region]];
        // 1x1 head, then pooling to the stage grid adds half a stage cell
        let mask = d1.0 + 0.5 * stage.1;
        stage.0.max(mask) + stage.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterTraining {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: Photometric,
}

impl Default for SegmenterTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 16,
            lr: 2e-3,
            seed: 7,
            augment: Photometric::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterReport {
    pub epoch_loss: Vec<f64>,
    pub held_out_accuracy: f64,
    pub warning: Option<String>,
}

pub const SEGMENTER_ACCURACY_TARGET: f64 = 0.90;

/// An image with its per-pixel class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledImage {
    pub image: Tensor,
    pub classes: Vec<u8>,
}

fn one_hot(classes: &[&[u8]], size: usize) -> Result<Tensor> {
    let plane = size * size;
    let mut data = vec![0.0; classes.len() * CLASS_COUNT * plane];
    for (s, labels) in classes.iter().enumerate() {
        for (i, &c) in labels.iter().enumerate() {
            data[(s * CLASS_COUNT + c as usize) * plane + i] = 1.0;
        }
    }
    Tensor::new(&[classes.len(), CLASS_COUNT, size, size], data)
}

/// Mean negative log-likelihood of the labels under `probs`.
pub fn cross_entropy(g: &mut Graph, probs: Var, targets: Var) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    let per_class = shape[1];
    let count = g.value(probs).len() / per_class;
    let safe = g.add_scalar(probs, 1e-12);
    let logp = g.log(safe);
    let picked = g.mul(logp, targets)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / count as f64))
}

/// Fraction of pixels whose arg-max class matches the label.
pub fn pixel_accuracy(model: &Segmenter, data: &[LabelledImage]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("no held-out images"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in data.chunks(32) {
        let images = Tensor::stack(&chunk.iter().map(|d| &d.image).collect::<Vec<_>>())?;
        let pred = model.predict_classes(&images)?;
        let truth = chunk.iter().flat_map(|d| d.classes.iter().copied());
        hits += pred.iter().zip(truth).filter(|(a, b)| *a == b).count();
        total += pred.len();
    }
    Ok(hits as f64 / total as f64)
}

/// Background tint plus photometric jitter, using the labels to find the background.
fn augment(item: &LabelledImage, aug: &Photometric, rng: &mut ChaCha8Rng) -> Tensor {
    let mut image = item.image.clone();
    let plane = item.classes.len();
    let reference = crate::render::style(0).expect("reference style").palette.background;
    let tint = aug.background(rng);
    for c in 0..3 {
        let shift = tint[c] - reference[c];
        for (i, &cls) in item.classes.iter().enumerate() {
            if cls == class::BACKGROUND {
                let v = &mut image.data_mut()[c * plane + i];
                *v = (*v + shift).clamp(0.0, 1.0);
            }
        }
    }
    aug.jitter(&mut image, rng);
    image
}

/// Trains the segmenter with per-pixel cross-entropy and returns it frozen.
pub fn pretrain_segmenter(
    cfg: &ParamSpaceConfig,
    train: &[LabelledImage],
    held_out: &[LabelledImage],
    opts: &SegmenterTraining,
) -> Result<(Segmenter, SegmenterReport)> {
    if train.is_empty() || opts.batch == 0 {
        return Err(Error::invalid(
            "segmenter training needs images and a positive batch size",
        ));
    }
    let size = cfg.image_size;
    for item in train.iter().chain(held_out) {
        if item.classes.len() != size * size || item.image.shape() != [3, size, size] {
            return Err(Error::shape(
                "pretrain-extractor",
                "image or mask does not match the configured size",
            ));
        }
    }
    let mut model = Segmenter::new(size, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5e9);
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(opts.batch) {
            let images: Vec<Tensor> = idx
                .iter()
                .map(|&i| augment(&train[i], &opts.augment, &mut rng))
                .collect();
            let images = Tensor::stack(&images.iter().collect::<Vec<_>>())?;
            let labels: Vec<&[u8]> = idx.iter().map(|&i| train[i].classes.as_slice()).collect();
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let x = g.constant(images);
            let t = g.constant(one_hot(&labels, size)?);
            let pass = model.forward(&mut g, &p, x)?;
            let loss = cross_entropy(&mut g, pass.probs, t)?;
            g.backward(loss)?;
            total += g.value(loss).item();
            batches += 1;
            let grads = model.store.grads(&g, &p);
            adam.step(&mut model.store, &grads)?;
        }
        epoch_loss.push(total / batches as f64);
    }
    model.store.freeze();
    let held_out_accuracy = if held_out.is_empty() {
        f64::NAN
    } else {
        pixel_accuracy(&model, held_out)?
    };
    let warning = (!(held_out_accuracy >= SEGMENTER_ACCURACY_TARGET)).then(|| {
        alloc::format!("held-out pixel accuracy {held_out_accuracy:.4} below target {SEGMENTER_ACCURACY_TARGET}")
    });
    Ok((
        model,
        SegmenterReport {
            epoch_loss,
            held_out_accuracy,
            warning,
        },
    ))
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut mc = m;
        for row in 0..3 {
            mc[row][col] = b[row];
        }
        *o = det(&mc) / d;
    }
    Some(out)
}

/// Second-moment matrix of `[x, y, 1]` over the points, centred and scale-free;
/// its smallest singular direction vanishes for collinear sets.
fn collinear(points: &[[f64; 2]]) -> bool {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0] / n, b + p[1] / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let trace = sxx + syy;
    trace <= 0.0 || (sxx * syy - sxy * sxy) <= 1e-9 * trace * trace
}

/// Resamples `image` (`[3, h, w]`) so that `landmarks` land on `template`,
/// using the least-squares affine fit between the two point sets.
pub fn align(image: &Tensor, landmarks: &[[f64; 2]], template: &[[f64; 2]]) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::shape("align", alloc::format!("expected [c, h, w], got {s:?}"))),
    };
    if landmarks.len() != template.len() || landmarks.len() < 3 {
        return Err(Error::DegenerateLandmarks(alloc::format!(
            "need matching sets of at least 3 points, got {} and {}",
            landmarks.len(),
            template.len()
        )));
    }
    for p in landmarks {
        if !(0.0..w as f64).contains(&p[0]) || !(0.0..h as f64).contains(&p[1]) {
            return Err(Error::invalid(alloc::format!("landmark {p:?} outside the image")));
        }
    }
    if collinear(landmarks) || collinear(template) {
        return Err(Error::DegenerateLandmarks("landmarks are collinear".to_string()));
    }
    // least squares for the map template -> source, one row at a time
    let mut m = [[0.0; 3]; 3];
    let mut bx = [0.0; 3];
    let mut by = [0.0; 3];
    for (t, s) in template.iter().zip(landmarks) {
        let v = [t[0], t[1], 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += v[i] * v[j];
            }
            bx[i] += v[i] * s[0];
            by[i] += v[i] * s[1];
        }
    }
    let degenerate = || Error::DegenerateLandmarks("singular landmark system".to_string());
    let ax = solve3(m, bx).ok_or_else(degenerate)?;
    let ay = solve3(m, by).ok_or_else(degenerate)?;

    let src = image.data();
    let plane = h * w;
    let at = |ch: usize, x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        src[ch * plane + y * w + x]
    };
    let mut out = vec![0.0; c * plane];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let sx = ax[0] * xf + ax[1] * yf + ax[2];
            let sy = ay[0] * xf + ay[1] * yf + ay[2];
            let (x0, y0) = (libm::floor(sx), libm::floor(sy));
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = at(ch, x0, y0) * (1.0 - fx) + at(ch, x0 + 1, y0) * fx;
                let bottom = at(ch, x0, y0 + 1) * (1.0 - fx) + at(ch, x0 + 1, y0 + 1) * fx;
                out[ch * plane + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::FacialParams;
    use crate::render;

    fn frozen(seed: u64) -> Segmenter {
        let mut m = Segmenter::new(64, seed).unwrap();
        m.store.freeze();
        m
    }

    fn face_batch(seeds: &[u64]) -> Tensor {
        let cfg = ParamSpaceConfig::desk();
        let imgs: Vec<Tensor> = seeds
            .iter()
            .map(|&s| render::render(&cfg, &FacialParams::sample(s, &cfg), 0).unwrap().image)
            .collect();
        Tensor::stack(&imgs.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one_and_shapes() {
        let m = frozen(1);
        let mut g = Graph::new();
        let p = m.store.bind(&mut g);
        let x = g.constant(face_batch(&[1, 2]));
        let pass = m.forward(&mut g, &p, x).unwrap();
        let probs = g.value(pass.probs);
        assert_eq!(probs.shape(), &[2, 6, 64, 64]);
        let plane = 64 * 64;
        for s in 0..2 {
            for i in (0..plane).step_by(97) {
                let t: f64 = (0..6).map(|c| probs.data()[(s * 6 + c) * plane + i]).sum();
                assert!((t - 1.0).abs() < 1e-12);
            }
        }
        let rep = m.represent(&mut g, &pass, &RegionWeights::default()).unwrap();
        assert_eq!(g.shape(rep.global), &[2, 32]);
        assert_eq!(g.shape(rep.regions[region::EYES]), &[2, 12, 32, 32]);
        assert_eq!(g.shape(rep.regions[region::MOUTH]), &[2, 24, 16, 16]);
        assert_eq!(g.shape(rep.regions[region::FACE]), &[2, 32, 8, 8]);
    }

    #[test]
    fn unfrozen_model_is_rejected() {
        let m = Segmenter::new(64, 0).unwrap();
        let err = m
            .extract_values(&face_batch(&[0]), &RegionWeights::default())
            .unwrap_err();
        assert!(matches!(err, Error::Prerequisite(_)));
    }

    #[test]
    fn zero_weight_or_empty_mask_gives_zero_region() {
        let m = frozen(2);
        let mut w = RegionWeights::default();
        w.0[region::MOUTH] = 0.0;
        let rep = m.extract_values(&face_batch(&[4]), &w).unwrap();
        assert!(rep.regions[region::MOUTH].data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let p = m.store.bind(&mut g);
        let x = g.constant(face_batch(&[4]));
        let mut pass = m.forward(&mut g, &p, x).unwrap();
        let mut probs = g.value(pass.probs).clone();
        let plane = 64 * 64;
        probs.data_mut()[class::MOUTH as usize * plane..(class::MOUTH as usize + 1) * plane].fill(0.0);
        pass.probs = g.constant(probs);
        let rep = m.represent(&mut g, &pass, &RegionWeights::default()).unwrap();
        assert!(g.value(rep.regions[region::MOUTH]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn representation_gradient_matches_finite_differences() {
        let m = frozen(3);
        let cfg = ParamSpaceConfig::desk();
        let image = render::base_face(&cfg).unwrap().image.reshape(&[1, 3, 64, 64]).unwrap();
        let norm = |img: &Tensor| -> (f64, Tensor) {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g);
            let x = g.variable(img.clone());
            let rep = m.extract(&mut g, &p, x, &RegionWeights::default()).unwrap();
            let mut terms = Vec::new();
            for r in rep.regions {
                let sq = g.square(r);
                terms.push(g.sum(sq));
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t).unwrap();
            }
            g.backward(total).unwrap();
            (g.value(total).item(), g.grad_or_zeros(x))
        };
        let (_, grad) = norm(&image);
        // a small step keeps the stencil clear of relu kinks in the untrained network
        let eps = 1e-5;
        for &i in &[0usize, 1000, 2080, 2100, 4096 + 2600, 8192 + 3000, 8192 + 4095] {
            let mut up = image.clone();
            up.data_mut()[i] += eps;
            let mut down = image.clone();
            down.data_mut()[i] -= eps;
            let numeric = (norm(&up).0 - norm(&down).0) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            assert!(err < 1e-4, "pixel {i}: analytic {} numeric {numeric}", grad.data()[i]);
        }
    }

    #[test]
    fn pixels_beyond_receptive_radius_do_not_leak() {
        let m = frozen(5);
        let images = face_batch(&[8]);
        let before = m.extract_values(&images, &RegionWeights::default()).unwrap();
        let (px, py) = (3usize, 5usize);
        let mut changed = images.clone();
        for c in 0..3 {
            changed.data_mut()[c * 4096 + py * 64 + px] = 1.0 - changed.data()[c * 4096 + py * 64 + px];
        }
        let after = m.extract_values(&changed, &RegionWeights::default()).unwrap();
        for r in 0..REGION_COUNT {
            let radius = Segmenter::receptive_radius(r);
            let (_, ch, gh, gw) = before.regions[r].dims4().unwrap();
            let cell = 64.0 / gh as f64;
            let mut checked = 0;
            for c in 0..ch {
                for y in 0..gh {
                    for x in 0..gw {
                        let cx = (x as f64 + 0.5) * cell - 0.5;
                        let cy = (y as f64 + 0.5) * cell - 0.5;
                        let d = (cx - px as f64).abs().max((cy - py as f64).abs());
                        if d > radius {
                            let i = (c * gh + y) * gw + x;
                            assert_eq!(before.regions[r].data()[i], after.regions[r].data()[i]);
                            checked += 1;
                        }
                    }
                }
            }
            assert!(checked > 0, "region {r} radius {radius} covers the whole image");
        }
    }

    #[test]
    fn align_identity_and_translation() {
        let cfg = ParamSpaceConfig::desk();
        let base = render::base_face(&cfg).unwrap();
        let same = align(&base.image, &base.landmarks, &base.landmarks).unwrap();
        assert!(same.max_abs_diff(&base.image) <= 1e-6);

        let plane = 64 * 64;
        let mut shifted = vec![0.0; 3 * plane];
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let sx = (x as usize).saturating_sub(3);
                    shifted[c * plane + y * 64 + x] = base.image.data()[c * plane + y * 64 + sx];
                }
            }
        }
        let shifted = Tensor::new(&[3, 64, 64], shifted).unwrap();
        let moved: Vec<[f64; 2]> = base.landmarks.iter().map(|p| [p[0] + 3.0, p[1]]).collect();
        let back = align(&shifted, &moved, &base.landmarks).unwrap();
        assert!(back.mean_abs_diff(&base.image) <= 0.02);
    }

    #[test]
    fn align_rejects_collinear_landmarks() {
        let cfg = ParamSpaceConfig::desk();
        let base = render::base_face(&cfg).unwrap();
        let line: Vec<[f64; 2]> = (0..5).map(|i| [10.0 + 5.0 * i as f64, 20.0 + 2.0 * i as f64]).collect();
        assert!(matches!(
            align(&base.image, &line, &base.landmarks),
            Err(Error::DegenerateLandmarks(_))
        ));
    }
}
