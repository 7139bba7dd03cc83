//! Identity embedder: a small convolutional network mapping a face image to a
//! unit-norm vector, trained by classifying synthetic identities.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Adam, Bound, Conv2d, Linear, ParamStore};
use crate::params::{FacialParams, ParamSpaceConfig};
use crate::perturb::Photometric;
use crate::tensor::Tensor;

const STAGE_CHANNELS: [usize; 4] = [8, 16, 24, 32];

#[derive(Clone, Debug)]
pub struct IdentityModel {
    pub store: ParamStore,
    image_size: usize,
    embedding_dim: usize,
    stages: Vec<Conv2d>,
    head: Linear,
}

impl IdentityModel {
    pub fn new(image_size: usize, embedding_dim: usize, seed: u64) -> Result<Self> {
        if image_size < 16 || image_size % 16 != 0 || embedding_dim < 2 {
            return Err(Error::invalid(alloc::format!(
                "identity model needs an image size divisible by 16 and embedding_dim >= 2, got {image_size} and {embedding_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        let mut stages = Vec::with_capacity(STAGE_CHANNELS.len());
        for (i, &cout) in STAGE_CHANNELS.iter().enumerate() {
            let name = alloc::format!("stage{}", i + 1);
            stages.push(Conv2d::new(&mut store, &name, cin, cout, 3, 2, 1, &mut rng));
            cin = cout;
        }
        let side = image_size / 16;
        let head = Linear::new(&mut store, "embed", cin * side * side, embedding_dim, &mut rng);
        Ok(Self {
            store,
            image_size,
            embedding_dim,
            stages,
            head,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Unit-norm embeddings `[n, d]`, usable while training.
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(Error::shape(
                "embed",
                alloc::format!("expected [n, 3, {0}, {0}], got {s:?}", self.image_size),
            ));
        }
        let mut h = x;
        for conv in &self.stages {
            let z = conv.forward(g, p, h)?;
            h = g.relu(z);
        }
        let flat = g.flatten(h)?;
        let e = self.head.forward(g, p, flat)?;
        g.normalize(e)
    }

    /// Differentiable embedding of `x: [n, 3, s, s]`; requires a frozen model.
    pub fn embed(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        if !self.store.is_frozen() {
            return Err(Error::Prerequisite(
                "identity embedder must be pretrained and frozen".to_string(),
            ));
        }
        self.forward(g, p, x)
    }

    /// Embedding values for a batch, no gradients.
    pub fn embed_values(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        let e = self.embed(&mut g, &p, x)?;
        Ok(g.value(e).clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityTraining {
    pub n_identities: usize,
    pub renders_per_identity: usize,
    pub held_out_identities: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Temperature of the cosine classifier.
    pub scale: f64,
    pub seed: u64,
    pub augment: Photometric,
}

impl Default for IdentityTraining {
    fn default() -> Self {
        Self {
            n_identities: 200,
            renders_per_identity: 10,
            held_out_identities: 20,
            epochs: 10,
            batch: 32,
            lr: 2e-3,
            scale: 16.0,
            seed: 7,
            augment: Photometric::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub epoch_loss: Vec<f64>,
    /// Mean same-identity cosine minus mean different-identity cosine on unseen identities.
    pub margin: f64,
    pub warning: Option<String>,
}

pub const IDENTITY_MARGIN_TARGET: f64 = 0.3;

/// Renders of one identity under random expression, pose and photometric jitter.
pub fn identity_renders(
    cfg: &ParamSpaceConfig,
    identity: &FacialParams,
    count: usize,
    augment: &Photometric,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    (0..count)
        .map(|_| {
            let mut p = FacialParams::sample_exclusive_with(rng, cfg);
            p.id.clone_from(&identity.id);
            p.brow = identity.brow;
            Ok(augment.render(cfg, &p, rng)?.image)
        })
        .collect()
}

/// Mean cosine between same-identity pairs minus mean cosine between
/// different-identity pairs; `groups[i]` holds the embeddings of identity `i`.
pub fn verification_margin(groups: &[Vec<Vec<f64>>]) -> Result<f64> {
    let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut same, mut same_n, mut diff, mut diff_n) = (0.0, 0usize, 0.0, 0usize);
    for (i, gi) in groups.iter().enumerate() {
        for (a, ea) in gi.iter().enumerate() {
            for eb in &gi[a + 1..] {
                same += cos(ea, eb);
                same_n += 1;
            }
            for gj in &groups[i + 1..] {
                for eb in gj {
                    diff += cos(ea, eb);
                    diff_n += 1;
                }
            }
        }
    }
    if same_n == 0 || diff_n == 0 {
        return Err(Error::invalid("margin needs two identities with two renders each"));
    }
    Ok(same / same_n as f64 - diff / diff_n as f64)
}

/// Trains the embedder by softmax classification over synthetic identities
/// and returns it frozen.
pub fn pretrain_identity(
    cfg: &ParamSpaceConfig,
    embedding_dim: usize,
    opts: &IdentityTraining,
) -> Result<(IdentityModel, IdentityReport)> {
    if opts.n_identities < 2 || opts.renders_per_identity == 0 || opts.batch == 0 {
        return Err(Error::invalid(
            "identity pretraining needs at least two identities, one render each and a positive batch size",
        ));
    }
    let mut model = IdentityModel::new(cfg.image_size, embedding_dim, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1d);
    let mut images = Vec::with_capacity(opts.n_identities * opts.renders_per_identity);
    let mut labels = Vec::with_capacity(images.capacity());
    for label in 0..opts.n_identities {
        let identity = FacialParams::sample_with(&mut rng, cfg);
        images.extend(identity_renders(
            cfg,
            &identity,
            opts.renders_per_identity,
            &opts.augment,
            &mut rng,
        )?);
        labels.extend(core::iter::repeat_n(label, opts.renders_per_identity));
    }
    let mut classes = ParamStore::new();
    let classifier = Linear::new(&mut classes, "classes", embedding_dim, opts.n_identities, &mut rng);
    let mut adam = Adam::new(opts.lr);
    let mut class_adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_loss = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(opts.batch) {
            let x = Tensor::stack(&idx.iter().map(|&i| &images[i]).collect::<Vec<_>>())?;
            let mut onehot = vec![0.0; idx.len() * opts.n_identities];
            for (row, &i) in idx.iter().enumerate() {
                onehot[row * opts.n_identities + labels[i]] = 1.0;
            }
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let cp = classes.bind(&mut g);
            let x = g.constant(x);
            let target = g.constant(Tensor::new(&[idx.len(), opts.n_identities], onehot)?);
            let e = model.forward(&mut g, &p, x)?;
            let w = g.normalize(cp[classifier.weight()])?;
            let cosines = g.linear(e, w, None)?;
            let logits = g.scale(cosines, opts.scale);
            let probs = g.softmax(logits)?;
            let safe = g.add_scalar(probs, 1e-12);
            let logp = g.log(safe);
            let picked = g.mul(logp, target)?;
            let sum = g.sum(picked);
            let loss = g.scale(sum, -1.0 / idx.len() as f64);
            g.backward(loss)?;
            total += g.value(loss).item();
            batches += 1;
            let grads = model.store.grads(&g, &p);
            adam.step(&mut model.store, &grads)?;
            let grads = classes.grads(&g, &cp);
            class_adam.step(&mut classes, &grads)?;
        }
        epoch_loss.push(total / batches as f64);
    }
    model.store.freeze();

    let mut held_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xbeef);
    let mut groups = Vec::with_capacity(opts.held_out_identities);
    for _ in 0..opts.held_out_identities {
        let identity = FacialParams::sample_with(&mut held_rng, cfg);
        let renders = identity_renders(cfg, &identity, opts.renders_per_identity, &opts.augment, &mut held_rng)?;
        let e = model.embed_values(&Tensor::stack(&renders.iter().collect::<Vec<_>>())?)?;
        groups.push(e.data().chunks(embedding_dim).map(<[f64]>::to_vec).collect());
    }
    let margin = if opts.held_out_identities >= 2 && opts.renders_per_identity >= 2 {
        verification_margin(&groups)?
    } else {
        f64::NAN
    };
    let warning = (!(margin >= IDENTITY_MARGIN_TARGET))
        .then(|| alloc::format!("held-out verification margin {margin:.4} below target {IDENTITY_MARGIN_TARGET}"));
    Ok((
        model,
        IdentityReport {
            epoch_loss,
            margin,
            warning,
        },
    ))
}
