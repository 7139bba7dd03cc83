//! Named parameter storage, layer building blocks and the Adam optimiser.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named tensors of one network. Running statistics live here too, as
/// non-trainable entries.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    frozen: bool,
}

/// Graph handles for every entry of a [`ParamStore`], valid for one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.push(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.push(name, tensor, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Overwrites entries by name from `(name, tensor)` pairs; every entry must be present.
    pub fn load(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for entry in &mut self.entries {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::invalid(alloc::format!("checkpoint lacks tensor {}", entry.name)))?;
            if t.shape() != entry.tensor.shape() {
                return Err(Error::shape(
                    "load",
                    alloc::format!("{}: {:?} vs {:?}", entry.name, t.shape(), entry.tensor.shape()),
                ));
            }
            entry.tensor = t.clone();
        }
        Ok(())
    }

    /// FNV-1a over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for v in e.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Adds every entry to `g`; trainable entries of an unfrozen store become variables.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| {
                    if e.trainable && !self.frozen {
                        g.variable(e.tensor.clone())
                    } else {
                        g.constant(e.tensor.clone())
                    }
                })
                .collect(),
        )
    }

    /// Gradients of the trainable entries after a backward pass (zeros when unreached).
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Option<Tensor>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|(e, &v)| e.trainable.then(|| g.grad_or_zeros(v)))
            .collect()
    }

    /// Euclidean norm of all trainable gradients.
    pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
        libm::sqrt(
            grads
                .iter()
                .flatten()
                .flat_map(|t| t.data())
                .map(|v| v * v)
                .sum::<f64>(),
        )
    }
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape, data).expect("positive shape")
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            &alloc::format!("{name}.weight"),
            he_normal(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
        );
        let b = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            pad,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees about cin * (kernel / stride)^2 inputs
        let taps = (kernel / stride).max(1);
        let w = store.add(
            &alloc::format!("{name}.weight"),
            he_normal(rng, &[cin, cout, kernel, kernel], cin * taps * taps),
        );
        let b = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv_transpose2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(&alloc::format!("{name}.weight"), he_normal(rng, &[fout, fin], fin));
        let b = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[fout]));
        Self { w, b }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    /// Rescales the weights, e.g. to start an output layer near zero.
    pub fn scale_weights(&self, store: &mut ParamStore, factor: f64) {
        store.get_mut(self.w).data_mut().iter_mut().for_each(|v| *v *= factor);
    }

    pub fn set_bias(&self, store: &mut ParamStore, values: &[f64]) {
        store.get_mut(self.b).data_mut().copy_from_slice(values);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.instance_norm(x, p[self.gamma], p[self.beta])
    }
}

/// Running-statistics updates gathered during a training-mode forward pass.
#[derive(Debug, Default)]
pub struct BatchStats(Vec<(ParamId, ParamId, Var)>);

/// How batch norm layers behave in one forward pass.
pub enum NormPass<'a> {
    /// Batch statistics; updates are recorded for [`BatchStats::apply`].
    Train(&'a mut BatchStats),
    /// Batch statistics without recording.
    TrainNoRecord,
    /// Stored running statistics.
    Eval,
}

impl BatchStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds the recorded batch statistics into the running buffers.
    pub fn apply(&self, store: &mut ParamStore, g: &Graph, momentum: f64) {
        for &(mean_id, var_id, node) in &self.0 {
            if let Some((mean, var)) = g.norm_stats(node) {
                let (mean, var) = (mean.to_vec(), var.to_vec());
                for (r, m) in store.get_mut(mean_id).data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - momentum) * *r + momentum * m;
                }
                for (r, v) in store.get_mut(var_id).data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - momentum) * *r + momentum * v;
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(&alloc::format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(&alloc::format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        store: &ParamStore,
        x: Var,
        pass: &mut NormPass<'_>,
    ) -> Result<Var> {
        match pass {
            NormPass::Train(stats) => {
                let y = g.batch_norm(x, p[self.gamma], p[self.beta])?;
                stats.0.push((self.running_mean, self.running_var, y));
                Ok(y)
            }
            NormPass::TrainNoRecord => g.batch_norm(x, p[self.gamma], p[self.beta]),
            NormPass::Eval => g.batch_norm_fixed(
                x,
                p[self.gamma],
                p[self.beta],
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
            ),
        }
    }
}

/// Squeeze-and-excitation gate on a feature vector: `x * sigmoid(fc2(relu(fc1(x))))`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    fc1: Linear,
    fc2: Linear,
    pub dim: usize,
}

impl SeBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim < 4 || ratio == 0 || dim / ratio == 0 {
            return Err(Error::invalid(alloc::format!(
                "attention block needs dim >= 4 and a usable bottleneck, got dim {dim} ratio {ratio}"
            )));
        }
        let hidden = dim / ratio;
        Ok(Self {
            fc1: Linear::new(store, &alloc::format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &alloc::format!("{name}.fc2"), hidden, dim, rng),
            dim,
        })
    }

    pub fn gate(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h)?;
        Ok(g.sigmoid(h))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let gate = self.gate(g, p, x)?;
        g.mul(x, gate)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::Prerequisite("cannot update a frozen network".to_string()));
        }
        if self.m.is_empty() {
            self.m = store.entries.iter().map(|e| vec![0.0; e.tensor.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let values = store.entries[i].tensor.data_mut();
            for j in 0..values.len() {
                let gj = grad.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                values[j] -= self.lr * (m[j] / bc1) / (libm::sqrt(v[j] / bc2) + self.eps);
            }
        }
        Ok(())
    }
}
