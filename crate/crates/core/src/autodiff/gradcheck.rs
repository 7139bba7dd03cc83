//! Central finite-difference verification of the adjoint rules.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, OpKind, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Shapes of the tensors fed to one op instance, plus the seed for their values.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSpec {
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
}

impl InputSpec {
    /// Small representative shapes for `kind`.
    pub fn default_for(kind: OpKind, seed: u64) -> Self {
        let shapes: Vec<Vec<usize>> = match kind {
            OpKind::Conv2d => vec![vec![1, 2, 8, 8], vec![3, 2, 3, 3], vec![3]],
            OpKind::ConvTranspose2d => vec![vec![2, 3, 3, 3], vec![3, 2, 4, 4], vec![2]],
            OpKind::FullyConnected => vec![vec![2, 4], vec![3, 4], vec![3]],
            OpKind::InstanceNorm => vec![vec![1, 2, 4, 4], vec![2], vec![2]],
            OpKind::BatchNorm => vec![vec![3, 2, 2, 2], vec![2], vec![2]],
            OpKind::Softmax => vec![vec![2, 4, 3]],
            OpKind::GlobalAvgPool | OpKind::AvgPool => vec![vec![2, 3, 4, 4]],
            OpKind::ElementwiseMul | OpKind::ElementwiseAdd | OpKind::ElementwiseSub => {
                vec![vec![2, 3, 4], vec![2, 1, 4]]
            }
            OpKind::Concat => vec![vec![2, 3, 2], vec![2, 1, 2]],
            OpKind::L1Distance | OpKind::L2Distance => vec![vec![3, 5], vec![3, 5]],
            OpKind::CosineSimilarity => vec![vec![1, 8], vec![1, 8]],
            OpKind::Normalize => vec![vec![2, 6]],
            _ => vec![vec![2, 3, 5]],
        };
        Self { shapes, seed }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], kind: OpKind) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let v: f64 = rng.random_range(-1.0..1.0);
            match kind {
                OpKind::Log => 0.2 + libm::fabs(v),
                // keep kinks of relu/abs out of the finite-difference stencil
                OpKind::Relu | OpKind::Abs if libm::fabs(v) < 0.05 => v.signum() * 0.05 + v,
                _ => v,
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

fn apply(kind: OpKind, g: &mut Graph, x: &[Var]) -> Result<Var> {
    Ok(match kind {
        OpKind::Conv2d => g.conv2d(x[0], x[1], Some(x[2]), 2, 1)?,
        OpKind::ConvTranspose2d => g.conv_transpose2d(x[0], x[1], Some(x[2]), 2, 1)?,
        OpKind::FullyConnected => g.linear(x[0], x[1], Some(x[2]))?,
        OpKind::InstanceNorm => g.instance_norm(x[0], x[1], x[2])?,
        OpKind::BatchNorm => g.batch_norm(x[0], x[1], x[2])?,
        OpKind::Relu => g.relu(x[0]),
        OpKind::Sigmoid => g.sigmoid(x[0]),
        OpKind::Tanh => g.tanh(x[0]),
        OpKind::Softmax => g.softmax(x[0])?,
        OpKind::GlobalAvgPool => g.global_avg_pool(x[0])?,
        OpKind::ElementwiseMul => g.mul(x[0], x[1])?,
        OpKind::ElementwiseAdd => g.add(x[0], x[1])?,
        OpKind::ElementwiseSub => g.sub(x[0], x[1])?,
        OpKind::Concat => g.concat(&[x[0], x[1]], 1)?,
        OpKind::L1Distance => g.l1_distance(x[0], x[1])?,
        OpKind::L2Distance => g.l2_distance(x[0], x[1])?,
        OpKind::CosineSimilarity => g.cosine_similarity(x[0], x[1])?,
        OpKind::Mean => g.mean(x[0]),
        OpKind::AvgPool => g.avg_pool(x[0], 2)?,
        OpKind::Scale => g.scale(x[0], -1.7),
        OpKind::AddScalar => g.add_scalar(x[0], 0.3),
        OpKind::Slice => g.slice(x[0], 1, 1, 2)?,
        OpKind::Reshape => {
            let len = g.value(x[0]).len();
            g.reshape(x[0], &[len])?
        }
        OpKind::Sum => g.sum(x[0]),
        OpKind::Log => g.log(x[0]),
        OpKind::Abs => g.abs(x[0]),
        OpKind::Square => g.square(x[0]),
        OpKind::Normalize => g.normalize(x[0])?,
    })
}

/// Scalar objective `sum(op(inputs) * probe)` and the leaves it was built from.
fn objective(kind: OpKind, inputs: &[Tensor], probe_seed: u64) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = apply(kind, &mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let probe = random_tensor(&mut rng, g.shape(out), OpKind::Mean);
    let probe = g.constant(probe);
    let weighted = g.mul(out, probe)?;
    let loss = g.sum(weighted);
    Ok((g, vars, loss))
}

/// Max over all input coordinates of `|analytic - numeric| / max(1, |numeric|)`.
///
/// Numeric derivatives use central differences with step `eps`. Shapes that do
/// not fit the op report `f64::INFINITY`.
pub fn grad_check(kind: OpKind, spec: &InputSpec, eps: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs: Vec<Tensor> = spec.shapes.iter().map(|s| random_tensor(&mut rng, s, kind)).collect();
    if kind == OpKind::L1Distance && inputs.len() == 2 && inputs[0].shape() == inputs[1].shape() {
        // |a - b| has a kink where the operands meet
        let a = inputs[0].clone();
        for (b, &a) in inputs[1].data_mut().iter_mut().zip(a.data()) {
            if libm::fabs(a - *b) < 0.05 {
                *b = a - 0.1;
            }
        }
    }
    let probe_seed = spec.seed ^ 0x9e37_79b9_7f4a_7c15;
    let Ok((mut g, vars, loss)) = objective(kind, &inputs, probe_seed) else {
        return f64::INFINITY;
    };
    if g.backward(loss).is_err() {
        return f64::INFINITY;
    }
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        objective(kind, perturbed, probe_seed)
            .map(|(g, _, loss)| g.value(loss).item())
            .unwrap_or(f64::NAN)
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.clone();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + eps;
            let up = eval(&work);
            work[which].data_mut()[i] = orig - eps;
            let down = eval(&work);
            work[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = libm::fabs(grad.data()[i] - numeric) / libm::fmax(1.0, libm::fabs(numeric));
            if err.is_nan() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Worst error per op kind over `instances` seeded instances.
pub fn grad_check_all(instances: u64, eps: f64) -> Vec<(OpKind, f64)> {
    OpKind::ALL
        .iter()
        .map(|&kind| {
            let worst = (0..instances)
                .map(|seed| grad_check(kind, &InputSpec::default_for(kind, seed), eps))
                .fold(0.0, f64::max);
            (kind, worst)
        })
        .collect()
}
