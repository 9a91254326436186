//! Finite-difference oracles for gradients and JVPs.
//!
//! Everything here evaluates functions with the plain [`Eval`] backend only,
//! so the checks stay independent of the reverse and forward rules they
//! verify.

use rand::Rng;

use super::backend::{Backend, Eval, Ops};
use super::kernels::OpKind;
use super::tensor::Tensor;
use super::{jvp, value_and_grad, Differentiable};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `‖a − b‖ / max(‖b‖, floor)`
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> Result<f64> {
    let diff = a.sub(b)?;
    let num = diff.dot(&diff)?.sqrt();
    let den = b.dot(b)?.sqrt().max(floor);
    Ok(num / den)
}

/// Central-difference gradient of a scalar function for every input element.
pub fn fd_gradient(f: impl Fn(&[Tensor]) -> Result<f64>, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Central-difference directional derivative `(f(x+hv) − f(x−hv)) / 2h`.
pub fn fd_directional(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[Tensor],
    tangents: &[Tensor],
    h: f64,
) -> Result<Tensor> {
    let shift = |sign: f64| -> Result<Vec<Tensor>> {
        inputs
            .iter()
            .zip(tangents)
            .map(|(x, v)| x.add(&v.scale(sign * h)))
            .collect()
    };
    let up = f(&shift(1.0)?)?;
    let down = f(&shift(-1.0)?)?;
    Ok(up.sub(&down)?.scale(1.0 / (2.0 * h)))
}

/// One catalog op applied to fixed inputs.
#[derive(Clone, Debug)]
pub struct OpCase {
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
}

impl Differentiable for OpCase {
    fn apply<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> Result<B::Value> {
        let refs: Vec<&B::Value> = inputs.iter().collect();
        b.apply(self.kind.clone(), &refs)
    }
}

/// Contracts an op's output with fixed weights so it becomes a scalar.
struct Contracted<'a> {
    case: &'a OpCase,
    weights: Tensor,
}

impl Differentiable for Contracted<'_> {
    fn apply<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> Result<B::Value> {
        let out = self.case.apply(b, inputs)?;
        let w = b.constant(self.weights.clone());
        let prod = b.mul(&out, &w)?;
        b.sum(&prod)
    }
}

/// One randomly shaped instance of every op in the catalog, inputs drawn
/// from `U(-2, 2)`.
pub fn catalog_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<OpCase> {
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -2.0, 2.0, rng);
    let b = 2;
    let v = [3, 4];
    let img = [b, 8, 4, 4];
    vec![
        OpCase {
            kind: OpKind::Add,
            inputs: vec![u(&v), u(&v)],
        },
        OpCase {
            kind: OpKind::Sub,
            inputs: vec![u(&v), u(&v)],
        },
        OpCase {
            kind: OpKind::Mul,
            inputs: vec![u(&v), u(&v)],
        },
        OpCase {
            kind: OpKind::Div,
            inputs: vec![u(&v), u(&v).map(|d| d.signum() * (d.abs() + 0.5))],
        },
        OpCase {
            kind: OpKind::Scale(-1.7),
            inputs: vec![u(&v)],
        },
        OpCase {
            kind: OpKind::Matmul,
            inputs: vec![u(&[3, 5]), u(&[5, 2])],
        },
        OpCase {
            kind: OpKind::Linear,
            inputs: vec![u(&[b, 5]), u(&[3, 5]), u(&[3])],
        },
        OpCase {
            kind: OpKind::Conv2d {
                stride: 1,
                padding: 1,
                bias: true,
            },
            inputs: vec![u(&[b, 3, 5, 5]), u(&[4, 3, 3, 3]), u(&[4])],
        },
        OpCase {
            kind: OpKind::Conv2d {
                stride: 2,
                padding: 1,
                bias: true,
            },
            inputs: vec![u(&[b, 3, 6, 6]), u(&[2, 3, 3, 3]), u(&[2])],
        },
        OpCase {
            kind: OpKind::Conv2d {
                stride: 1,
                padding: 0,
                bias: false,
            },
            inputs: vec![u(&[b, 3, 4, 4]), u(&[5, 3, 1, 1])],
        },
        OpCase {
            kind: OpKind::UpsampleNearest2x,
            inputs: vec![u(&[b, 2, 3, 3])],
        },
        OpCase {
            kind: OpKind::GroupNorm { groups: 4, eps: 1e-5 },
            inputs: vec![u(&img), u(&[8]), u(&[8])],
        },
        OpCase {
            kind: OpKind::Silu,
            inputs: vec![u(&v)],
        },
        OpCase {
            kind: OpKind::Reshape(vec![4, 3]),
            inputs: vec![u(&v)],
        },
        OpCase {
            kind: OpKind::ConcatChannels,
            inputs: vec![u(&[b, 2, 3, 3]), u(&[b, 3, 3, 3])],
        },
        OpCase {
            kind: OpKind::AddChannelBias,
            inputs: vec![u(&img), u(&[b, 8])],
        },
        OpCase {
            kind: OpKind::Embedding(vec![2, 0, 2]),
            inputs: vec![u(&[4, 6])],
        },
        OpCase {
            kind: OpKind::Sinusoidal(8),
            inputs: vec![u(&[3])],
        },
        OpCase {
            kind: OpKind::Mean,
            inputs: vec![u(&v)],
        },
        OpCase {
            kind: OpKind::Sum,
            inputs: vec![u(&v)],
        },
        OpCase {
            kind: OpKind::Mse,
            inputs: vec![u(&v), u(&v)],
        },
    ]
}

/// Largest relative error between the taped gradient and central
/// differences, over all inputs of the case.
pub fn gradient_error<R: Rng + ?Sized>(case: &OpCase, rng: &mut R, h: f64) -> Result<f64> {
    let (out, _) = super::kernels::forward(&case.kind, &case.inputs.iter().collect::<Vec<_>>())?;
    let weights = Tensor::uniform(out.shape(), -1.0, 1.0, rng);
    let f = Contracted { case, weights };
    let (_, analytic) = value_and_grad(&f, &case.inputs)?;
    let numeric = fd_gradient(|xs| f.apply(&mut Eval, xs)?.item(), &case.inputs, h)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        worst = worst.max(relative_error(a, n, 1e-8)?);
    }
    Ok(worst)
}

/// `‖fd − jvp‖ / (‖jvp‖ + 1e-8)` along a random direction.
pub fn jvp_error<F: Differentiable, R: Rng + ?Sized>(f: &F, inputs: &[Tensor], rng: &mut R, h: f64) -> Result<f64> {
    let tangents: Vec<Tensor> = inputs
        .iter()
        .map(|x| Tensor::uniform(x.shape(), -1.0, 1.0, rng))
        .collect();
    let (_, jv) = jvp(f, inputs, &tangents)?;
    let fd = fd_directional(|xs| f.apply(&mut Eval, xs), inputs, &tangents, h)?;
    let diff = fd.sub(&jv)?;
    Ok(diff.dot(&diff)?.sqrt() / (jv.dot(&jv)?.sqrt() + 1e-8))
}

/// `|⟨J v, w⟩ − ⟨v, Jᵀ w⟩|` for random `v`, `w`, with `Jᵀ w` taken from the
/// reverse pass.
pub fn transpose_gap<F: Differentiable, R: Rng + ?Sized>(f: &F, inputs: &[Tensor], rng: &mut R) -> Result<f64> {
    let tangents: Vec<Tensor> = inputs
        .iter()
        .map(|x| Tensor::uniform(x.shape(), -1.0, 1.0, rng))
        .collect();
    let (out, jv) = jvp(f, inputs, &tangents)?;
    let w = Tensor::uniform(out.shape(), -1.0, 1.0, rng);
    let lhs = jv.dot(&w)?;
    let contracted = ContractedFn { f, weights: w };
    let (_, jtw) = value_and_grad(&contracted, inputs)?;
    let mut rhs = 0.0;
    for (v, g) in tangents.iter().zip(&jtw) {
        rhs += v.dot(g)?;
    }
    Ok((lhs - rhs).abs())
}

struct ContractedFn<'a, F> {
    f: &'a F,
    weights: Tensor,
}

impl<F: Differentiable> Differentiable for ContractedFn<'_, F> {
    fn apply<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> Result<B::Value> {
        let out = self.f.apply(b, inputs)?;
        let w = b.constant(self.weights.clone());
        let prod = b.mul(&out, &w)?;
        b.sum(&prod)
    }
}

/// Three dense layers with SiLU between them.
///
/// Inputs: `x [B, d0]`, then `(w, b)` for each layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct ThreeLayerNet;

impl ThreeLayerNet {
    pub fn random_inputs<R: Rng + ?Sized>(rng: &mut R, dims: [usize; 4], batch: usize) -> Vec<Tensor> {
        let mut out = vec![Tensor::uniform(&[batch, dims[0]], -2.0, 2.0, rng)];
        for l in 0..3 {
            out.push(Tensor::uniform(&[dims[l + 1], dims[l]], -1.0, 1.0, rng));
            out.push(Tensor::uniform(&[dims[l + 1]], -1.0, 1.0, rng));
        }
        out
    }
}

impl Differentiable for ThreeLayerNet {
    fn apply<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> Result<B::Value> {
        let mut h = inputs[0].clone();
        for l in 0..3 {
            h = b.linear(&h, &inputs[1 + 2 * l], &inputs[2 + 2 * l])?;
            if l < 2 {
                h = b.silu(&h)?;
            }
        }
        Ok(h)
    }
}

/// Small convolutional network touching every image op: conv, group norm,
/// SiLU, strided conv, upsample, channel concat and channel bias.
///
/// Inputs: `x [B, 2, 4, 4]`, conv weights/biases, norm affine, bias `[B, 8]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SmallConvNet;

impl SmallConvNet {
    pub fn random_inputs<R: Rng + ?Sized>(rng: &mut R, batch: usize) -> Vec<Tensor> {
        let mut u = |s: &[usize], a: f64| Tensor::uniform(s, -a, a, rng);
        vec![
            u(&[batch, 2, 4, 4], 2.0),
            u(&[8, 2, 3, 3], 0.5),
            u(&[8], 0.5),
            u(&[8], 1.0),
            u(&[8], 1.0),
            u(&[batch, 8], 1.0),
            u(&[8, 8, 3, 3], 0.3),
            u(&[8], 0.5),
            u(&[2, 16, 1, 1], 0.3),
        ]
    }
}

impl Differentiable for SmallConvNet {
    fn apply<B: Backend>(&self, b: &mut B, p: &[B::Value]) -> Result<B::Value> {
        let h = b.conv2d(&p[0], &p[1], Some(&p[2]), 1, 1)?;
        let h = b.group_norm(&h, &p[3], &p[4], 4, 1e-5)?;
        let h = b.silu(&h)?;
        let h = b.add_channel_bias(&h, &p[5])?;
        let d = b.conv2d(&h, &p[6], Some(&p[7]), 2, 1)?;
        let u = b.upsample_nearest2x(&d)?;
        let cat = b.concat_channels(&u, &h)?;
        b.conv2d(&cat, &p[8], None, 1, 0)
    }
}
