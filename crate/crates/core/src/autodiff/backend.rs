use super::kernels::{self, OpKind};
use super::tensor::Tensor;
use crate::error::Result;

/// An evaluation strategy for computations written against the op catalog.
///
/// Model code is generic over this trait, so the same forward pass runs as a
/// plain evaluation ([`Eval`]), a recorded one ([`Tape`](super::Tape)) or a
/// dual-number one ([`DualEval`](super::DualEval)).
pub trait Backend {
    type Value: Clone;

    /// Lifts a tensor that carries no gradient or tangent.
    fn constant(&mut self, t: Tensor) -> Self::Value;

    fn apply(&mut self, kind: OpKind, inputs: &[&Self::Value]) -> Result<Self::Value>;

    /// The concrete (primal) tensor behind a value.
    fn primal<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;
}

/// Named constructors for every catalog op; blanket-implemented for all
/// backends.
pub trait Ops: Backend {
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Div, &[a, b])
    }
    fn scale(&mut self, a: &Self::Value, s: f64) -> Result<Self::Value> {
        self.apply(OpKind::Scale(s), &[a])
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Matmul, &[a, b])
    }
    fn linear(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Linear, &[x, w, b])
    }
    fn conv2d(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value> {
        let kind = OpKind::Conv2d {
            stride,
            padding,
            bias: b.is_some(),
        };
        match b {
            Some(b) => self.apply(kind, &[x, w, b]),
            None => self.apply(kind, &[x, w]),
        }
    }
    fn upsample_nearest2x(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::UpsampleNearest2x, &[x])
    }
    fn group_norm(
        &mut self,
        x: &Self::Value,
        gamma: &Self::Value,
        beta: &Self::Value,
        groups: usize,
        eps: f64,
    ) -> Result<Self::Value> {
        self.apply(OpKind::GroupNorm { groups, eps }, &[x, gamma, beta])
    }
    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Silu, &[x])
    }
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }
    fn concat_channels(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::ConcatChannels, &[a, b])
    }
    fn add_channel_bias(&mut self, x: &Self::Value, v: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::AddChannelBias, &[x, v])
    }
    fn embedding(&mut self, table: &Self::Value, ids: &[usize]) -> Result<Self::Value> {
        self.apply(OpKind::Embedding(ids.to_vec()), &[table])
    }
    fn sinusoidal(&mut self, t: &Self::Value, dim: usize) -> Result<Self::Value> {
        self.apply(OpKind::Sinusoidal(dim), &[t])
    }
    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Mean, &[x])
    }
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Sum, &[x])
    }
    fn mse(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(OpKind::Mse, &[a, b])
    }
}

impl<B: Backend + ?Sized> Ops for B {}

/// Plain evaluation: no recording, no tangents.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type Value = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn apply(&mut self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        kernels::forward(&kind, inputs).map(|(t, _)| t)
    }

    fn primal<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
}
