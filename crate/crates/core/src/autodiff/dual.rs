use super::backend::Backend;
use super::kernels::{self, OpKind};
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// A primal tensor paired with a tangent of the same shape.
///
/// A zero tangent is stored implicitly so that parameters (which never carry
/// a direction) cost nothing extra in forward mode.
#[derive(Clone, Debug, PartialEq)]
pub struct DualTensor {
    primal: Tensor,
    tangent: Option<Tensor>,
}

impl DualTensor {
    pub fn new(primal: Tensor, tangent: Tensor) -> Result<Self> {
        Self::with_optional_tangent(primal, Some(tangent))
    }

    pub fn constant(primal: Tensor) -> Self {
        Self { primal, tangent: None }
    }

    pub(crate) fn with_optional_tangent(primal: Tensor, tangent: Option<Tensor>) -> Result<Self> {
        if let Some(t) = &tangent {
            if t.shape() != primal.shape() {
                return shape_err(
                    "dual",
                    format!("tangent {:?} vs primal {:?}", t.shape(), primal.shape()),
                );
            }
        }
        Ok(Self { primal, tangent })
    }

    pub fn primal(&self) -> &Tensor {
        &self.primal
    }

    /// The tangent, materialized as zeros when implicit.
    pub fn tangent(&self) -> Tensor {
        self.tangent
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.primal.shape()))
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        let tangent = self.tangent();
        (self.primal, tangent)
    }
}

/// Dual-number evaluation: every op produces its value and its directional
/// derivative in the same pass.
#[derive(Debug, Default, Clone, Copy)]
pub struct DualEval;

impl Backend for DualEval {
    type Value = DualTensor;

    fn constant(&mut self, t: Tensor) -> DualTensor {
        DualTensor::constant(t)
    }

    fn apply(&mut self, kind: OpKind, inputs: &[&DualTensor]) -> Result<DualTensor> {
        let primals: Vec<&Tensor> = inputs.iter().map(|d| &d.primal).collect();
        let (primal, saved) = kernels::forward(&kind, &primals)?;
        let tangents: Vec<Option<&Tensor>> = inputs.iter().map(|d| d.tangent.as_ref()).collect();
        let tangent = kernels::jvp(&kind, &primals, &tangents, &saved)?;
        Ok(DualTensor { primal, tangent })
    }

    fn primal<'a>(&'a self, v: &'a DualTensor) -> &'a Tensor {
        &v.primal
    }
}
