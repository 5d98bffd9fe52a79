//! Dense layer over the trailing feature dimension.

use super::{Init, ModelParams, ParamCtx, ParamId};
use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: in x out`, applied to `[..., in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = params.param(format!("{name}.weight"), vec![d_in, d_out], Init::FanIn(d_in));
        let b = params.param(format!("{name}.bias"), vec![d_out], Init::FanIn(d_in));
        Linear { d_in, d_out, w, b }
    }

    /// Zero-initialized variant for the last layer of a gating branch.
    pub fn new_zeroed<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = params.param(format!("{name}.weight"), vec![d_in, d_out], Init::Const(0.0));
        let b = params.param(format!("{name}.bias"), vec![d_out], Init::Const(0.0));
        Linear { d_in, d_out, w, b }
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() < 1 || x.shape()[x.rank() - 1] != self.d_in {
            return Err(TensorError::invalid(
                "linear",
                format!("input {:?} does not end in {}", x.shape(), self.d_in),
            ));
        }
        let w = ctx.get(self.w);
        let b = ctx.get(self.b);
        let flat = if x.rank() == 1 {
            x.reshape(vec![1, self.d_in])?
        } else {
            x.clone()
        };
        let y = flat.matmul(&w)?.add(&b)?;
        if x.rank() == 1 {
            y.reshape(vec![self.d_out])
        } else {
            Ok(y)
        }
    }
}
