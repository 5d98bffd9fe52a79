//! Batch and layer normalization for `B x C x H x W` maps.

use super::{Init, Mode, ModelParams, ParamCtx, ParamId};
use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with running statistics.
///
/// Train mode normalizes with population batch statistics over
/// `(B, H, W)` and folds them into the running buffers with momentum
/// 0.1; eval mode normalizes with the buffers. A train-mode batch of
/// one is rejected: its variance carries no information.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: params.param(format!("{name}.gamma"), vec![channels], Init::Const(1.0)),
            beta: params.param(format!("{name}.beta"), vec![channels], Init::Const(0.0)),
            running_mean: params.buffer(
                format!("{name}.running_mean"),
                vec![channels],
                Init::Const(0.0),
            ),
            running_var: params.buffer(
                format!("{name}.running_var"),
                vec![channels],
                Init::Const(1.0),
            ),
        }
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("expected B x {} x H x W, got {:?}", self.channels, x.shape()),
            ));
        }
        let c = self.channels;
        let (mean, var) = match ctx.mode() {
            Mode::Train => {
                if x.shape()[0] < 2 {
                    return Err(TensorError::invalid(
                        "batch_norm",
                        "train mode needs batch size >= 2",
                    ));
                }
                let mean = x.mean_axes(&[0, 2, 3], true)?;
                let centered = x.sub(&mean)?;
                let var = centered.mul(&centered)?.mean_axes(&[0, 2, 3], true)?;
                // Fold batch stats into the running buffers (values only,
                // never part of the differentiated graph).
                let m = BN_MOMENTUM;
                let fold = |buf: ParamId, batch: &Tensor<E>| {
                    let old = ctx.buffer(buf);
                    let new = old
                        .scale(E::from_f64(1.0 - m))
                        .add(&batch.detach().reshape(vec![c]).unwrap().scale(E::from_f64(m)))
                        .unwrap();
                    ctx.set_buffer(buf, new);
                };
                fold(self.running_mean, &mean);
                fold(self.running_var, &var);
                (mean, var)
            }
            Mode::Eval => (
                ctx.buffer(self.running_mean).reshape(vec![1, c, 1, 1])?,
                ctx.buffer(self.running_var).reshape(vec![1, c, 1, 1])?,
            ),
        };
        let std = var.add_scalar(E::from_f64(NORM_EPS)).sqrt();
        let normed = x.sub(&mean)?.div(&std)?;
        let gamma = ctx.get(self.gamma).reshape(vec![1, c, 1, 1])?;
        let beta = ctx.get(self.beta).reshape(vec![1, c, 1, 1])?;
        normed.mul(&gamma)?.add(&beta)
    }
}

/// Layer normalization over the channel dimension, per spatial position.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Self {
        LayerNorm {
            channels,
            gamma: params.param(format!("{name}.gamma"), vec![channels], Init::Const(1.0)),
            beta: params.param(format!("{name}.beta"), vec![channels], Init::Const(0.0)),
        }
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return Err(TensorError::invalid(
                "layer_norm",
                format!("expected B x {} x H x W, got {:?}", self.channels, x.shape()),
            ));
        }
        let c = self.channels;
        let mean = x.mean_axes(&[1], true)?;
        let centered = x.sub(&mean)?;
        let var = centered.mul(&centered)?.mean_axes(&[1], true)?;
        let std = var.add_scalar(E::from_f64(NORM_EPS)).sqrt();
        let normed = centered.div(&std)?;
        let gamma = ctx.get(self.gamma).reshape(vec![1, c, 1, 1])?;
        let beta = ctx.get(self.beta).reshape(vec![1, c, 1, 1])?;
        normed.mul(&gamma)?.add(&beta)
    }
}
