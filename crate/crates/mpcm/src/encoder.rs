//! Multi-scale partial attention convolution encoder.
//!
//! Four stages of strided downsampling, each followed by a block that
//! splits channels at ratio 1/4: a cheap convolution processes the small
//! part while an attention path (coordinate attention, spatial gating,
//! or amplitude-aware linear attention in the final stage) processes the
//! rest.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::nn::{
    channel_max, channel_mean, gap_h, gap_w, BatchNorm, Conv2d, ConvSpec, Init, LayerNorm,
    ModelParams, ParamCtx, ParamId, StripConv,
};
use crate::tensor::Tensor;

/// Channel-splitting ratio between the convolution part and the
/// attention part of the partial modules.
pub const SPLIT_RATIO: f64 = 0.25;

/// First-part width of the channel split.
pub fn split_point(channels: usize) -> usize {
    (channels as f64 * SPLIT_RATIO).round() as usize
}

fn bottleneck_width(channels: usize) -> usize {
    (channels / 4).max(4)
}

// ---------------------------------------------------------------------------
// MEL: multi-scale extraction layer
// ---------------------------------------------------------------------------

/// 1x1 mix + BN + ReLU feeding three parallel strip branches (widths 7,
/// 11, 21) plus an identity branch, summed and mixed by a final 1x1.
#[derive(Clone, Debug)]
pub struct Mel {
    pub pre: Conv2d,
    pub pre_bn: BatchNorm,
    pub strips: Vec<StripConv>,
    pub mix: Conv2d,
}

pub const STRIP_SCALES: [usize; 3] = [7, 11, 21];

impl Mel {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Self {
        let strips = STRIP_SCALES
            .iter()
            .map(|&k| StripConv::new(params, &format!("{name}.strip{k}"), channels, k).unwrap())
            .collect();
        Mel {
            pre: Conv2d::new(params, &format!("{name}.pre"), ConvSpec::same(channels, channels, 1)),
            pre_bn: BatchNorm::new(params, &format!("{name}.pre_bn"), channels),
            strips,
            mix: Conv2d::new(params, &format!("{name}.mix"), ConvSpec::same(channels, channels, 1)),
        }
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.pre_bn.forward(ctx, &self.pre.forward(ctx, x)?)?.relu();
        let mut acc = h.clone();
        for strip in &self.strips {
            acc = acc.add(&strip.forward(ctx, &h)?)?;
        }
        self.mix.forward(ctx, &acc)
    }
}

// ---------------------------------------------------------------------------
// coordinate attention (the ParCM attention path)
// ---------------------------------------------------------------------------

/// Every intermediate of one coordinate-attention pass, for tests and
/// transcription oracles.
pub struct CoordAttnParts<E: Elem> {
    /// width-pooled descriptor, B x C' x H x 1
    pub x_w: Tensor<E>,
    /// height-pooled descriptor, B x C' x 1 x W
    pub x_h: Tensor<E>,
    /// concatenated descriptor, B x C' x 1 x (H+W)
    pub x_cat: Tensor<E>,
    /// bottleneck activation, B x mid x 1 x (H+W)
    pub x_mid: Tensor<E>,
    /// width gate, B x C' x H x 1, values in (0,1)
    pub w_w: Tensor<E>,
    /// height gate, B x C' x 1 x W, values in (0,1)
    pub w_h: Tensor<E>,
    pub out: Tensor<E>,
}

/// Direction-wise pooled channel attention: pools along each spatial
/// axis, encodes both descriptors through a shared bottleneck, then
/// gates the input with a sigmoid field per direction.
#[derive(Clone, Debug)]
pub struct CoordAttn {
    pub channels: usize,
    pub mid: usize,
    pub reduce: Conv2d,
    pub reduce_bn: BatchNorm,
    pub gate_w: Conv2d,
    pub gate_h: Conv2d,
}

impl CoordAttn {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Self {
        let mid = bottleneck_width(channels);
        CoordAttn {
            channels,
            mid,
            reduce: Conv2d::new(params, &format!("{name}.reduce"), ConvSpec::same(channels, mid, 1)),
            reduce_bn: BatchNorm::new(params, &format!("{name}.reduce_bn"), mid),
            gate_w: Conv2d::new_zeroed(params, &format!("{name}.gate_w"), ConvSpec::same(mid, channels, 1)),
            gate_h: Conv2d::new_zeroed(params, &format!("{name}.gate_h"), ConvSpec::same(mid, channels, 1)),
        }
    }

    pub fn forward_detailed<E: Elem>(
        &self,
        ctx: &ParamCtx<E>,
        x: &Tensor<E>,
    ) -> Result<CoordAttnParts<E>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let x_w = gap_w(x)?;
        let x_h = gap_h(x)?;
        // lay both descriptors along the last axis: B x C' x 1 x (H+W)
        let x_w_flat = x_w.permute(&[0, 1, 3, 2])?;
        let x_cat = Tensor::concat(&[&x_w_flat, &x_h], 3)?;
        let x_mid = self
            .reduce_bn
            .forward(ctx, &self.reduce.forward(ctx, &x_cat)?)?
            .relu();
        let mid_w = x_mid.narrow(3, 0, h)?.permute(&[0, 1, 3, 2])?;
        let mid_h = x_mid.narrow(3, h, w)?;
        let w_w = self.gate_w.forward(ctx, &mid_w)?.sigmoid();
        let w_h = self.gate_h.forward(ctx, &mid_h)?.sigmoid();
        let out = x.mul(&w_w)?.mul(&w_h)?;
        Ok(CoordAttnParts {
            x_w,
            x_h,
            x_cat,
            x_mid,
            w_w,
            w_h,
            out,
        })
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.forward_detailed(ctx, x)?.out)
    }
}

// ---------------------------------------------------------------------------
// ParCM / ParSM
// ---------------------------------------------------------------------------

/// Partial channel module: 3x3 conv on the small channel part,
/// coordinate attention on the rest, concatenated back.
#[derive(Clone, Debug)]
pub struct ParCm {
    pub channels: usize,
    pub conv: Conv2d,
    pub ca: CoordAttn,
}

impl ParCm {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Result<Self> {
        if channels < 8 {
            return Err(TensorError::invalid(
                "parcm",
                format!("needs at least 8 channels for the split and bottleneck, got {channels}"),
            ));
        }
        let c_r = split_point(channels);
        Ok(ParCm {
            channels,
            conv: Conv2d::new(params, &format!("{name}.conv"), ConvSpec::same(c_r, c_r, 3)),
            ca: CoordAttn::new(params, &format!("{name}.ca"), channels - c_r),
        })
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (conv_part, attn_part) = x.split_ratio(1, SPLIT_RATIO)?;
        let c = self.conv.forward(ctx, &conv_part)?;
        let a = self.ca.forward(ctx, &attn_part)?;
        Tensor::concat(&[&c, &a], 1)
    }
}

/// Partial spatial module: 1x1 conv on the small part; the rest is
/// gated by a 7x7 convolution over its channel-collapsed max/mean maps.
#[derive(Clone, Debug)]
pub struct ParSm {
    pub channels: usize,
    pub conv: Conv2d,
    pub spatial: Conv2d,
}

impl ParSm {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Result<Self> {
        if channels < 4 {
            return Err(TensorError::invalid(
                "parsm",
                format!("needs at least 4 channels to split, got {channels}"),
            ));
        }
        let c_r = split_point(channels);
        Ok(ParSm {
            channels,
            conv: Conv2d::new(params, &format!("{name}.conv"), ConvSpec::same(c_r, c_r, 1)),
            spatial: Conv2d::new_zeroed(params, &format!("{name}.spatial"), ConvSpec::same(2, 1, 7)),
        })
    }

    /// The single-channel spatial gate, values in (0,1).
    pub fn gate<E: Elem>(&self, ctx: &ParamCtx<E>, attn_part: &Tensor<E>) -> Result<Tensor<E>> {
        let desc = Tensor::concat(&[&channel_max(attn_part)?, &channel_mean(attn_part)?], 1)?;
        Ok(self.spatial.forward(ctx, &desc)?.sigmoid())
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (conv_part, attn_part) = x.split_ratio(1, SPLIT_RATIO)?;
        let c = self.conv.forward(ctx, &conv_part)?;
        let gated = attn_part.mul(&self.gate(ctx, &attn_part)?)?;
        Tensor::concat(&[&c, &gated], 1)
    }
}

// ---------------------------------------------------------------------------
// SLA: amplitude-aware linear attention
// ---------------------------------------------------------------------------

/// Linear attention whose per-key weights are rescaled as
/// `alpha * li - beta` with `alpha = 1 + 1/sum(li)` and
/// `beta = sum(li)/N`, restoring amplitude sensitivity while keeping
/// O(N) cost. Weights sum to 1 per query by construction.
#[derive(Clone, Debug)]
pub struct Sla {
    pub dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl Sla {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::invalid(
                "sla",
                format!("heads {heads} must divide dim {dim}"),
            ));
        }
        Ok(Sla {
            dim,
            heads,
            wq: params.param(format!("{name}.wq"), vec![dim, dim], Init::FanIn(dim)),
            wk: params.param(format!("{name}.wk"), vec![dim, dim], Init::FanIn(dim)),
            wv: params.param(format!("{name}.wv"), vec![dim, dim], Init::FanIn(dim)),
        })
    }

    /// `x`: B x N x C tokens; output same shape.
    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 3 || x.shape()[2] != self.dim {
            return Err(TensorError::invalid(
                "sla",
                format!("expected B x N x {}, got {:?}", self.dim, x.shape()),
            ));
        }
        let n = x.shape()[1];
        if n == 0 {
            return Err(TensorError::invalid("sla", "zero-length token sequence"));
        }
        let q = x.matmul(&ctx.get(self.wq))?;
        let k = x.matmul(&ctx.get(self.wk))?;
        let v = x.matmul(&ctx.get(self.wv))?;
        if self.heads == 1 {
            return sla_attention(&q, &k, &v);
        }
        let dh = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qa = q.narrow(2, h * dh, dh)?;
            let ka = k.narrow(2, h * dh, dh)?;
            let va = v.narrow(2, h * dh, dh)?;
            outs.push(sla_attention(&qa, &ka, &va)?);
        }
        let refs: Vec<&Tensor<E>> = outs.iter().collect();
        Tensor::concat(&refs, 2)
    }
}

/// One attention head in linear form:
/// `out_i = alpha_i (phiQ (phiK^T V))_i - beta_i sum_j V_j`.
///
/// The similarity sum is floored at 1e-6 before the `1/sum` term: the
/// sum is positive by construction, but under extreme Q/K saturation it
/// underflows and `1/sum^2` in the backward pass would overflow f32.
/// The floor is far below any healthy operating point, so the weight
/// normalization property is unaffected where tests measure it.
pub fn sla_attention<E: Elem>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
    let n = q.shape()[1];
    let pq = q.phi();
    let pk = k.phi();
    let ksum = pk.sum_axes(&[1], true)?; // B x 1 x d
    let s_sum = pq
        .matmul(&ksum.permute(&[0, 2, 1])?)?
        .clamp_min(E::from_f64(1e-6)); // B x N x 1
    let alpha = Tensor::scalar(E::ONE).div(&s_sum)?.add_scalar(E::ONE);
    let beta = s_sum.scale(E::from_f64(1.0 / n as f64));
    let kv = pk.permute(&[0, 2, 1])?.matmul(v)?; // B x d x dv
    let lin = pq.matmul(&kv)?; // B x N x dv
    let vsum = v.sum_axes(&[1], true)?; // B x 1 x dv
    alpha.mul(&lin)?.sub(&beta.mul(&vsum)?)
}

// ---------------------------------------------------------------------------
// stage blocks and the encoder
// ---------------------------------------------------------------------------

/// Stage block for stages 1-3: MEL, ParCM, ParSM, each behind a
/// residual add.
#[derive(Clone, Debug)]
pub struct Mpc {
    pub mel: Mel,
    pub parcm: ParCm,
    pub parsm: ParSm,
}

impl Mpc {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Result<Self> {
        Ok(Mpc {
            mel: Mel::new(params, &format!("{name}.mel"), channels),
            parcm: ParCm::new(params, &format!("{name}.parcm"), channels)?,
            parsm: ParSm::new(params, &format!("{name}.parsm"), channels)?,
        })
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let x1 = x.add(&self.mel.forward(ctx, x)?)?;
        let x2 = x1.add(&self.parcm.forward(ctx, &x1)?)?;
        x2.add(&self.parsm.forward(ctx, &x2)?)
    }
}

/// Stage block for stage 4: MEL feeding token-space SLA (ParAM) and
/// ParSM, the latter two with residual connections. Tokens are
/// layer-normalized before attention; the similarity sums grow with the
/// square of the input scale, so unnormalized tokens let the attention
/// branch amplify without bound under training.
#[derive(Clone, Debug)]
pub struct Mpa {
    pub mel: Mel,
    pub pre_ln: LayerNorm,
    pub sla: Sla,
    pub parsm: ParSm,
}

impl Mpa {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Mpa {
            mel: Mel::new(params, &format!("{name}.mel"), channels),
            pre_ln: LayerNorm::new(params, &format!("{name}.pre_ln"), channels),
            sla: Sla::new(params, &format!("{name}.sla"), channels, heads)?,
            parsm: ParSm::new(params, &format!("{name}.parsm"), channels)?,
        })
    }

    /// ParAM: normalize, flatten the map to row-major tokens, attend,
    /// restore.
    pub fn param_attention<E: Elem>(
        &self,
        ctx: &ParamCtx<E>,
        x: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let normed = self.pre_ln.forward(ctx, x)?;
        let tokens = normed.permute(&[0, 2, 3, 1])?.reshape(vec![b, h * w, c])?;
        let attended = self.sla.forward(ctx, &tokens)?;
        attended.reshape(vec![b, h, w, c])?.permute(&[0, 3, 1, 2])
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = self.mel.forward(ctx, x)?;
        let y = y.add(&self.param_attention(ctx, &y)?)?;
        y.add(&self.parsm.forward(ctx, &y)?)
    }
}

/// Per-stage feature maps; stage `i` is `2^{i-1} c0 x H/2^i x W/2^i`.
pub struct EncoderFeatures<E: Elem> {
    pub f1: Tensor<E>,
    pub f2: Tensor<E>,
    pub f3: Tensor<E>,
    pub f4: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub c0: usize,
    pub stem: Conv2d,
    pub stage1: Mpc,
    pub down2: Conv2d,
    pub stage2: Mpc,
    pub down3: Conv2d,
    pub stage3: Mpc,
    pub down4: Conv2d,
    pub stage4: Mpa,
}

impl Encoder {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        c0: usize,
        heads: usize,
    ) -> Result<Self> {
        let down = |p: &mut ModelParams<E>, n: String, ci: usize, co: usize| {
            Conv2d::new(p, &n, ConvSpec::same(ci, co, 3).with_stride(2))
        };
        Ok(Encoder {
            c0,
            stem: down(params, format!("{name}.stem"), 3, c0),
            stage1: Mpc::new(params, &format!("{name}.stage1"), c0)?,
            down2: down(params, format!("{name}.down2"), c0, 2 * c0),
            stage2: Mpc::new(params, &format!("{name}.stage2"), 2 * c0)?,
            down3: down(params, format!("{name}.down3"), 2 * c0, 4 * c0),
            stage3: Mpc::new(params, &format!("{name}.stage3"), 4 * c0)?,
            down4: down(params, format!("{name}.down4"), 4 * c0, 8 * c0),
            stage4: Mpa::new(params, &format!("{name}.stage4"), 8 * c0, heads)?,
        })
    }

    pub fn forward<E: Elem>(
        &self,
        ctx: &ParamCtx<E>,
        img: &Tensor<E>,
    ) -> Result<EncoderFeatures<E>> {
        if img.rank() != 4 || img.shape()[1] != 3 {
            return Err(TensorError::invalid(
                "encoder",
                format!("expected B x 3 x H x W, got {:?}", img.shape()),
            ));
        }
        let (h, w) = (img.shape()[2], img.shape()[3]);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(TensorError::invalid(
                "encoder",
                format!("spatial extents must be divisible by 16, got {h}x{w}"),
            ));
        }
        let f1 = self.stage1.forward(ctx, &self.stem.forward(ctx, img)?)?;
        let f2 = self.stage2.forward(ctx, &self.down2.forward(ctx, &f1)?)?;
        let f3 = self.stage3.forward(ctx, &self.down3.forward(ctx, &f2)?)?;
        let f4 = self.stage4.forward(ctx, &self.down4.forward(ctx, &f3)?)?;
        Ok(EncoderFeatures { f1, f2, f3, f4 })
    }
}
