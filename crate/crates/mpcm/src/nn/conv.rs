//! 2-D convolution (cross-correlation) and strip convolutions.

use super::{Init, ModelParams, ParamCtx, ParamId};
use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Geometry of a conv2d call. Weights are laid out
/// `out_ch x in_ch/groups x kh x kw`, bias `out_ch`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub dilation: (usize, usize),
}

impl ConvSpec {
    /// Square `k x k` kernel with stride 1 and same-extent padding.
    pub fn same(in_ch: usize, out_ch: usize, k: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            groups: 1,
            dilation: (1, 1),
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> Self {
        self.padding = (ph, pw);
        self
    }

    pub fn with_kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn depthwise(mut self) -> Self {
        self.groups = self.in_ch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "groups {} must divide in_ch {} and out_ch {}",
                    self.groups, self.in_ch, self.out_ch
                ),
            ));
        }
        if self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride.0 == 0
            || self.stride.1 == 0
            || self.dilation.0 == 0
            || self.dilation.1 == 0
        {
            return Err(TensorError::invalid("conv2d", "zero kernel/stride/dilation"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_ch,
            self.in_ch / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn fan_in(&self) -> usize {
        (self.in_ch / self.groups) * self.kernel.0 * self.kernel.1
    }

    /// `floor((in + 2 pad - dilation (k - 1) - 1) / stride) + 1` per axis.
    pub fn out_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ext = |i: usize, p: usize, d: usize, k: usize, s: usize| -> Result<usize> {
            let span = i + 2 * p;
            let need = d * (k - 1) + 1;
            if span < need {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("input extent {i} too small for kernel {k} (pad {p}, dilation {d})"),
                ));
            }
            Ok((span - need) / s + 1)
        };
        Ok((
            ext(h, self.padding.0, self.dilation.0, self.kernel.0, self.stride.0)?,
            ext(w, self.padding.1, self.dilation.1, self.kernel.1, self.stride.1)?,
        ))
    }
}

/// Output-column range [lo, hi) for which `ox*sw + off` lands inside
/// `[0, in_w)`.
fn col_range(off: isize, sw: usize, in_w: usize, ow: usize) -> (usize, usize) {
    let sw = sw as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off + sw - 1) / sw) as usize
    };
    let max_ix = in_w as isize - 1 - off;
    if max_ix < 0 {
        return (0, 0);
    }
    let hi = ((max_ix / sw) + 1).min(ow as isize) as usize;
    (lo.min(hi), hi)
}

struct ConvDims {
    batch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    icg: usize,
    ocg: usize,
}

fn conv_forward<E: Elem>(
    x: &[E],
    w: &[E],
    b: &[E],
    spec: &ConvSpec,
    d: &ConvDims,
) -> Vec<E> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let mut out = vec![E::ZERO; d.batch * spec.out_ch * d.oh * d.ow];
    let o_map = d.oh * d.ow;
    let i_map = d.h * d.w;
    for bi in 0..d.batch {
        for oc in 0..spec.out_ch {
            let g = oc / d.ocg;
            let out_base = (bi * spec.out_ch + oc) * o_map;
            out[out_base..out_base + o_map].fill(b[oc]);
            for icl in 0..d.icg {
                let ic = g * d.icg + icl;
                let x_base = (bi * spec.in_ch + ic) * i_map;
                let w_base = (oc * d.icg + icl) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[w_base + ky * kw + kx];
                        let off = (kx * dw) as isize - pw as isize;
                        let (lo, hi) = col_range(off, sw, d.w, d.ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..d.oh {
                            let iy = (oy * sh + ky * dh) as isize - ph as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * d.w;
                            let out_row = out_base + oy * d.ow;
                            if sw == 1 {
                                let xs =
                                    &x[x_row + (off + lo as isize) as usize..][..hi - lo];
                                let os = &mut out[out_row + lo..out_row + hi];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * sw) as isize + off;
                                    out[out_row + ox] += wv * x[x_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient with respect to the input: scatter `w * g` back through the
/// same index geometry as the forward pass.
fn conv_backward_input<E: Elem>(
    g: &[E],
    w: &[E],
    spec: &ConvSpec,
    d: &ConvDims,
) -> Vec<E> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let mut dx = vec![E::ZERO; d.batch * spec.in_ch * d.h * d.w];
    let o_map = d.oh * d.ow;
    let i_map = d.h * d.w;
    for bi in 0..d.batch {
        for oc in 0..spec.out_ch {
            let gr = oc / d.ocg;
            let g_base = (bi * spec.out_ch + oc) * o_map;
            for icl in 0..d.icg {
                let ic = gr * d.icg + icl;
                let dx_base = (bi * spec.in_ch + ic) * i_map;
                let w_base = (oc * d.icg + icl) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[w_base + ky * kw + kx];
                        let off = (kx * dw) as isize - pw as isize;
                        let (lo, hi) = col_range(off, sw, d.w, d.ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..d.oh {
                            let iy = (oy * sh + ky * dh) as isize - ph as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let dx_row = dx_base + iy as usize * d.w;
                            let g_row = g_base + oy * d.ow;
                            if sw == 1 {
                                let gs = &g[g_row + lo..g_row + hi];
                                let xs = &mut dx
                                    [dx_row + (off + lo as isize) as usize..][..hi - lo];
                                for (o, &gv) in xs.iter_mut().zip(gs) {
                                    *o += wv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * sw) as isize + off;
                                    dx[dx_row + ix as usize] += wv * g[g_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient with respect to weights: correlate input with the upstream
/// gradient over the same geometry.
fn conv_backward_weight<E: Elem>(
    g: &[E],
    x: &[E],
    spec: &ConvSpec,
    d: &ConvDims,
) -> Vec<E> {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let mut dw_out = vec![E::ZERO; spec.out_ch * d.icg * kh * kw];
    let o_map = d.oh * d.ow;
    let i_map = d.h * d.w;
    for bi in 0..d.batch {
        for oc in 0..spec.out_ch {
            let gr = oc / d.ocg;
            let g_base = (bi * spec.out_ch + oc) * o_map;
            for icl in 0..d.icg {
                let ic = gr * d.icg + icl;
                let x_base = (bi * spec.in_ch + ic) * i_map;
                let w_base = (oc * d.icg + icl) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let off = (kx * dw) as isize - pw as isize;
                        let (lo, hi) = col_range(off, sw, d.w, d.ow);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = E::ZERO;
                        for oy in 0..d.oh {
                            let iy = (oy * sh + ky * dh) as isize - ph as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * d.w;
                            let g_row = g_base + oy * d.ow;
                            if sw == 1 {
                                let xs =
                                    &x[x_row + (off + lo as isize) as usize..][..hi - lo];
                                let gs = &g[g_row + lo..g_row + hi];
                                for (&xv, &gv) in xs.iter().zip(gs) {
                                    acc += xv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * sw) as isize + off;
                                    acc += x[x_row + ix as usize] * g[g_row + ox];
                                }
                            }
                        }
                        dw_out[w_base + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw_out
}

/// Cross-correlation (no kernel flip) with zero padding.
pub fn conv2d<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    spec: &ConvSpec,
) -> Result<Tensor<E>> {
    spec.validate()?;
    if x.rank() != 4 || x.shape()[1] != spec.in_ch {
        return Err(TensorError::invalid(
            "conv2d",
            format!(
                "input {:?} does not match spec in_ch {}",
                x.shape(),
                spec.in_ch
            ),
        ));
    }
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: w.shape().to_vec(),
            rhs: spec.weight_shape(),
        });
    }
    if b.shape() != [spec.out_ch] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: b.shape().to_vec(),
            rhs: vec![spec.out_ch],
        });
    }
    let (batch, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (oh, ow) = spec.out_extent(h, wd)?;
    let dims = ConvDims {
        batch,
        h,
        w: wd,
        oh,
        ow,
        icg: spec.in_ch / spec.groups,
        ocg: spec.out_ch / spec.groups,
    };
    let out = conv_forward(x.data(), w.data(), b.data(), spec, &dims);

    let spec_c = *spec;
    let x_arc = x.data_arc();
    let w_arc = w.data_arc();
    let o_map = oh * ow;
    Ok(Tensor::from_op(
        &[x, w, b],
        vec![batch, spec.out_ch, oh, ow],
        out,
        move |g, needs| {
            let dims = ConvDims {
                batch,
                h,
                w: wd,
                oh,
                ow,
                icg: spec_c.in_ch / spec_c.groups,
                ocg: spec_c.out_ch / spec_c.groups,
            };
            let dx = needs[0].then(|| conv_backward_input(g, &w_arc, &spec_c, &dims));
            let dw = needs[1].then(|| conv_backward_weight(g, &x_arc, &spec_c, &dims));
            let db = needs[2].then(|| {
                let mut db = vec![E::ZERO; spec_c.out_ch];
                for bi in 0..batch {
                    for (oc, slot) in db.iter_mut().enumerate() {
                        let base = (bi * spec_c.out_ch + oc) * o_map;
                        for &gv in &g[base..base + o_map] {
                            *slot += gv;
                        }
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    ))
}

/// A conv2d layer owning its weight/bias registrations.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, spec: ConvSpec) -> Self {
        spec.validate().expect("conv spec");
        let fan_in = spec.fan_in();
        let w = params.param(
            format!("{name}.weight"),
            spec.weight_shape(),
            Init::FanIn(fan_in),
        );
        let b = params.param(format!("{name}.bias"), vec![spec.out_ch], Init::FanIn(fan_in));
        Conv2d { spec, w, b }
    }

    /// Zero-initialized variant for the last layer of a gating branch:
    /// every gate starts at its midpoint.
    pub fn new_zeroed<E: Elem>(params: &mut ModelParams<E>, name: &str, spec: ConvSpec) -> Self {
        spec.validate().expect("conv spec");
        let w = params.param(format!("{name}.weight"), spec.weight_shape(), Init::Const(0.0));
        let b = params.param(format!("{name}.bias"), vec![spec.out_ch], Init::Const(0.0));
        Conv2d { spec, w, b }
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, &ctx.get(self.w), &ctx.get(self.b), &self.spec)
    }
}

/// Depthwise strip convolution: `1 x k` followed by `k x 1`, both
/// depthwise with paddings `(0, (k-1)/2)` and `((k-1)/2, 0)`, so channel
/// count and spatial extent are preserved.
#[derive(Clone, Debug)]
pub struct StripConv {
    pub k: usize,
    pub row: Conv2d,
    pub col: Conv2d,
}

impl StripConv {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(TensorError::invalid(
                "strip_conv",
                format!("kernel length {k} must be odd"),
            ));
        }
        let row_spec = ConvSpec {
            in_ch: channels,
            out_ch: channels,
            kernel: (1, k),
            stride: (1, 1),
            padding: (0, (k - 1) / 2),
            groups: channels,
            dilation: (1, 1),
        };
        let col_spec = ConvSpec {
            kernel: (k, 1),
            padding: ((k - 1) / 2, 0),
            ..row_spec
        };
        Ok(StripConv {
            k,
            row: Conv2d::new(params, &format!("{name}.row"), row_spec),
            col: Conv2d::new(params, &format!("{name}.col"), col_spec),
        })
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mid = self.row.forward(ctx, x)?;
        self.col.forward(ctx, &mid)
    }
}
