//! Bilinear resampling and pixel shuffle/unshuffle rearrangements.

use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Source taps for one output position along one axis.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

/// Half-pixel-center source coordinates, corners not aligned; edge taps
/// are clamped (replicated).
fn taps(in_extent: usize, out_extent: usize) -> Vec<Tap> {
    let scale = in_extent as f64 / out_extent as f64;
    (0..out_extent)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = floor.max(0.0) as usize;
            let i1 = (floor + 1.0).max(0.0).min(in_extent as f64 - 1.0) as usize;
            let i0 = i0.min(in_extent - 1);
            Tap { i0, i1, frac }
        })
        .collect()
}

/// Bilinear interpolation to `round(extent * scale)` per axis.
pub fn bilinear_resize<E: Elem>(x: &Tensor<E>, scale: f64) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(TensorError::invalid(
            "bilinear_resize",
            format!("expected B x C x H x W, got {:?}", x.shape()),
        ));
    }
    if scale <= 0.0 {
        return Err(TensorError::invalid("bilinear_resize", "scale must be positive"));
    }
    let oh = (x.shape()[2] as f64 * scale).round() as usize;
    let ow = (x.shape()[3] as f64 * scale).round() as usize;
    bilinear_to(x, oh, ow)
}

/// Bilinear interpolation to an explicit target extent.
pub fn bilinear_to<E: Elem>(x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(TensorError::invalid(
            "bilinear_resize",
            format!("expected B x C x H x W, got {:?}", x.shape()),
        ));
    }
    if oh == 0 || ow == 0 {
        return Err(TensorError::invalid("bilinear_resize", "zero target extent"));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let ys = Arc::new(taps(h, oh));
    let xs = Arc::new(taps(w, ow));
    let maps = b * c;

    let mut out = vec![E::ZERO; maps * oh * ow];
    for m in 0..maps {
        let src = &x.data()[m * h * w..(m + 1) * h * w];
        let dst = &mut out[m * oh * ow..(m + 1) * oh * ow];
        for (oy, ty) in ys.iter().enumerate() {
            let fy = E::from_f64(ty.frac);
            let gy = E::ONE - fy;
            let r0 = &src[ty.i0 * w..ty.i0 * w + w];
            let r1 = &src[ty.i1 * w..ty.i1 * w + w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, tx) in xs.iter().enumerate() {
                let fx = E::from_f64(tx.frac);
                let gx = E::ONE - fx;
                drow[ox] = gy * (gx * r0[tx.i0] + fx * r0[tx.i1])
                    + fy * (gx * r1[tx.i0] + fx * r1[tx.i1]);
            }
        }
    }

    let (ys_b, xs_b) = (Arc::clone(&ys), Arc::clone(&xs));
    Ok(Tensor::from_op(
        &[x],
        vec![b, c, oh, ow],
        out,
        move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![E::ZERO; maps * h * w];
                for m in 0..maps {
                    let gsrc = &g[m * oh * ow..(m + 1) * oh * ow];
                    let dxm = &mut dx[m * h * w..(m + 1) * h * w];
                    for (oy, ty) in ys_b.iter().enumerate() {
                        let fy = E::from_f64(ty.frac);
                        let gy = E::ONE - fy;
                        for (ox, tx) in xs_b.iter().enumerate() {
                            let fx = E::from_f64(tx.frac);
                            let gx = E::ONE - fx;
                            let gv = gsrc[oy * ow + ox];
                            dxm[ty.i0 * w + tx.i0] += gv * gy * gx;
                            dxm[ty.i0 * w + tx.i1] += gv * gy * fx;
                            dxm[ty.i1 * w + tx.i0] += gv * fy * gx;
                            dxm[ty.i1 * w + tx.i1] += gv * fy * fx;
                        }
                    }
                }
                dx
            });
            vec![dx]
        },
    ))
}

/// `B x C x H x W -> B x C r^2 x H/r x W/r`: each non-overlapping
/// `r x r` block moves into the channel dimension. Pure index
/// permutation, so the value multiset is preserved exactly.
pub fn pixel_unshuffle<E: Elem>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(TensorError::invalid(
            "pixel_unshuffle",
            format!("expected B x C x H x W, got {:?}", x.shape()),
        ));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(TensorError::invalid(
            "pixel_unshuffle",
            format!("extent {h}x{w} not divisible by factor {r}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let oc = c * r * r;
    // out[b, c*r*r + dy*r + dx, oy, ox] = in[b, c, oy*r + dy, ox*r + dx]
    let mut gather = vec![0usize; x.len()];
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..oc {
            let (cin, rem) = (ci / (r * r), ci % (r * r));
            let (dy, dx) = (rem / r, rem % r);
            for oy in 0..oh {
                for ox in 0..ow {
                    gather[o] = ((bi * c + cin) * h + oy * r + dy) * w + ox * r + dx;
                    o += 1;
                }
            }
        }
    }
    apply_gather(x, vec![b, oc, oh, ow], gather)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<E: Elem>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    if x.rank() != 4 {
        return Err(TensorError::invalid(
            "pixel_shuffle",
            format!("expected B x C x H x W, got {:?}", x.shape()),
        ));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if r == 0 || c % (r * r) != 0 {
        return Err(TensorError::invalid(
            "pixel_shuffle",
            format!("channel count {c} not divisible by {r}^2"),
        ));
    }
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut gather = vec![0usize; x.len()];
    let mut o = 0;
    for bi in 0..b {
        for ci in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, dy) = (oy / r, oy % r);
                    let (ix, dx) = (ox / r, ox % r);
                    let cin = ci * r * r + dy * r + dx;
                    gather[o] = ((bi * c + cin) * h + iy) * w + ix;
                    o += 1;
                }
            }
        }
    }
    apply_gather(x, vec![b, oc, oh, ow], gather)
}

/// Copies `x` through a bijective index map; the backward pass scatters
/// through the inverse.
fn apply_gather<E: Elem>(
    x: &Tensor<E>,
    out_shape: Vec<usize>,
    gather: Vec<usize>,
) -> Result<Tensor<E>> {
    let data: Vec<E> = gather.iter().map(|&i| x.data()[i]).collect();
    let in_len = x.len();
    let gather = Arc::new(gather);
    Ok(Tensor::from_op(&[x], out_shape, data, move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = vec![E::ZERO; in_len];
            for (o, &i) in gather.iter().enumerate() {
                dx[i] += g[o];
            }
            dx
        });
        vec![dx]
    }))
}
