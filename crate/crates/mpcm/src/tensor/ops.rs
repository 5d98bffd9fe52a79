//! Tensor primitives and their backward rules.
//!
//! Elementwise ops broadcast with the trailing-dimension rule (an extent
//! must match or be 1; missing leading dims count as 1). Reductions
//! accumulate in row-major order so results are bit-reproducible.

use std::sync::Arc;

use super::{numel, strides_of, Tensor};
use crate::elem::Elem;
use crate::error::{Result, TensorError};

// ---------------------------------------------------------------------------
// broadcasting machinery (shared by forward and backward paths)
// ---------------------------------------------------------------------------

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::NotBroadcastable {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out_shape`, 0 where broadcast.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides_of(shape);
    let off = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

fn bcast_zip<E: Elem>(
    out_shape: &[usize],
    a: &[E],
    a_shape: &[usize],
    b: &[E],
    b_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Vec<E> {
    // Fast path: identical shapes.
    if a_shape == b_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let n = numel(out_shape);
    let rank = out_shape.len();
    let sa = bcast_strides(a_shape, out_shape);
    let sb = bcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[ao], b[bo]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= sa[d] * out_shape[d];
            bo -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sums `g` (shaped `from`) down to `to`, undoing a broadcast.
fn reduce_to<E: Elem>(g: &[E], from: &[usize], to: &[usize]) -> Vec<E> {
    if from == to {
        return g.to_vec();
    }
    let n = numel(from);
    let rank = from.len();
    let st = bcast_strides(to, from);
    let mut out = vec![E::ZERO; numel(to)];
    let mut idx = vec![0usize; rank];
    let mut to_off = 0usize;
    for &v in g.iter().take(n) {
        out[to_off] += v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            to_off += st[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            to_off -= st[d] * from[d];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<E: Elem> Tensor<E> {
    fn binary(&self, rhs: &Tensor<E>, op: BinOp) -> Result<Tensor<E>> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let out_shape = broadcast_shape(name, self.shape(), rhs.shape())?;
        let data = bcast_zip(
            &out_shape,
            self.data(),
            self.shape(),
            rhs.data(),
            rhs.shape(),
            |a, b| match op {
                BinOp::Add => a + b,
                BinOp::Sub => a - b,
                BinOp::Mul => a * b,
                BinOp::Div => a / b,
            },
        );
        let (a_data, a_shape) = (self.data_arc(), self.shape().to_vec());
        let (b_data, b_shape) = (rhs.data_arc(), rhs.shape().to_vec());
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            &[self, rhs],
            out_shape,
            data,
            move |g, needs| {
                let da = needs[0].then(|| {
                    let full = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => bcast_zip(&os, g, &os, &b_data, &b_shape, |g, b| g * b),
                        BinOp::Div => bcast_zip(&os, g, &os, &b_data, &b_shape, |g, b| g / b),
                    };
                    reduce_to(&full, &os, &a_shape)
                });
                let db = needs[1].then(|| {
                    let full = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&v| -v).collect(),
                        BinOp::Mul => bcast_zip(&os, g, &os, &a_data, &a_shape, |g, a| g * a),
                        BinOp::Div => {
                            // d/db (a/b) = -a / b^2
                            let ga = bcast_zip(&os, g, &os, &a_data, &a_shape, |g, a| g * a);
                            let mut r = bcast_zip(&os, &ga, &os, &b_data, &b_shape, |v, b| {
                                -v / (b * b)
                            });
                            r.shrink_to_fit();
                            r
                        }
                    };
                    reduce_to(&full, &os, &b_shape)
                });
                vec![da, db]
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinOp::Add)
    }
    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinOp::Sub)
    }
    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinOp::Mul)
    }
    pub fn div(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(rhs, BinOp::Div)
    }

    /// Materialized broadcast of `self` to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<E>> {
        let out_shape = broadcast_shape("broadcast_to", shape, self.shape())?;
        if out_shape != shape {
            return Err(TensorError::NotBroadcastable {
                op: "broadcast_to",
                lhs: shape.to_vec(),
                rhs: self.shape().to_vec(),
            });
        }
        let ones = Tensor::zeros(shape.to_vec());
        self.add(&ones)
    }
}

// ---------------------------------------------------------------------------
// unary maps
// ---------------------------------------------------------------------------

impl<E: Elem> Tensor<E> {
    /// Generic unary primitive: `f` computes the value, `df(x, y)` the
    /// local derivative given input and output.
    fn unary(
        &self,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&x| f(x)).collect();
        let x_arc = self.data_arc();
        let y_arc = Arc::new(data.clone());
        Tensor::from_op(&[self], self.shape().to_vec(), data, move |g, needs| {
            let dx = needs[0].then(|| {
                g.iter()
                    .zip(x_arc.iter().zip(y_arc.iter()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect()
            });
            vec![dx]
        })
    }

    pub fn relu(&self) -> Tensor<E> {
        self.unary(
            |x| if x > E::ZERO { x } else { E::ZERO },
            |x, _| if x > E::ZERO { E::ONE } else { E::ZERO },
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(
            |x| E::ONE / (E::ONE + (-x).exp()),
            |_, y| y * (E::ONE - y),
        )
    }

    /// `clamp(x/6 + 0.5, 0, 1)`: saturates exactly at +-3.
    pub fn hard_sigmoid(&self) -> Tensor<E> {
        let sixth = E::from_f64(1.0 / 6.0);
        let half = E::from_f64(0.5);
        self.unary(
            move |x| (x * sixth + half).maximum(E::ZERO).minimum(E::ONE),
            move |x, _| {
                if x.to_f64() > -3.0 && x.to_f64() < 3.0 {
                    sixth
                } else {
                    E::ZERO
                }
            },
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<E> {
        self.unary(|x| x.ln(), |x, _| E::ONE / x)
    }

    pub fn sqrt(&self) -> Tensor<E> {
        let half = E::from_f64(0.5);
        self.unary(|x| x.sqrt(), move |_, y| half / y)
    }

    /// `ln(1 + e^x)`, numerically stabilized.
    pub fn softplus(&self) -> Tensor<E> {
        self.unary(
            |x| {
                if x.to_f64() > 30.0 {
                    x
                } else {
                    (E::ONE + x.exp()).ln()
                }
            },
            |x, _| E::ONE / (E::ONE + (-x).exp()),
        )
    }

    /// Strictly positive feature map for linear attention:
    /// `x + 1` for `x >= 0`, `exp(x)` otherwise. Continuous with
    /// continuous first derivative.
    pub fn phi(&self) -> Tensor<E> {
        self.unary(
            |x| if x >= E::ZERO { x + E::ONE } else { x.exp() },
            |x, y| if x >= E::ZERO { E::ONE } else { y },
        )
    }

    /// `mul * x + add` in one pass.
    pub fn affine(&self, mul: E, add: E) -> Tensor<E> {
        self.unary(move |x| mul * x + add, move |_, _| mul)
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        self.affine(c, E::ZERO)
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        self.affine(E::ONE, c)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.affine(-E::ONE, E::ZERO)
    }

    /// `x^p` for constant `p`; inputs must be positive unless `p` is a
    /// non-negative integer.
    pub fn powf_scalar(&self, p: E) -> Tensor<E> {
        self.unary(
            move |x| x.powf(p),
            move |x, _| p * x.powf(p - E::ONE),
        )
    }

    /// Values clipped to [lo, hi]. Gradient is passed only strictly
    /// inside the interval, so clamped positions stop gradient flow.
    pub fn clamp(&self, lo: E, hi: E) -> Tensor<E> {
        self.unary(
            move |x| x.maximum(lo).minimum(hi),
            move |x, _| if x > lo && x < hi { E::ONE } else { E::ZERO },
        )
    }

    /// Lower clip only.
    pub fn clamp_min(&self, lo: E) -> Tensor<E> {
        self.unary(
            move |x| x.maximum(lo),
            move |x, _| if x > lo { E::ONE } else { E::ZERO },
        )
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// `out[MxN] += a[MxK] * b[KxN]`.
fn gemm_nn<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[MxN] += a[MxK] * b[NxK]^T` (dot-product formulation).
fn gemm_nt<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[MxN] += a[KxM]^T * b[KxN]`.
fn gemm_tn<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], out: &mut [E]) {
    for l in 0..k {
        let b_row = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

impl<E: Elem> Tensor<E> {
    /// Matrix product over the two trailing dims. Leading dims must be
    /// identical on both sides, or `rhs` may be a plain 2-D matrix that
    /// is shared across the batch.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let ar = self.rank();
        let br = rhs.rank();
        if ar < 2 || br < 2 {
            return Err(TensorError::invalid(
                "matmul",
                format!("needs rank >= 2, got {:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, ka) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (kb, n) = (rhs.shape()[br - 2], rhs.shape()[br - 1]);
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let lead_a = &self.shape()[..ar - 2];
        let lead_b = &rhs.shape()[..br - 2];
        let rhs_shared = br == 2;
        if !rhs_shared && lead_a != lead_b {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let batches: usize = lead_a.iter().product();
        let mut out = vec![E::ZERO; batches * m * n];
        for t in 0..batches {
            let a_off = t * m * ka;
            let b_off = if rhs_shared { 0 } else { t * ka * n };
            gemm_nn(
                m,
                ka,
                n,
                &self.data()[a_off..a_off + m * ka],
                &rhs.data()[b_off..b_off + ka * n],
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let a_data = self.data_arc();
        let b_data = rhs.data_arc();
        let (k, a_len, b_len) = (ka, self.len(), rhs.len());
        Ok(Tensor::from_op(
            &[self, rhs],
            out_shape,
            out,
            move |g, needs| {
                let da = needs[0].then(|| {
                    let mut da = vec![E::ZERO; a_len];
                    for t in 0..batches {
                        let b_off = if rhs_shared { 0 } else { t * k * n };
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            &b_data[b_off..b_off + k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = vec![E::ZERO; b_len];
                    for t in 0..batches {
                        let d_off = if rhs_shared { 0 } else { t * k * n };
                        gemm_tn(
                            k,
                            m,
                            n,
                            &a_data[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut db[d_off..d_off + k * n],
                        );
                    }
                    db
                });
                vec![da, db]
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
    Std,
}

/// Groups the linear input index by reduced/kept axes. Returns for each
/// input linear index its output linear index, iterating inputs in
/// row-major order (the fixed accumulation order).
struct AxisPlan {
    out_shape: Vec<usize>,
    kept_shape: Vec<usize>,
    out_index: Vec<usize>,
    group: usize,
}

fn plan_axes(
    op: &'static str,
    shape: &[usize],
    axes: &[usize],
    keep: bool,
) -> Result<AxisPlan> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis: a, rank });
        }
        if shape[a] == 0 {
            return Err(TensorError::EmptyReduce { op, axis: a });
        }
        reduced[a] = true;
    }
    let mut kept_shape = Vec::new();
    let mut out_shape = Vec::new();
    for (d, &e) in shape.iter().enumerate() {
        if reduced[d] {
            if keep {
                out_shape.push(1);
            }
        } else {
            kept_shape.push(e);
            out_shape.push(e);
        }
    }
    let kept_strides = strides_of(&kept_shape);
    let n = numel(shape);
    let mut out_index = vec![0usize; n];
    let mut idx = vec![0usize; rank];
    let mut out_off = 0usize;
    // stride contribution per input dim toward the kept/out index
    let mut contrib = vec![0usize; rank];
    {
        let mut ki = 0;
        for d in 0..rank {
            if !reduced[d] {
                contrib[d] = kept_strides[ki];
                ki += 1;
            }
        }
    }
    for slot in out_index.iter_mut().take(n) {
        *slot = out_off;
        for d in (0..rank).rev() {
            idx[d] += 1;
            out_off += contrib[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            out_off -= contrib[d] * shape[d];
        }
    }
    let out_n = numel(&kept_shape);
    let group = if out_n == 0 { 0 } else { n / out_n };
    Ok(AxisPlan {
        out_shape,
        kept_shape,
        out_index,
        group,
    })
}

impl<E: Elem> Tensor<E> {
    pub fn reduce_axes(&self, kind: Reduce, axes: &[usize], keep: bool) -> Result<Tensor<E>> {
        let plan = plan_axes("reduce", self.shape(), axes, keep)?;
        let out_n = numel(&plan.kept_shape);
        let count = E::from_f64(plan.group as f64);
        let x = self.data();

        match kind {
            Reduce::Sum | Reduce::Mean => {
                let mut acc = vec![E::ZERO; out_n];
                for (i, &o) in plan.out_index.iter().enumerate() {
                    acc[o] += x[i];
                }
                if kind == Reduce::Mean {
                    for v in acc.iter_mut() {
                        *v = *v / count;
                    }
                }
                let out_index = Arc::new(plan.out_index);
                let in_shape = self.shape().to_vec();
                Ok(Tensor::from_op(
                    &[self],
                    plan.out_shape,
                    acc,
                    move |g, needs| {
                        let dx = needs[0].then(|| {
                            out_index
                                .iter()
                                .map(|&o| {
                                    if kind == Reduce::Mean {
                                        g[o] / count
                                    } else {
                                        g[o]
                                    }
                                })
                                .collect()
                        });
                        let _ = &in_shape;
                        vec![dx]
                    },
                ))
            }
            Reduce::Max => {
                let mut acc = vec![E::ZERO; out_n];
                let mut arg = vec![usize::MAX; out_n];
                for (i, &o) in plan.out_index.iter().enumerate() {
                    if arg[o] == usize::MAX || x[i] > acc[o] {
                        acc[o] = x[i];
                        arg[o] = i;
                    }
                }
                let arg = Arc::new(arg);
                let in_len = self.len();
                Ok(Tensor::from_op(
                    &[self],
                    plan.out_shape,
                    acc,
                    move |g, needs| {
                        let dx = needs[0].then(|| {
                            let mut dx = vec![E::ZERO; in_len];
                            for (o, &i) in arg.iter().enumerate() {
                                dx[i] += g[o];
                            }
                            dx
                        });
                        vec![dx]
                    },
                ))
            }
            Reduce::Std => {
                // population standard deviation: sqrt(mean((x - mu)^2))
                let mut mean = vec![E::ZERO; out_n];
                for (i, &o) in plan.out_index.iter().enumerate() {
                    mean[o] += x[i];
                }
                for v in mean.iter_mut() {
                    *v = *v / count;
                }
                let mut var = vec![E::ZERO; out_n];
                for (i, &o) in plan.out_index.iter().enumerate() {
                    let d = x[i] - mean[o];
                    var[o] += d * d;
                }
                let std: Vec<E> = var.iter().map(|&v| (v / count).sqrt()).collect();
                let out_index = Arc::new(plan.out_index);
                let x_arc = self.data_arc();
                let mean = Arc::new(mean);
                let std_arc = Arc::new(std.clone());
                Ok(Tensor::from_op(
                    &[self],
                    plan.out_shape,
                    std,
                    move |g, needs| {
                        let dx = needs[0].then(|| {
                            out_index
                                .iter()
                                .enumerate()
                                .map(|(i, &o)| {
                                    let s = std_arc[o];
                                    if s == E::ZERO {
                                        E::ZERO
                                    } else {
                                        g[o] * (x_arc[i] - mean[o]) / (count * s)
                                    }
                                })
                                .collect()
                        });
                        vec![dx]
                    },
                ))
            }
        }
    }

    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<E>> {
        self.reduce_axes(Reduce::Sum, axes, keep)
    }
    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<E>> {
        self.reduce_axes(Reduce::Mean, axes, keep)
    }
    pub fn max_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<E>> {
        self.reduce_axes(Reduce::Max, axes, keep)
    }
    pub fn std_axes(&self, axes: &[usize], keep: bool) -> Result<Tensor<E>> {
        self.reduce_axes(Reduce::Std, axes, keep)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce_axes(Reduce::Sum, &axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor<E>> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.reduce_axes(Reduce::Mean, &axes, false)
    }

    /// Softmax along `axis`, composed from stable primitives.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let m = self.max_axes(&[axis], true)?;
        let e = self.sub(&m)?.exp();
        let s = e.sum_axes(&[axis], true)?;
        e.div(&s)
    }
}

// ---------------------------------------------------------------------------
// movement: reshape / permute / concat / narrow / flip
// ---------------------------------------------------------------------------

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

impl<E: Elem> Tensor<E> {
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<E>> {
        let expected = numel(&shape);
        if expected != self.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: self.len(),
            });
        }
        Ok(Tensor::from_op(
            &[self],
            shape,
            self.to_vec(),
            move |g, needs| vec![needs[0].then(|| g.to_vec())],
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{perm:?} is not a permutation of 0..{rank}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let os = out_shape.clone();
        Ok(Tensor::from_op(&[self], out_shape, data, move |g, needs| {
            vec![needs[0].then(|| permute_data(g, &os, &inverse))]
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "narrow",
                axis,
                rank,
            });
        }
        if start + len > self.shape()[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!(
                    "range {start}..{} exceeds extent {} on axis {axis}",
                    start + len,
                    self.shape()[axis]
                ),
            ));
        }
        let (outer, extent, inner) = axis_blocks(self.shape(), axis);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let in_len = self.len();
        Ok(Tensor::from_op(&[self], out_shape, data, move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![E::ZERO; in_len];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * extent + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                dx
            });
            vec![dx]
        }))
    }

    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "no tensors given"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        for p in parts {
            let same = p.rank() == rank
                && p.shape()
                    .iter()
                    .enumerate()
                    .all(|(d, &e)| d == axis || e == parts[0].shape()[d]);
            if !same {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &e) in parts.iter().zip(&extents) {
                let base = o * e * inner;
                data.extend_from_slice(&p.data()[base..base + e * inner]);
            }
        }
        let ext = extents.clone();
        Ok(Tensor::from_op(parts, out_shape, data, move |g, needs| {
            let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(ext.len());
            for (pi, &e) in ext.iter().enumerate() {
                grads.push(needs[pi].then(|| {
                    let offset: usize = ext[..pi].iter().sum();
                    let mut dp = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + e * inner]);
                    }
                    dp
                }));
            }
            grads
        }))
    }

    /// Splits along `axis` at `round(extent * ratio)`; the remainder goes
    /// to the second part. Errors for extents below 4.
    pub fn split_ratio(&self, axis: usize, ratio: f64) -> Result<(Tensor<E>, Tensor<E>)> {
        let extent = *self
            .shape()
            .get(axis)
            .ok_or(TensorError::AxisOutOfRange {
                op: "split_ratio",
                axis,
                rank: self.rank(),
            })?;
        if extent < 4 {
            return Err(TensorError::invalid(
                "split_ratio",
                format!("extent {extent} on axis {axis} too small, need >= 4"),
            ));
        }
        let first = (extent as f64 * ratio).round() as usize;
        let a = self.narrow(axis, 0, first)?;
        let b = self.narrow(axis, first, extent - first)?;
        Ok((a, b))
    }

    pub fn flip(&self, axis: usize) -> Result<Tensor<E>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "flip",
                axis,
                rank,
            });
        }
        let (outer, extent, inner) = axis_blocks(self.shape(), axis);
        let flip_block = move |src: &[E]| {
            let mut out = Vec::with_capacity(src.len());
            for o in 0..outer {
                for e in (0..extent).rev() {
                    let base = (o * extent + e) * inner;
                    out.extend_from_slice(&src[base..base + inner]);
                }
            }
            out
        };
        let data = flip_block(self.data());
        Ok(Tensor::from_op(
            &[self],
            self.shape().to_vec(),
            data,
            move |g, needs| vec![needs[0].then(|| flip_block(g))],
        ))
    }
}

fn permute_data<E: Elem>(data: &[E], in_shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    // stride in the input per output dim
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= step[d] * out_shape[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tape;

    type T64 = Tensor<f64>;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mul_matches_hadamard_definition() {
        let a = T64::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = T64::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().to_vec(), vec![4.0, 10.0, 18.0]);
    }

    #[test]
    fn add_zero_is_bit_identical() {
        let mut rng = Rng::new(3);
        let x = T64::rand_uniform(&mut rng, vec![2, 5], -1.0, 1.0);
        let z = T64::zeros(vec![2, 5]);
        assert_eq!(x.add(&z).unwrap().to_vec(), x.to_vec());
        assert_eq!(x.add_scalar(0.0).to_vec(), x.to_vec());
    }

    #[test]
    fn broadcast_mul_matches_scalar_loop_oracle_exactly() {
        let mut rng = Rng::new(11);
        let a = T64::rand_uniform(&mut rng, vec![2, 3, 4], -2.0, 2.0);
        let b = T64::rand_uniform(&mut rng, vec![1, 3, 1], -2.0, 2.0);
        let out = a.mul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 4]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let expect = a.at(&[i, j, k]) * b.at(&[0, j, 0]);
                    assert_eq!(out.at(&[i, j, k]), expect, "0 ulp requirement");
                }
            }
        }
    }

    #[test]
    fn broadcast_equals_explicit_tile_then_op() {
        let mut rng = Rng::new(21);
        for (a_shape, b_shape) in [
            (vec![4, 3, 5], vec![3, 1]),
            (vec![2, 6], vec![6]),
            (vec![3, 1, 4], vec![3, 5, 4]),
        ] {
            let a = T64::rand_uniform(&mut rng, a_shape.clone(), -1.0, 1.0);
            let b = T64::rand_uniform(&mut rng, b_shape.clone(), 0.5, 1.5);
            let out_shape = broadcast_shape("t", &a_shape, &b_shape).unwrap();
            let at = a.broadcast_to(&out_shape).unwrap();
            let bt = b.broadcast_to(&out_shape).unwrap();
            for (op, tiled) in [
                (a.add(&b).unwrap(), at.add(&bt).unwrap()),
                (a.mul(&b).unwrap(), at.mul(&bt).unwrap()),
                (a.div(&b).unwrap(), at.div(&bt).unwrap()),
            ] {
                assert_eq!(op.to_vec(), tiled.to_vec());
            }
        }
    }

    #[test]
    fn incompatible_shapes_error_names_both() {
        let a = T64::zeros(vec![2, 3]);
        let b = T64::zeros(vec![4]);
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let eye = T64::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let mut rng = Rng::new(5);
        let b = T64::rand_uniform(&mut rng, vec![3, 4], -1.0, 1.0);
        assert_eq!(eye.matmul(&b).unwrap().to_vec(), b.to_vec());

        let a = T64::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = T64::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(17);
        let a = T64::rand_uniform(&mut rng, vec![7, 5], -1.0, 1.0);
        let b = T64::rand_uniform(&mut rng, vec![5, 3], -1.0, 1.0);
        let out = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for l in 0..5 {
                    acc += a.at(&[i, l]) * b.at(&[l, j]);
                }
                assert!(close(out.at(&[i, j]), acc, 1e-12));
            }
        }
    }

    #[test]
    fn matmul_inner_mismatch_errors() {
        let a = T64::zeros(vec![2, 3]);
        let b = T64::zeros(vec![4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn reduce_constant_tensors() {
        let c = T64::full(vec![4, 6], 2.75);
        assert_eq!(c.mean_all().unwrap().item(), 2.75);
        assert_eq!(c.std_axes(&[0, 1], false).unwrap().item(), 0.0);
    }

    #[test]
    fn sum_axis_matches_loop_oracle_exactly() {
        let mut rng = Rng::new(23);
        let x = T64::rand_uniform(&mut rng, vec![4, 5], -1.0, 1.0);
        let s = x.sum_axes(&[1], false).unwrap();
        for i in 0..4 {
            let mut acc = 0.0;
            for j in 0..5 {
                acc += x.at(&[i, j]);
            }
            assert_eq!(s.at(&[i]), acc, "fixed left-to-right order is exact");
        }
    }

    #[test]
    fn reduce_empty_extent_errors() {
        let x = T64::zeros(vec![3, 0]);
        assert!(x.sum_axes(&[1], false).is_err());
    }

    #[test]
    fn split_concat_round_trip_and_ratio() {
        let mut rng = Rng::new(2);
        let x = T64::rand_uniform(&mut rng, vec![2, 8, 3], -1.0, 1.0);
        let (a, b) = x.split_ratio(1, 0.25).unwrap();
        assert_eq!(a.shape(), &[2, 2, 3]);
        assert_eq!(b.shape(), &[2, 6, 3]);
        let back = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let small = T64::zeros(vec![2, 3, 3]);
        let err = small.split_ratio(1, 0.25).unwrap_err().to_string();
        assert!(err.contains(">= 4"), "{err}");
    }

    #[test]
    fn permute_inverse_is_identity() {
        let mut rng = Rng::new(8);
        let x = T64::rand_uniform(&mut rng, vec![2, 3, 4], -1.0, 1.0);
        let y = x.permute(&[2, 0, 1]).unwrap();
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.shape(), x.shape());
        assert_eq!(z.to_vec(), x.to_vec());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(13);
        let x = T64::rand_uniform(&mut rng, vec![5, 7], -4.0, 4.0);
        let s = x.softmax(1).unwrap();
        let sums = s.sum_axes(&[1], false).unwrap();
        for &v in sums.data() {
            assert!(close(v, 1.0, 1e-6));
        }
    }

    // -- backward ----------------------------------------------------------

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let mut rng = Rng::new(4);
        let x = tape.leaf(&T64::rand_uniform(&mut rng, vec![3, 2], -1.0, 1.0));
        let loss = x.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let tape = Tape::new();
        let mut rng = Rng::new(6);
        let x = tape.leaf(&T64::rand_uniform(&mut rng, vec![4], -1.0, 1.0));
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        for (g, v) in grads.get(&x).unwrap().iter().zip(x.data()) {
            assert!(close(*g, 2.0 * v, 1e-12));
        }
    }

    #[test]
    fn backward_twice_errors() {
        let tape = Tape::new();
        let x = tape.leaf(&T64::ones(vec![2]));
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(loss.backward().unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn backward_on_detached_errors() {
        let x = T64::ones(vec![1]);
        assert_eq!(x.backward().unwrap_err(), TensorError::DetachedBackward);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&T64::ones(vec![2]));
        let y = tape.leaf(&T64::ones(vec![3]));
        let loss = x.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get_or_zeros(&y), vec![0.0; 3]);
    }

    #[test]
    fn rand_uniform_is_deterministic_per_seed() {
        let a = T64::rand_uniform(&mut Rng::new(99), vec![10], -1.0, 1.0);
        let b = T64::rand_uniform(&mut Rng::new(99), vec![10], -1.0, 1.0);
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn hard_sigmoid_definition_and_saturation() {
        let x = T64::from_vec(vec![3], vec![-3.0, 0.0, 3.0]).unwrap();
        assert_eq!(x.hard_sigmoid().to_vec(), vec![0.0, 0.5, 1.0]);
        // monotone nondecreasing on a sweep
        let sweep = T64::from_fn(vec![101], |i| -5.0 + 0.1 * i as f64);
        let y = sweep.hard_sigmoid();
        for w in y.data().windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn phi_is_strictly_positive() {
        assert_eq!(T64::scalar(0.0).phi().item(), 1.0);
        let mut rng = Rng::new(31);
        let x = T64::rand_uniform(&mut rng, vec![1000], -20.0, 20.0);
        for &v in x.phi().data() {
            assert!(v > 0.0);
        }
        assert!(T64::scalar(-700.0).phi().item() >= 0.0); // limit -> 0+
    }

    #[test]
    fn relu_values() {
        let x = T64::from_vec(vec![2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(x.relu().to_vec(), vec![0.0, 2.0]);
    }
}
