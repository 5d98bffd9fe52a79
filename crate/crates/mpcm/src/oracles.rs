//! Independent brute-force references for every optimized operator.
//!
//! These run in f64 only and deliberately share nothing with the
//! operators they check beyond the tensor container: plain nested loops,
//! no reuse of the layer code paths. Expected values in the test suites
//! come from here.

use crate::error::{Result, TensorError};
use crate::nn::ConvSpec;
use crate::tensor::Tensor;

/// Outcome of one reference-vs-implementation comparison.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub op: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub tol: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn from_diff(op: impl Into<String>, expect: &[f64], got: &[f64], tol: f64) -> Self {
        assert_eq!(expect.len(), got.len());
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (&e, &g) in expect.iter().zip(got) {
            let abs = (e - g).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / e.abs().max(g.abs()).max(1e-12));
        }
        OracleReport {
            op: op.into(),
            max_abs,
            max_rel,
            tol,
            pass: max_abs <= tol,
        }
    }

    /// One-line machine-readable form, as written to `oracle-report.txt`.
    pub fn line(&self) -> String {
        format!(
            "{} max_abs={:.3e} max_rel={:.3e} tol={:.1e} pass={}",
            self.op, self.max_abs, self.max_rel, self.tol, self.pass
        )
    }
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one coordinate at a
/// time. Errors when `f` does not return a scalar.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_at(f, x, &coords, h)
}

/// Central differences restricted to chosen coordinates (for large
/// parameter sets the full sweep is pointless; a sampled subset is
/// checked instead).
pub fn finite_difference_at(
    f: &mut dyn FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let base = x.to_vec();
    let shape = x.shape().to_vec();
    let mut eval = |data: Vec<f64>| -> Result<f64> {
        let out = f(&Tensor::from_vec(shape.clone(), data)?)?;
        if out.len() != 1 {
            return Err(TensorError::NonScalarBackward {
                shape: out.shape().to_vec(),
            });
        }
        Ok(out.item())
    };
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// direct convolution: six nested loops, no restructuring
// ---------------------------------------------------------------------------

pub fn direct_conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    spec: &ConvSpec,
) -> Tensor<f64> {
    let (batch, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let icg = spec.in_ch / spec.groups;
    let ocg = spec.out_ch / spec.groups;
    let oh = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let ow = (wd + 2 * pw - dw * (kw - 1) - 1) / sw + 1;

    let mut out = vec![0.0f64; batch * spec.out_ch * oh * ow];
    for bi in 0..batch {
        for oc in 0..spec.out_ch {
            let g = oc / ocg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for icl in 0..icg {
                        let ic = g * icg + icl;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky * dh) as isize - ph as isize;
                                let ix = (ox * sw + kx * dw) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((bi * spec.in_ch + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * icg + icl) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * spec.out_ch + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![batch, spec.out_ch, oh, ow], out).unwrap()
}

// ---------------------------------------------------------------------------
// attention references
// ---------------------------------------------------------------------------

fn phi_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Full O(N^2) softmax attention with explicit row softmax over
/// `q_i . k_j / sqrt(d)` scores.
pub fn softmax_attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dv = v.shape()[1];
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; n * dv];
    let mut row = vec![0.0f64; n];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (j, slot) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for t in 0..d {
                s += q.data()[i * d + t] * k.data()[j * d + t];
            }
            *slot = s * scale;
            max = max.max(*slot);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            z += *r;
        }
        for j in 0..n {
            let a = row[j] / z;
            for t in 0..dv {
                out[i * dv + t] += a * v.data()[j * dv + t];
            }
        }
    }
    Tensor::from_vec(vec![n, dv], out).unwrap()
}

/// Literal double loop over the amplitude-aware linear attention:
/// `out_i = sum_j [ (1 + 1/S_i) * li_ij - S_i/N ] v_j` with
/// `li_ij = phi(q_i) . phi(k_j)` and `S_i = sum_j li_ij`.
pub fn sla_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dv = v.shape()[1];
    let mut out = vec![0.0f64; n * dv];
    for i in 0..n {
        let li: Vec<f64> = (0..n)
            .map(|j| {
                let mut s = 0.0;
                for t in 0..d {
                    s += phi_scalar(q.data()[i * d + t]) * phi_scalar(k.data()[j * d + t]);
                }
                s
            })
            .collect();
        let s_sum: f64 = li.iter().sum();
        let alpha = 1.0 + 1.0 / s_sum;
        let beta = s_sum / n as f64;
        for j in 0..n {
            let wgt = alpha * li[j] - beta;
            for t in 0..dv {
                out[i * dv + t] += wgt * v.data()[j * dv + t];
            }
        }
    }
    Tensor::from_vec(vec![n, dv], out).unwrap()
}

/// Raw similarity row `li_ij = phi(q_i) . phi(k_j)` for query `i`.
pub fn sla_similarity_row(q: &Tensor<f64>, k: &Tensor<f64>, i: usize) -> Vec<f64> {
    let (n, d) = (k.shape()[0], k.shape()[1]);
    (0..n)
        .map(|j| {
            let mut s = 0.0;
            for t in 0..d {
                s += phi_scalar(q.data()[i * d + t]) * phi_scalar(k.data()[j * d + t]);
            }
            s
        })
        .collect()
}

/// Per-query weights `alpha*li - beta` (the SLA row before multiplying
/// by V), for normalization and amplification checks.
pub fn sla_weights(li: &[f64]) -> Vec<f64> {
    let n = li.len() as f64;
    let s_sum: f64 = li.iter().sum();
    let alpha = 1.0 + 1.0 / s_sum;
    let beta = s_sum / n;
    li.iter().map(|&l| alpha * l - beta).collect()
}

/// The attention-score ratio `w = (alpha li_m - beta)/(alpha li_n - beta)`
/// for a similarity row, and the same ratio after every similarity is
/// amplified by `s` (the argwise scaling the amplification argument is
/// stated over).
pub fn sla_ratio_pair(li: &[f64], m: usize, n_idx: usize, s: f64) -> (f64, f64) {
    let ratio = |row: &[f64]| {
        let w = sla_weights(row);
        w[m] / w[n_idx]
    };
    let scaled: Vec<f64> = li.iter().map(|&l| s * l).collect();
    (ratio(li), ratio(&scaled))
}

// ---------------------------------------------------------------------------
// sequential selective-scan reference
// ---------------------------------------------------------------------------

/// Step-by-step state recurrence with an explicit state vector:
/// `h_t = exp(delta_t * a) (.) h_{t-1} + delta_t * b_t * x_t`,
/// `y_t = c_t . h_t + d (.) x_t`.
///
/// Shapes: `x`, `delta`: L x C; `b_seq`, `c_seq`: L x n; `a`: C x n;
/// `d`: C. Output L x C.
pub fn sequential_scan_oracle(
    x: &Tensor<f64>,
    delta: &Tensor<f64>,
    b_seq: &Tensor<f64>,
    c_seq: &Tensor<f64>,
    a: &Tensor<f64>,
    d: &Tensor<f64>,
) -> Tensor<f64> {
    let (len, ch) = (x.shape()[0], x.shape()[1]);
    let n = a.shape()[1];
    let mut h = vec![0.0f64; ch * n];
    let mut out = vec![0.0f64; len * ch];
    for t in 0..len {
        for c in 0..ch {
            let dt = delta.data()[t * ch + c];
            let xt = x.data()[t * ch + c];
            let mut y = 0.0;
            for s in 0..n {
                let abar = (dt * a.data()[c * n + s]).exp();
                let bbar = dt * b_seq.data()[t * n + s];
                let idx = c * n + s;
                h[idx] = abar * h[idx] + bbar * xt;
                y += c_seq.data()[t * n + s] * h[idx];
            }
            out[t * ch + c] = y + d.data()[c] * xt;
        }
    }
    Tensor::from_vec(vec![len, ch], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn fd_gradient_of_sum_is_ones() {
        let x = Tensor::from_vec(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let g = finite_difference_gradient(&mut |t| t.sum_all(), &x, FD_STEP).unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn fd_gradient_of_sum_of_squares_is_2x() {
        let x = Tensor::from_vec(vec![3], vec![0.3, -0.2, 0.9]).unwrap();
        let g =
            finite_difference_gradient(&mut |t| t.mul(t).unwrap().sum_all(), &x, FD_STEP).unwrap();
        for (gv, xv) in g.iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-7);
        }
    }

    #[test]
    fn fd_rejects_non_scalar_function() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let err = finite_difference_gradient(&mut |t| Ok(t.clone()), &x, FD_STEP);
        assert!(err.is_err());
    }

    #[test]
    fn softmax_oracle_single_token_returns_v() {
        let q = Tensor::from_vec(vec![1, 2], vec![0.3, -0.5]).unwrap();
        let k = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let v = Tensor::from_vec(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap();
        let out = softmax_attention_oracle(&q, &k, &v);
        for (o, e) in out.data().iter().zip(v.data()) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_oracle_identical_keys_average_v() {
        let mut rng = Rng::new(3);
        let q = Tensor::rand_uniform(&mut rng, vec![4, 3], -1.0, 1.0);
        let k_row: Vec<f64> = (0..3).map(|i| 0.2 * i as f64).collect();
        let k = Tensor::from_fn(vec![4, 3], |i| k_row[i % 3]);
        let v = Tensor::rand_uniform(&mut rng, vec![4, 2], -1.0, 1.0);
        let out = softmax_attention_oracle(&q, &k, &v);
        for i in 0..4 {
            for t in 0..2 {
                let mean: f64 = (0..4).map(|j| v.at(&[j, t])).sum::<f64>() / 4.0;
                assert!((out.at(&[i, t]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_oracle_rows_sum_to_one_implicitly() {
        // feeding constant V isolates the row sums: out must equal V.
        let mut rng = Rng::new(7);
        let q = Tensor::rand_uniform(&mut rng, vec![6, 4], -2.0, 2.0);
        let k = Tensor::rand_uniform(&mut rng, vec![6, 4], -2.0, 2.0);
        let v = Tensor::full(vec![6, 2], 3.25);
        let out = softmax_attention_oracle(&q, &k, &v);
        for &o in out.data() {
            assert!((o - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn sla_oracle_single_token_returns_v() {
        let q = Tensor::from_vec(vec![1, 2], vec![0.3, -0.5]).unwrap();
        let k = Tensor::from_vec(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let v = Tensor::from_vec(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap();
        let out = sla_oracle(&q, &k, &v);
        for (o, e) in out.data().iter().zip(v.data()) {
            assert!((o - e).abs() < 1e-12, "telescoping: weights sum to 1");
        }
    }

    #[test]
    fn sla_weights_sum_to_one() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let n = 1 + rng.below(16);
            let li: Vec<f64> = (0..n).map(|_| rng.range_f64(0.01, 5.0)).collect();
            let sum: f64 = sla_weights(&li).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum = {sum}");
        }
    }

    #[test]
    fn scan_oracle_prefix_sum_configuration() {
        // a = 0 makes the decay exp(0) = 1; delta = b = c = 1, d = 0
        // turns the recurrence into a running accumulator.
        let len = 6;
        let x = Tensor::from_fn(vec![len, 1], |i| (i + 1) as f64);
        let ones = Tensor::ones(vec![len, 1]);
        let a = Tensor::zeros(vec![1, 1]);
        let d = Tensor::zeros(vec![1]);
        let y = sequential_scan_oracle(&x, &ones, &ones, &ones, &a, &d);
        let mut acc = 0.0;
        for t in 0..len {
            acc += (t + 1) as f64;
            assert!((y.at(&[t, 0]) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_oracle_memoryless_configuration() {
        // a -> -inf kills the state carry: y_t = c (delta b x) + d x.
        let mut rng = Rng::new(9);
        let len = 5;
        let x = Tensor::rand_uniform(&mut rng, vec![len, 2], -1.0, 1.0);
        let delta = Tensor::rand_uniform(&mut rng, vec![len, 2], 0.1, 1.0);
        let b = Tensor::rand_uniform(&mut rng, vec![len, 3], -1.0, 1.0);
        let c = Tensor::rand_uniform(&mut rng, vec![len, 3], -1.0, 1.0);
        let a = Tensor::full(vec![2, 3], -1e30);
        let d = Tensor::rand_uniform(&mut rng, vec![2], -1.0, 1.0);
        let y = sequential_scan_oracle(&x, &delta, &b, &c, &a, &d);
        for t in 0..len {
            for ch in 0..2 {
                let dt = delta.at(&[t, ch]);
                let xt = x.at(&[t, ch]);
                let mut expect = d.at(&[ch]) * xt;
                for s in 0..3 {
                    expect += c.at(&[t, s]) * dt * b.at(&[t, s]) * xt;
                }
                assert!((y.at(&[t, ch]) - expect).abs() < 1e-12);
            }
        }
    }
}
