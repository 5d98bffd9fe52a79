//! Selective state-space scans over token sequences and 2-D maps.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::nn::{Init, ModelParams, ParamCtx, ParamId};
use crate::tensor::Tensor;

pub const DEFAULT_STATE_DIM: usize = 4;

/// Initial delta bias: softplus(b) starts near 0.1.
fn delta_bias_init() -> f64 {
    (0.1f64.exp() - 1.0).ln()
}

/// Learned projections and decay table of one selective scan.
///
/// The decay is stored in log space (`a = -exp(a_log)`), so the
/// discretized factor `exp(delta * a)` stays inside (0,1) for every
/// positive step size regardless of training.
#[derive(Clone, Debug)]
pub struct ScanParams {
    pub channels: usize,
    pub state_dim: usize,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl ScanParams {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        channels: usize,
        state_dim: usize,
    ) -> Self {
        let a_init: Vec<f64> = (0..channels * state_dim)
            .map(|i| (1.0 + (i % state_dim) as f64).ln())
            .collect();
        ScanParams {
            channels,
            state_dim,
            w_delta: params.param(
                format!("{name}.w_delta"),
                vec![channels, channels],
                Init::FanIn(channels),
            ),
            b_delta: params.param(
                format!("{name}.b_delta"),
                vec![channels],
                Init::Const(delta_bias_init()),
            ),
            w_b: params.param(
                format!("{name}.w_b"),
                vec![channels, state_dim],
                Init::FanIn(channels),
            ),
            w_c: params.param(
                format!("{name}.w_c"),
                vec![channels, state_dim],
                Init::FanIn(channels),
            ),
            a_log: params.param(
                format!("{name}.a_log"),
                vec![channels, state_dim],
                Init::Values(a_init),
            ),
            d_skip: params.param(format!("{name}.d_skip"), vec![channels], Init::Const(1.0)),
        }
    }

    /// Strictly negative decay table `-exp(a_log)`, C x n.
    pub fn decay<E: Elem>(&self, ctx: &ParamCtx<E>) -> Tensor<E> {
        ctx.get(self.a_log).exp().neg()
    }

    /// Input-dependent sequences for `x`: B x L x C tokens. Returns
    /// `(delta, b_seq, c_seq)` with delta positive via softplus.
    pub fn project<E: Elem>(
        &self,
        ctx: &ParamCtx<E>,
        x: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
        let delta = x
            .matmul(&ctx.get(self.w_delta))?
            .add(&ctx.get(self.b_delta))?
            .softplus();
        let b_seq = x.matmul(&ctx.get(self.w_b))?;
        let c_seq = x.matmul(&ctx.get(self.w_c))?;
        Ok((delta, b_seq, c_seq))
    }
}

/// The raw recurrence `h_t = exp(delta_t a) (.) h_{t-1} + delta_t b_t x_t`,
/// `y_t = c_t . h_t + d (.) x_t`, stepped over the L axis.
///
/// Shapes: `x`, `delta`: B x L x C; `b_seq`, `c_seq`: B x L x n;
/// `a`: C x n; `d`: C. Strictly causal in `t`.
pub fn scan_recurrence<E: Elem>(
    x: &Tensor<E>,
    delta: &Tensor<E>,
    b_seq: &Tensor<E>,
    c_seq: &Tensor<E>,
    a: &Tensor<E>,
    d: &Tensor<E>,
) -> Result<Tensor<E>> {
    if x.rank() != 3 {
        return Err(TensorError::invalid(
            "selective_scan",
            format!("expected B x L x C tokens, got {:?}", x.shape()),
        ));
    }
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = a.shape()[1];
    if l == 0 {
        return Err(TensorError::invalid("selective_scan", "empty sequence"));
    }

    // discretize once for the whole sequence
    let delta4 = delta.reshape(vec![b, l, c, 1])?;
    let abar = delta4.mul(a)?.exp(); // B x L x C x n
    let bx = delta
        .mul(x)?
        .reshape(vec![b, l, c, 1])?
        .mul(&b_seq.reshape(vec![b, l, 1, n])?)?; // B x L x C x n

    let mut h = Tensor::zeros(vec![b, c, n]);
    let mut ys: Vec<Tensor<E>> = Vec::with_capacity(l);
    for t in 0..l {
        let abar_t = abar.narrow(1, t, 1)?.reshape(vec![b, c, n])?;
        let bx_t = bx.narrow(1, t, 1)?.reshape(vec![b, c, n])?;
        h = abar_t.mul(&h)?.add(&bx_t)?;
        let c_t = c_seq.narrow(1, t, 1)?.reshape(vec![b, 1, n])?;
        let y = h.mul(&c_t)?.sum_axes(&[2], false)?; // B x C
        ys.push(y.reshape(vec![b, 1, c])?);
    }
    let refs: Vec<&Tensor<E>> = ys.iter().collect();
    let scanned = Tensor::concat(&refs, 1)?; // B x L x C
    scanned.add(&x.mul(&d)?)
}

/// One-direction selective scan through learned projections.
pub fn selective_scan_1d<E: Elem>(
    ctx: &ParamCtx<E>,
    sp: &ScanParams,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    if x.rank() != 3 || x.shape()[2] != sp.channels {
        return Err(TensorError::invalid(
            "selective_scan_1d",
            format!("expected B x L x {}, got {:?}", sp.channels, x.shape()),
        ));
    }
    let (delta, b_seq, c_seq) = sp.project(ctx, x)?;
    scan_recurrence(x, &delta, &b_seq, &c_seq, &sp.decay(ctx), &ctx.get(sp.d_skip))
}

/// Four-direction scan over a feature map: row-major from the top-left,
/// its reverse, row-major after a horizontal flip (top-right start), and
/// its reverse. Outputs are mapped back to map layout and summed.
#[derive(Clone, Debug)]
pub struct Scan2d {
    pub sets: Vec<ScanParams>,
}

impl Scan2d {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        channels: usize,
        state_dim: usize,
        per_direction: bool,
    ) -> Self {
        let count = if per_direction { 4 } else { 1 };
        let sets = (0..count)
            .map(|i| {
                let sub = if per_direction {
                    format!("{name}.dir{i}")
                } else {
                    name.to_string()
                };
                ScanParams::new(params, &sub, channels, state_dim)
            })
            .collect();
        Scan2d { sets }
    }

    pub fn channels(&self) -> usize {
        self.sets[0].channels
    }

    fn set_for(&self, dir: usize) -> &ScanParams {
        &self.sets[dir % self.sets.len()]
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 || x.shape()[1] != self.channels() {
            return Err(TensorError::invalid(
                "selective_scan_2d",
                format!("expected B x {} x H x W, got {:?}", self.channels(), x.shape()),
            ));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let to_tokens =
            |m: &Tensor<E>| -> Result<Tensor<E>> { m.permute(&[0, 2, 3, 1])?.reshape(vec![b, h * w, c]) };
        let to_map = |t: &Tensor<E>| -> Result<Tensor<E>> {
            t.reshape(vec![b, h, w, c])?.permute(&[0, 3, 1, 2])
        };

        let forward_tokens = to_tokens(x)?;
        let flipped_map = x.flip(3)?;
        let flipped_tokens = to_tokens(&flipped_map)?;

        // top-left -> bottom-right
        let y0 = to_map(&selective_scan_1d(ctx, self.set_for(0), &forward_tokens)?)?;
        // bottom-right -> top-left
        let y1 = to_map(
            &selective_scan_1d(ctx, self.set_for(1), &forward_tokens.flip(1)?)?.flip(1)?,
        )?;
        // top-right -> bottom-left (row-reversed order)
        let y2 = to_map(&selective_scan_1d(ctx, self.set_for(2), &flipped_tokens)?)?.flip(3)?;
        // bottom-left -> top-right
        let y3 = to_map(
            &selective_scan_1d(ctx, self.set_for(3), &flipped_tokens.flip(1)?)?.flip(1)?,
        )?
        .flip(3)?;

        y0.add(&y1)?.add(&y2)?.add(&y3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::BlockCheck;
    use crate::oracles::sequential_scan_oracle;
    use crate::rng::Rng;

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn memoryless_limit_is_pointwise() {
        let mut rng = Rng::new(1);
        let (l, c, n) = (6, 3, 2);
        let x = Tensor::rand_uniform(&mut rng, vec![1, l, c], -1.0, 1.0);
        let delta = Tensor::rand_uniform(&mut rng, vec![1, l, c], 0.1, 1.0);
        let b_seq = Tensor::rand_uniform(&mut rng, vec![1, l, n], -1.0, 1.0);
        let c_seq = Tensor::rand_uniform(&mut rng, vec![1, l, n], -1.0, 1.0);
        let a = Tensor::full(vec![c, n], -1e30);
        let d = Tensor::rand_uniform(&mut rng, vec![c], -1.0, 1.0);
        let y = scan_recurrence(&x, &delta, &b_seq, &c_seq, &a, &d).unwrap();
        for t in 0..l {
            for ch in 0..c {
                let dt = delta.at(&[0, t, ch]);
                let xt = x.at(&[0, t, ch]);
                let mut want = d.at(&[ch]) * xt;
                for s in 0..n {
                    want += c_seq.at(&[0, t, s]) * dt * b_seq.at(&[0, t, s]) * xt;
                }
                assert!((y.at(&[0, t, ch]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulator_configuration_yields_prefix_sums() {
        let l = 7;
        let x = Tensor::<f64>::from_fn(vec![1, l, 1], |i| (i + 1) as f64);
        let ones = Tensor::ones(vec![1, l, 1]);
        let y = scan_recurrence(
            &x,
            &ones,
            &ones,
            &ones,
            &Tensor::zeros(vec![1, 1]),
            &Tensor::zeros(vec![1]),
        )
        .unwrap();
        let mut acc = 0.0;
        for t in 0..l {
            acc += (t + 1) as f64;
            assert!((y.at(&[0, t, 0]) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_errors() {
        let x = Tensor::<f64>::zeros(vec![1, 0, 2]);
        let d = Tensor::<f64>::zeros(vec![2]);
        let a = Tensor::<f64>::zeros(vec![2, 1]);
        let e = Tensor::<f64>::zeros(vec![1, 0, 1]);
        assert!(scan_recurrence(&x, &x, &e, &e, &a, &d).is_err());
    }

    #[test]
    fn module_path_matches_sequential_oracle() {
        let mut store = ModelParams::<f64>::new(5);
        let sp = ScanParams::new(&mut store, "scan", 4, 3);
        let mut rng = Rng::new(7);
        for case in 0..10 {
            let l = 3 + case % 5;
            let x = Tensor::rand_uniform(&mut rng, vec![1, l, 4], -1.0, 1.0);
            let ctx = ParamCtx::eval(&store);
            let got = selective_scan_1d(&ctx, &sp, &x).unwrap();

            let (delta, b_seq, c_seq) = sp.project(&ctx, &x).unwrap();
            let squeeze = |t: &Tensor<f64>| {
                let s = t.shape().to_vec();
                t.reshape(vec![s[1], s[2]]).unwrap().detach()
            };
            let want = sequential_scan_oracle(
                &squeeze(&x),
                &squeeze(&delta),
                &squeeze(&b_seq),
                &squeeze(&c_seq),
                &sp.decay(&ctx),
                &store.get(sp.d_skip),
            );
            assert!(
                max_abs_diff(&got.reshape(vec![l, 4]).unwrap(), &want) < 1e-10,
                "case {case}"
            );
        }
    }

    #[test]
    fn scan_is_causal() {
        let mut store = ModelParams::<f64>::new(11);
        let sp = ScanParams::new(&mut store, "scan", 3, 2);
        let mut rng = Rng::new(13);
        let l = 8;
        let x = Tensor::rand_uniform(&mut rng, vec![1, l, 3], -1.0, 1.0);
        let ctx = ParamCtx::eval(&store);
        let full = selective_scan_1d(&ctx, &sp, &x).unwrap();
        for keep in 1..l {
            // zero the tail beyond `keep` tokens
            let mut data = x.to_vec();
            for t in keep..l {
                for c in 0..3 {
                    data[t * 3 + c] = 0.0;
                }
            }
            let cut = Tensor::from_vec(vec![1, l, 3], data).unwrap();
            let y = selective_scan_1d(&ctx, &sp, &cut).unwrap();
            for t in 0..keep {
                for c in 0..3 {
                    assert!(
                        (full.at(&[0, t, c]) - y.at(&[0, t, c])).abs() < 1e-12,
                        "prefix must be unchanged (t={t} keep={keep})"
                    );
                }
            }
        }
    }

    #[test]
    fn decay_factor_stays_in_unit_interval() {
        let mut store = ModelParams::<f64>::new(17);
        let sp = ScanParams::new(&mut store, "scan", 4, 4);
        // scramble the raw parameters; the parameterization must still
        // keep exp(delta * a) inside (0,1)
        let mut rng = Rng::new(19);
        store.set(
            sp.a_log,
            Tensor::rand_uniform(&mut rng, vec![4, 4], -3.0, 3.0),
        );
        let x = Tensor::rand_uniform(&mut rng, vec![1, 6, 4], -2.0, 2.0);
        let ctx = ParamCtx::eval(&store);
        let (delta, _, _) = sp.project(&ctx, &x).unwrap();
        let a = sp.decay(&ctx);
        for t in 0..6 {
            for c in 0..4 {
                for s in 0..4 {
                    let abar = (delta.at(&[0, t, c]) * a.at(&[c, s])).exp();
                    assert!(abar > 0.0 && abar < 1.0, "abar = {abar}");
                }
            }
        }
    }

    #[test]
    fn single_position_map_gets_four_identical_contributions() {
        let mut store = ModelParams::<f64>::new(23);
        let scan = Scan2d::new(&mut store, "s2d", 4, 2, false);
        let mut rng = Rng::new(29);
        let x = Tensor::rand_uniform(&mut rng, vec![2, 4, 1, 1], -1.0, 1.0);
        let ctx = ParamCtx::eval(&store);
        let merged = scan.forward(&ctx, &x).unwrap();
        let tokens = x.permute(&[0, 2, 3, 1]).unwrap().reshape(vec![2, 1, 4]).unwrap();
        let single = selective_scan_1d(&ctx, &scan.sets[0], &tokens).unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let want = 4.0 * single.at(&[b, 0, c]);
                assert!((merged.at(&[b, c, 0, 0]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn four_directions_match_explicit_index_order_oracles() {
        let mut store = ModelParams::<f64>::new(31);
        let scan = Scan2d::new(&mut store, "s2d", 3, 2, false);
        let sp = &scan.sets[0];
        let mut rng = Rng::new(37);
        let (h, w) = (3, 3);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 3, h, w], -1.0, 1.0);
        let ctx = ParamCtx::eval(&store);
        let got = scan.forward(&ctx, &x).unwrap();

        // enumerate each direction's visiting order over (row, col)
        let orders: [Vec<(usize, usize)>; 4] = [
            // TL -> BR, row-major
            (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect(),
            // BR -> TL
            (0..h)
                .rev()
                .flat_map(|i| (0..w).rev().map(move |j| (i, j)))
                .collect(),
            // TR -> BL: rows top-down, columns right-to-left
            (0..h)
                .flat_map(|i| (0..w).rev().map(move |j| (i, j)))
                .collect(),
            // BL -> TR
            (0..h)
                .rev()
                .flat_map(|i| (0..w).map(move |j| (i, j)))
                .collect(),
        ];
        let mut want = vec![0.0f64; 3 * h * w];
        for order in &orders {
            // gather tokens in visiting order
            let mut toks = Vec::with_capacity(order.len() * 3);
            for &(i, j) in order {
                for c in 0..3 {
                    toks.push(x.at(&[0, c, i, j]));
                }
            }
            let seq = Tensor::from_vec(vec![1, h * w, 3], toks).unwrap();
            let y = selective_scan_1d(&ctx, sp, &seq).unwrap();
            for (t, &(i, j)) in order.iter().enumerate() {
                for c in 0..3 {
                    want[(c * h + i) * w + j] += y.at(&[0, t, c]);
                }
            }
        }
        let want = Tensor::from_vec(vec![1, 3, h, w], want).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-10);
    }

    #[test]
    fn scan_gradchecks() {
        let mut store = ModelParams::<f64>::new(41);
        let sp = ScanParams::new(&mut store, "scan", 3, 2);
        let mut rng = Rng::new(43);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 5, 3], -1.0, 1.0);
        let r = BlockCheck::new("selective_scan_1d")
            .run(&store, &x, |ctx, t| selective_scan_1d(ctx, &sp, t));
        assert!(r.pass, "{}", r.line());

        let mut store = ModelParams::<f64>::new(47);
        let scan = Scan2d::new(&mut store, "s2d", 3, 2, false);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 3, 3, 3], -1.0, 1.0);
        let r = BlockCheck::new("selective_scan_2d")
            .sample(30)
            .run(&store, &x, |ctx, t| scan.forward(ctx, t));
        assert!(r.pass, "{}", r.line());
    }

    #[test]
    fn per_direction_parameters_are_registered_when_requested() {
        let mut store = ModelParams::<f64>::new(53);
        let shared = Scan2d::new(&mut store, "a", 4, 2, false);
        assert_eq!(shared.sets.len(), 1);
        let per_dir = Scan2d::new(&mut store, "b", 4, 2, true);
        assert_eq!(per_dir.sets.len(), 4);
        assert_ne!(per_dir.sets[0].w_delta, per_dir.sets[3].w_delta);
    }
}
