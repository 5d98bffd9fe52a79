//! Finite-difference validation harness for layers and blocks.
//!
//! A check builds the scalar probe `loss = sum(forward(x) * R)` for a
//! fixed random projection `R`, computes analytic gradients through the
//! tape, and compares against central differences for the input and
//! every trainable parameter. Large tensors are checked on a seeded
//! coordinate sample instead of exhaustively.

use crate::error::Result;
use crate::nn::{Mode, ModelParams, ParamCtx};
use crate::oracles::{finite_difference_at, OracleReport, FD_STEP};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

pub struct BlockCheck<'a> {
    pub name: &'a str,
    pub rel_tol: f64,
    /// Max coordinates checked per tensor; `None` sweeps everything.
    pub sample_per_tensor: Option<usize>,
    pub mode: Mode,
    pub seed: u64,
}

impl<'a> BlockCheck<'a> {
    pub fn new(name: &'a str) -> Self {
        BlockCheck {
            name,
            rel_tol: 1e-4,
            sample_per_tensor: None,
            mode: Mode::Train,
            seed: 0x5eed,
        }
    }

    pub fn rel_tol(mut self, tol: f64) -> Self {
        self.rel_tol = tol;
        self
    }

    pub fn sample(mut self, per_tensor: usize) -> Self {
        self.sample_per_tensor = Some(per_tensor);
        self
    }

    pub fn eval_mode(mut self) -> Self {
        self.mode = Mode::Eval;
        self
    }

    /// Runs the check. `forward` must be a pure function of the store
    /// contents and `x` (batch-norm buffer updates are tolerated: train
    /// mode never reads them back).
    pub fn run<F>(&self, params: &ModelParams<f64>, x: &Tensor<f64>, forward: F) -> OracleReport
    where
        F: Fn(&ParamCtx<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    {
        match self.try_run(params, x, &forward) {
            Ok(report) => report,
            Err(e) => OracleReport {
                op: format!("{} (error: {e})", self.name),
                max_abs: f64::INFINITY,
                max_rel: f64::INFINITY,
                tol: self.rel_tol,
                pass: false,
            },
        }
    }

    fn try_run<F>(
        &self,
        params: &ModelParams<f64>,
        x: &Tensor<f64>,
        forward: &F,
    ) -> Result<OracleReport>
    where
        F: Fn(&ParamCtx<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
    {
        let mut rng = Rng::new(self.seed);

        // analytic pass
        let tape = Tape::new();
        let ctx = match self.mode {
            Mode::Train => ParamCtx::train(params, &tape),
            Mode::Eval => {
                // leaves still need the tape; reuse train ctx shape but
                // eval statistics are exercised via a dedicated ctx mode
                ParamCtx::train(params, &tape)
            }
        };
        let x_leaf = tape.leaf(x);
        let out = forward(&ctx, &x_leaf)?;
        let projection = Tensor::rand_uniform(&mut rng, out.shape().to_vec(), -1.0, 1.0);
        let loss = out.mul(&projection)?.sum_all()?;
        let grads = loss.backward()?;

        let analytic_input = grads.get_or_zeros(&x_leaf);
        let analytic_params = ctx.gradients(&grads);

        // numeric probe shared by all perturbations
        let probe = |xt: &Tensor<f64>| -> Result<Tensor<f64>> {
            let ctx = ParamCtx::train_detached(params);
            let out = forward(&ctx, xt)?;
            out.mul(&projection)?.sum_all()
        };

        // The relative denominator is floored: near-zero gradients carry
        // central-difference noise around 1e-9 at h = 1e-5, which would
        // otherwise register as spurious relative error.
        let mut worst_abs = 0.0f64;
        let mut worst_rel = 0.0f64;
        let mut track = |analytic: &[f64], numeric: &[f64], coords: &[usize]| {
            for (&c, &n) in coords.iter().zip(numeric) {
                let a = analytic[c];
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(1e-4);
                worst_abs = worst_abs.max(abs);
                worst_rel = worst_rel.max(rel);
            }
        };

        // input gradient
        let coords = self.pick_coords(x.len(), &mut rng);
        let numeric = finite_difference_at(&mut |t| probe(t), x, &coords, FD_STEP)?;
        track(&analytic_input, &numeric, &coords);

        // parameter gradients
        for (id, analytic) in &analytic_params {
            let original = params.get(*id);
            let coords = self.pick_coords(original.len(), &mut rng);
            let shape = original.shape().to_vec();
            let base = original.to_vec();
            let mut numeric = Vec::with_capacity(coords.len());
            for &c in &coords {
                let eval = |delta: f64| -> Result<f64> {
                    let mut d = base.clone();
                    d[c] += delta;
                    params.set(*id, Tensor::from_vec(shape.clone(), d)?);
                    Ok(probe(x)?.item())
                };
                let plus = eval(FD_STEP)?;
                let minus = eval(-FD_STEP)?;
                numeric.push((plus - minus) / (2.0 * FD_STEP));
            }
            params.set(*id, original);
            track(analytic, &numeric, &coords);
        }

        Ok(OracleReport {
            op: self.name.to_string(),
            max_abs: worst_abs,
            max_rel: worst_rel,
            tol: self.rel_tol,
            pass: worst_rel <= self.rel_tol,
        })
    }

    fn pick_coords(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        match self.sample_per_tensor {
            Some(k) if len > k => {
                let mut all: Vec<usize> = (0..len).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..len).collect(),
        }
    }
}

/// Convenience for checking a plain tensor function with no parameters.
pub fn check_fn<F>(name: &str, x: &Tensor<f64>, rel_tol: f64, f: F) -> OracleReport
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let params = ModelParams::<f64>::new(0);
    BlockCheck::new(name)
        .rel_tol(rel_tol)
        .run(&params, x, |_, t| f(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_pass(r: OracleReport) {
        assert!(r.pass, "{}", r.line());
    }

    #[test]
    fn primitives_pass_fd_checks() {
        let mut rng = Rng::new(101);
        let x = Tensor::rand_uniform(&mut rng, vec![3, 4], -1.5, 1.5);
        let y = Tensor::rand_uniform(&mut rng, vec![3, 4], 0.5, 2.0);
        let b = Tensor::rand_uniform(&mut rng, vec![4], 0.5, 2.0);

        assert_pass(check_fn("add", &x, 1e-4, |t| t.add(&y)));
        assert_pass(check_fn("sub", &x, 1e-4, |t| t.sub(&y)));
        assert_pass(check_fn("mul", &x, 1e-4, |t| t.mul(&y)));
        assert_pass(check_fn("div", &x, 1e-4, |t| t.div(&y)));
        assert_pass(check_fn("mul_broadcast", &x, 1e-4, |t| t.mul(&b)));
        assert_pass(check_fn("div_broadcast", &x, 1e-4, |t| t.div(&b)));
        assert_pass(check_fn("sigmoid", &x, 1e-4, |t| Ok(t.sigmoid())));
        assert_pass(check_fn("exp", &x, 1e-4, |t| Ok(t.exp())));
        assert_pass(check_fn("phi", &x, 1e-4, |t| Ok(t.phi())));
        assert_pass(check_fn("softplus", &x, 1e-4, |t| Ok(t.softplus())));
        assert_pass(check_fn("ln", &y, 1e-4, |t| Ok(t.ln())));
        assert_pass(check_fn("sqrt", &y, 1e-4, |t| Ok(t.sqrt())));
        assert_pass(check_fn("affine", &x, 1e-4, |t| Ok(t.affine(2.5, -0.75))));
        assert_pass(check_fn("pow", &y, 1e-4, |t| Ok(t.powf_scalar(0.2))));
        assert_pass(check_fn("softmax", &x, 1e-4, |t| t.softmax(1)));
        assert_pass(check_fn("sum", &x, 1e-4, |t| t.sum_axes(&[0], false)));
        assert_pass(check_fn("mean", &x, 1e-4, |t| t.mean_axes(&[1], true)));
        assert_pass(check_fn("max", &x, 1e-4, |t| t.max_axes(&[1], false)));
        assert_pass(check_fn("std", &x, 1e-4, |t| t.std_axes(&[0, 1], false)));
        assert_pass(check_fn("matmul", &x, 1e-4, |t| {
            t.matmul(&y.permute(&[1, 0]).unwrap())
        }));
        assert_pass(check_fn("permute", &x, 1e-4, |t| t.permute(&[1, 0])));
        assert_pass(check_fn("narrow", &x, 1e-4, |t| t.narrow(1, 1, 2)));
        assert_pass(check_fn("flip", &x, 1e-4, |t| t.flip(1)));
        assert_pass(check_fn("concat", &x, 1e-4, |t| {
            Tensor::concat(&[t, &y], 0)
        }));
        assert_pass(check_fn("broadcast_to", &b, 1e-4, |t| {
            t.broadcast_to(&[3, 4])
        }));
    }

    #[test]
    fn relu_and_friends_pass_away_from_kinks() {
        // keep sample points away from 0 / +-3 where the maps kink
        let x = Tensor::from_fn(vec![20], |i| {
            let v = -2.7 + 0.28 * i as f64;
            if v.abs() < 0.05 {
                0.11
            } else {
                v
            }
        });
        assert_pass(check_fn("relu", &x, 1e-4, |t| Ok(t.relu())));
        assert_pass(check_fn("hard_sigmoid", &x, 1e-4, |t| Ok(t.hard_sigmoid())));
        assert_pass(check_fn("clamp", &x, 1e-4, |t| Ok(t.clamp(-2.0, 2.0))));
    }

    #[test]
    fn reused_operand_accumulates_both_paths() {
        let x = Tensor::from_vec(vec![3], vec![0.4, -0.3, 0.9]).unwrap();
        assert_pass(check_fn("x_times_x", &x, 1e-4, |t| t.mul(t)));
    }
}

// ---------------------------------------------------------------------------
// named suites (the gradcheck CLI subcommand and the acceptance tests)
// ---------------------------------------------------------------------------

use crate::decoder::{
    selective_scan_1d, HybridAttention, M2b, MpcmNet, NetConfig, Scan2d,
    ScanParams, Sshd, UpFuse,
};
use crate::encoder::{sla_attention, Mel, Mpa, Mpc, ParCm, ParSm, Sla};
use crate::loss::{joint_loss, LabelMap, LossConfig};
use crate::nn::{conv2d, BatchNorm, Conv2d, ConvSpec, LayerNorm, Linear, StripConv};
use crate::oracles::{direct_conv_oracle, sequential_scan_oracle, sla_oracle};

fn wanted(filter: Option<&str>, name: &str) -> bool {
    filter.is_none_or(|f| name.contains(f))
}

/// Finite-difference checks for every layer and block, at toy sizes.
pub fn gradient_suite(filter: Option<&str>) -> Vec<OracleReport> {
    let mut out = Vec::new();
    let mut run = |name: &str, report: Box<dyn FnOnce() -> OracleReport>| {
        if wanted(filter, name) {
            out.push(report());
        }
    };

    run(
        "conv2d",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(1);
            let layer = Conv2d::new(&mut params, "c", ConvSpec::same(3, 4, 3).with_stride(2));
            let x = Tensor::rand_uniform(&mut Rng::new(2), vec![2, 3, 7, 7], -1.0, 1.0);
            BlockCheck::new("conv2d").run(&params, &x, |ctx, t| layer.forward(ctx, t))
        }),
    );
    run(
        "strip_conv",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(3);
            let layer = StripConv::new(&mut params, "s", 3, 7).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(4), vec![1, 3, 9, 9], -1.0, 1.0);
            BlockCheck::new("strip_conv").run(&params, &x, |ctx, t| layer.forward(ctx, t))
        }),
    );
    run(
        "batch_norm",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(5);
            let bn = BatchNorm::new(&mut params, "bn", 3);
            let x = Tensor::rand_uniform(&mut Rng::new(6), vec![2, 3, 4, 4], -1.0, 1.0);
            BlockCheck::new("batch_norm").run(&params, &x, |ctx, t| bn.forward(ctx, t))
        }),
    );
    run(
        "layer_norm",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(7);
            let ln = LayerNorm::new(&mut params, "ln", 3);
            let x = Tensor::rand_uniform(&mut Rng::new(8), vec![2, 3, 4, 4], -1.0, 1.0);
            BlockCheck::new("layer_norm").run(&params, &x, |ctx, t| ln.forward(ctx, t))
        }),
    );
    run(
        "linear",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(9);
            let lin = Linear::new(&mut params, "l", 4, 3);
            let x = Tensor::rand_uniform(&mut Rng::new(10), vec![5, 4], -1.0, 1.0);
            BlockCheck::new("linear").run(&params, &x, |ctx, t| lin.forward(ctx, t))
        }),
    );
    run(
        "bilinear_resize",
        Box::new(|| {
            let x = Tensor::rand_uniform(&mut Rng::new(11), vec![1, 2, 4, 4], -1.0, 1.0);
            let up = check_fn("bilinear_up", &x, 1e-4, |t| {
                crate::nn::bilinear_resize(t, 2.0)
            });
            let down = check_fn("bilinear_down", &x, 1e-4, |t| {
                crate::nn::bilinear_resize(t, 0.5)
            });
            OracleReport {
                op: "bilinear_resize".into(),
                max_abs: up.max_abs.max(down.max_abs),
                max_rel: up.max_rel.max(down.max_rel),
                tol: 1e-4,
                pass: up.pass && down.pass,
            }
        }),
    );
    run(
        "mel",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(13);
            let mel = Mel::new(&mut params, "mel", 4);
            let x = Tensor::rand_uniform(&mut Rng::new(14), vec![2, 4, 8, 8], -1.0, 1.0);
            BlockCheck::new("mel")
                .sample(24)
                .run(&params, &x, |ctx, t| mel.forward(ctx, t))
        }),
    );
    run(
        "parcm",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(15);
            let block = ParCm::new(&mut params, "p", 8).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(16), vec![2, 8, 6, 6], -1.0, 1.0);
            BlockCheck::new("parcm")
                .sample(20)
                .run(&params, &x, |ctx, t| block.forward(ctx, t))
        }),
    );
    run(
        "parsm",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(17);
            let block = ParSm::new(&mut params, "s", 8).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(18), vec![1, 8, 8, 8], -1.0, 1.0);
            BlockCheck::new("parsm")
                .sample(24)
                .run(&params, &x, |ctx, t| block.forward(ctx, t))
        }),
    );
    run(
        "sla",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(19);
            let sla = Sla::new(&mut params, "a", 6, 1).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(20), vec![1, 5, 6], -1.0, 1.0);
            BlockCheck::new("sla").run(&params, &x, |ctx, t| sla.forward(ctx, t))
        }),
    );
    run(
        "mpc",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(21);
            let block = Mpc::new(&mut params, "m", 8).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(22), vec![2, 8, 6, 6], -1.0, 1.0);
            BlockCheck::new("mpc")
                .sample(12)
                .run(&params, &x, |ctx, t| block.forward(ctx, t))
        }),
    );
    run(
        "mpa",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(23);
            let block = Mpa::new(&mut params, "m", 8, 1).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(24), vec![2, 8, 4, 4], -1.0, 1.0);
            BlockCheck::new("mpa")
                .sample(16)
                .run(&params, &x, |ctx, t| block.forward(ctx, t))
        }),
    );
    run(
        "up_fuse",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(25);
            let up = UpFuse::new(&mut params, "u", 6, 4);
            let mut rng = Rng::new(26);
            let u = Tensor::rand_uniform(&mut rng, vec![2, 6, 3, 3], -1.0, 1.0);
            let skip = Tensor::rand_uniform(&mut rng, vec![2, 4, 6, 6], -1.0, 1.0);
            BlockCheck::new("up_fuse")
                .sample(20)
                .run(&params, &u, |ctx, t| up.forward(ctx, t, &skip))
        }),
    );
    run(
        "selective_scan_1d",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(27);
            let sp = ScanParams::new(&mut params, "scan", 3, 2);
            let x = Tensor::rand_uniform(&mut Rng::new(28), vec![1, 5, 3], -1.0, 1.0);
            BlockCheck::new("selective_scan_1d")
                .run(&params, &x, |ctx, t| selective_scan_1d(ctx, &sp, t))
        }),
    );
    run(
        "selective_scan_2d",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(29);
            let scan = Scan2d::new(&mut params, "s2d", 3, 2, false);
            let x = Tensor::rand_uniform(&mut Rng::new(30), vec![1, 3, 3, 3], -1.0, 1.0);
            BlockCheck::new("selective_scan_2d")
                .sample(30)
                .run(&params, &x, |ctx, t| scan.forward(ctx, t))
        }),
    );
    run(
        "hybrid_attention",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(31);
            let ha = HybridAttention::new(&mut params, "h", 8);
            let x = Tensor::rand_uniform(&mut Rng::new(32), vec![1, 8, 7, 7], -1.0, 1.0);
            BlockCheck::new("hybrid_attention")
                .sample(30)
                .run(&params, &x, |ctx, t| ha.forward(ctx, t))
        }),
    );
    run(
        "sshd",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(33);
            let sshd = Sshd::new(&mut params, "s", 8, 2, false).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(34), vec![1, 8, 4, 4], -1.0, 1.0);
            BlockCheck::new("sshd")
                .sample(12)
                .run(&params, &x, |ctx, t| sshd.forward(ctx, t))
        }),
    );
    run(
        "m2b",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(35);
            let m2b = M2b::new(&mut params, "m", 8, 2, false).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(36), vec![2, 8, 8, 8], -1.0, 1.0);
            BlockCheck::new("m2b")
                .sample(6)
                .run(&params, &x, |ctx, t| m2b.forward(ctx, t))
        }),
    );
    run(
        "joint_loss",
        Box::new(|| {
            let mut rng = Rng::new(37);
            let probs = Tensor::rand_uniform(&mut rng, vec![1, 4, 3, 3], -2.0, 2.0)
                .softmax(1)
                .unwrap()
                .detach();
            let ids: Vec<u8> = (0..9).map(|_| rng.below(4) as u8).collect();
            let gt = LabelMap::new(1, 3, 3, ids).unwrap();
            let cfg = LossConfig::default();
            let store = ModelParams::<f64>::new(0);
            BlockCheck::new("joint_loss").run(&store, &probs, |_, t| joint_loss(t, &gt, &cfg))
        }),
    );
    run(
        "full_net_16",
        Box::new(|| {
            let mut params = ModelParams::<f64>::new(39);
            let net = MpcmNet::new(&mut params, NetConfig::default()).unwrap();
            let x = Tensor::rand_uniform(&mut Rng::new(40), vec![2, 3, 16, 16], 0.0, 1.0);
            BlockCheck::new("full_net_16")
                .rel_tol(1e-3)
                .sample(2)
                .run(&params, &x, |ctx, t| net.forward(ctx, t))
        }),
    );
    out
}

/// Implementation-vs-oracle equivalence over fresh random cases
/// (10 per operator, max abs diff below 1e-10 in f64).
pub fn oracle_equivalence_suite(filter: Option<&str>) -> Vec<OracleReport> {
    const TOL: f64 = 1e-10;
    let mut out = Vec::new();

    if wanted(filter, "conv_vs_direct_oracle") {
        let mut rng = Rng::new(101);
        let mut worst = OracleReport {
            op: "conv_vs_direct_oracle".into(),
            max_abs: 0.0,
            max_rel: 0.0,
            tol: TOL,
            pass: true,
        };
        for case in 0..10 {
            let spec = match case % 4 {
                0 => ConvSpec::same(3, 5, 3),
                1 => ConvSpec::same(4, 4, 3).with_stride(2),
                2 => ConvSpec::same(2, 6, 5).with_stride(4),
                _ => ConvSpec::same(4, 4, 3).depthwise(),
            };
            let x = Tensor::rand_uniform(&mut rng, vec![2, spec.in_ch, 9, 10], -1.0, 1.0);
            let w = Tensor::rand_uniform(&mut rng, spec.weight_shape(), -1.0, 1.0);
            let b = Tensor::rand_uniform(&mut rng, vec![spec.out_ch], -1.0, 1.0);
            let got = conv2d(&x, &w, &b, &spec).unwrap();
            let want = direct_conv_oracle(&x, &w, &b, &spec);
            let r = OracleReport::from_diff("case", &want.data_f64(), &got.data_f64(), TOL);
            worst.max_abs = worst.max_abs.max(r.max_abs);
            worst.max_rel = worst.max_rel.max(r.max_rel);
            worst.pass &= r.pass;
        }
        out.push(worst);
    }

    if wanted(filter, "strip_vs_dense_oracle") {
        let mut rng = Rng::new(103);
        let mut worst = OracleReport {
            op: "strip_vs_dense_oracle".into(),
            max_abs: 0.0,
            max_rel: 0.0,
            tol: TOL,
            pass: true,
        };
        for case in 0..10 {
            let k = [7usize, 11, 21][case % 3];
            let c = 2 + case % 3;
            let mut params = ModelParams::<f64>::new(200 + case as u64);
            let strip = StripConv::new(&mut params, "s", c, k).unwrap();
            params.zero(strip.row.b);
            params.zero(strip.col.b);
            let x = Tensor::rand_uniform(&mut rng, vec![1, c, 24, 24], -1.0, 1.0);
            let ctx = crate::nn::ParamCtx::eval(&params);
            let got = strip.forward(&ctx, &x).unwrap();
            let row_w = params.get(strip.row.w);
            let col_w = params.get(strip.col.w);
            let dense = Tensor::from_fn(vec![c, 1, k, k], |i| {
                let ch = i / (k * k);
                let r = (i / k) % k;
                let cc = i % k;
                col_w.at(&[ch, 0, r, 0]) * row_w.at(&[ch, 0, 0, cc])
            });
            let spec = ConvSpec {
                in_ch: c,
                out_ch: c,
                kernel: (k, k),
                stride: (1, 1),
                padding: ((k - 1) / 2, (k - 1) / 2),
                groups: c,
                dilation: (1, 1),
            };
            let want = direct_conv_oracle(&x, &dense, &Tensor::zeros(vec![c]), &spec);
            let r = OracleReport::from_diff("case", &want.data_f64(), &got.data_f64(), TOL);
            worst.max_abs = worst.max_abs.max(r.max_abs);
            worst.max_rel = worst.max_rel.max(r.max_rel);
            worst.pass &= r.pass;
        }
        out.push(worst);
    }

    if wanted(filter, "scan_vs_sequential_oracle") {
        let mut worst = OracleReport {
            op: "scan_vs_sequential_oracle".into(),
            max_abs: 0.0,
            max_rel: 0.0,
            tol: TOL,
            pass: true,
        };
        let mut store = ModelParams::<f64>::new(105);
        let sp = ScanParams::new(&mut store, "scan", 4, 3);
        let mut rng = Rng::new(106);
        for case in 0..10 {
            let l = 3 + case % 6;
            let x = Tensor::rand_uniform(&mut rng, vec![1, l, 4], -1.0, 1.0);
            let ctx = crate::nn::ParamCtx::eval(&store);
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
            let r = OracleReport::from_diff("case", &want.data_f64(), &got.data_f64(), TOL);
            worst.max_abs = worst.max_abs.max(r.max_abs);
            worst.max_rel = worst.max_rel.max(r.max_rel);
            worst.pass &= r.pass;
        }
        out.push(worst);
    }

    if wanted(filter, "scan2d_vs_index_order_oracle") {
        let mut worst = OracleReport {
            op: "scan2d_vs_index_order_oracle".into(),
            max_abs: 0.0,
            max_rel: 0.0,
            tol: TOL,
            pass: true,
        };
        let mut store = ModelParams::<f64>::new(107);
        let scan = Scan2d::new(&mut store, "s2d", 3, 2, false);
        let mut rng = Rng::new(108);
        for case in 0..10 {
            let (h, w) = (2 + case % 3, 2 + (case / 3) % 3);
            let x = Tensor::rand_uniform(&mut rng, vec![1, 3, h, w], -1.0, 1.0);
            let ctx = crate::nn::ParamCtx::eval(&store);
            let got = scan.forward(&ctx, &x).unwrap();
            let orders: [Vec<(usize, usize)>; 4] = [
                (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect(),
                (0..h)
                    .rev()
                    .flat_map(|i| (0..w).rev().map(move |j| (i, j)))
                    .collect(),
                (0..h)
                    .flat_map(|i| (0..w).rev().map(move |j| (i, j)))
                    .collect(),
                (0..h)
                    .rev()
                    .flat_map(|i| (0..w).map(move |j| (i, j)))
                    .collect(),
            ];
            let mut want = vec![0.0f64; 3 * h * w];
            for order in &orders {
                let mut toks = Vec::with_capacity(order.len() * 3);
                for &(i, j) in order {
                    for c in 0..3 {
                        toks.push(x.at(&[0, c, i, j]));
                    }
                }
                let seq = Tensor::from_vec(vec![1, h * w, 3], toks).unwrap();
                let y = selective_scan_1d(&ctx, &scan.sets[0], &seq).unwrap();
                for (t, &(i, j)) in order.iter().enumerate() {
                    for c in 0..3 {
                        want[(c * h + i) * w + j] += y.at(&[0, t, c]);
                    }
                }
            }
            let r = OracleReport::from_diff("case", &want, &got.data_f64(), TOL);
            worst.max_abs = worst.max_abs.max(r.max_abs);
            worst.max_rel = worst.max_rel.max(r.max_rel);
            worst.pass &= r.pass;
        }
        out.push(worst);
    }

    if wanted(filter, "sla_vs_equation_oracle") {
        let mut rng = Rng::new(109);
        let mut worst = OracleReport {
            op: "sla_vs_equation_oracle".into(),
            max_abs: 0.0,
            max_rel: 0.0,
            tol: TOL,
            pass: true,
        };
        for case in 0..10 {
            let n = 4 + case;
            let q = Tensor::rand_uniform(&mut rng, vec![n, 8], -1.0, 1.0);
            let k = Tensor::rand_uniform(&mut rng, vec![n, 8], -1.0, 1.0);
            let v = Tensor::rand_uniform(&mut rng, vec![n, 8], -1.0, 1.0);
            let got = sla_attention(
                &q.reshape(vec![1, n, 8]).unwrap(),
                &k.reshape(vec![1, n, 8]).unwrap(),
                &v.reshape(vec![1, n, 8]).unwrap(),
            )
            .unwrap();
            let want = sla_oracle(&q, &k, &v);
            let r = OracleReport::from_diff("case", &want.data_f64(), &got.data_f64(), TOL);
            worst.max_abs = worst.max_abs.max(r.max_abs);
            worst.max_rel = worst.max_rel.max(r.max_rel);
            worst.pass &= r.pass;
        }
        out.push(worst);
    }

    out
}

/// Gradient checks plus oracle equivalences; the `gradcheck` CLI runs
/// this and writes one line per report to `oracle-report.txt`.
pub fn run_all(filter: Option<&str>) -> Vec<OracleReport> {
    let mut out = gradient_suite(filter);
    out.extend(oracle_equivalence_suite(filter));
    out
}
