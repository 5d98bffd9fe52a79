//! Wall-time probes comparing the linear attention path against the
//! quadratic softmax reference, and the sequence scan against itself at
//! different lengths. Linear operators should show a time ratio near 4
//! between N and 4N tokens; the softmax reference grows ~16x.

use std::time::Instant;

use crate::decoder::scan_recurrence;
use crate::encoder::sla_attention;
use crate::oracles::softmax_attention_oracle;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BENCH_DIM: usize = 64;
const SCAN_CHANNELS: usize = 16;
const SCAN_STATE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    Sla,
    Softmax,
    Scan,
}

impl BenchOp {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sla" => Some(BenchOp::Sla),
            "softmax" => Some(BenchOp::Softmax),
            "scan" => Some(BenchOp::Scan),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BenchOp::Sla => "sla",
            BenchOp::Softmax => "softmax",
            BenchOp::Scan => "scan",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub op: &'static str,
    pub n: usize,
    pub seconds_n: f64,
    pub seconds_4n: f64,
}

impl BenchResult {
    pub fn ratio(&self) -> f64 {
        self.seconds_4n / self.seconds_n
    }

    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("bench op {} n {} seconds {:.6}", self.op, self.n, self.seconds_n),
            format!(
                "bench op {} n {} seconds {:.6}",
                self.op,
                4 * self.n,
                self.seconds_4n
            ),
            format!("metric bench_{}_ratio {:.3}", self.op, self.ratio()),
        ]
    }
}

/// Best-of-k timing of one closure; k shrinks as runs get slower.
fn time_best(mut f: impl FnMut()) -> f64 {
    f(); // warm up
    let probe = {
        let t = Instant::now();
        f();
        t.elapsed().as_secs_f64()
    };
    let reps = if probe > 0.5 {
        1
    } else {
        ((0.3 / probe.max(1e-4)) as usize).clamp(2, 15)
    };
    let mut best = probe;
    for _ in 0..reps {
        let t = Instant::now();
        f();
        best = best.min(t.elapsed().as_secs_f64());
    }
    best
}

fn time_op(op: BenchOp, n: usize) -> f64 {
    let mut rng = Rng::new(n as u64);
    match op {
        BenchOp::Sla => {
            let q = Tensor::<f64>::rand_uniform(&mut rng, vec![1, n, BENCH_DIM], -1.0, 1.0);
            let k = Tensor::<f64>::rand_uniform(&mut rng, vec![1, n, BENCH_DIM], -1.0, 1.0);
            let v = Tensor::<f64>::rand_uniform(&mut rng, vec![1, n, BENCH_DIM], -1.0, 1.0);
            time_best(|| {
                let _ = sla_attention(&q, &k, &v).unwrap();
            })
        }
        BenchOp::Softmax => {
            let q = Tensor::<f64>::rand_uniform(&mut rng, vec![n, BENCH_DIM], -1.0, 1.0);
            let k = Tensor::<f64>::rand_uniform(&mut rng, vec![n, BENCH_DIM], -1.0, 1.0);
            let v = Tensor::<f64>::rand_uniform(&mut rng, vec![n, BENCH_DIM], -1.0, 1.0);
            time_best(|| {
                let _ = softmax_attention_oracle(&q, &k, &v);
            })
        }
        BenchOp::Scan => {
            let x =
                Tensor::<f64>::rand_uniform(&mut rng, vec![1, n, SCAN_CHANNELS], -1.0, 1.0);
            let delta =
                Tensor::<f64>::rand_uniform(&mut rng, vec![1, n, SCAN_CHANNELS], 0.1, 0.9);
            let b = Tensor::<f64>::rand_uniform(&mut rng, vec![1, n, SCAN_STATE], -1.0, 1.0);
            let c = Tensor::<f64>::rand_uniform(&mut rng, vec![1, n, SCAN_STATE], -1.0, 1.0);
            let a = Tensor::<f64>::rand_uniform(&mut rng, vec![SCAN_CHANNELS, SCAN_STATE], -2.0, -0.1);
            let d = Tensor::<f64>::rand_uniform(&mut rng, vec![SCAN_CHANNELS], -1.0, 1.0);
            time_best(|| {
                let _ = scan_recurrence(&x, &delta, &b, &c, &a, &d).unwrap();
            })
        }
    }
}

/// Times the operator at `n` and `4n` tokens.
pub fn run_bench(op: BenchOp, n: usize) -> BenchResult {
    BenchResult {
        op: op.name(),
        n,
        seconds_n: time_op(op, n),
        seconds_4n: time_op(op, 4 * n),
    }
}
