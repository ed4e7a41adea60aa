//! Central finite-difference gradient checking in double precision.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by [`standard_suite`].
pub const SUITE_STEP: f64 = 1e-4;
/// Relative error bound every [`standard_suite`] case must meet.
pub const SUITE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1, |a|, |n|)` over all checked coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares the tape's gradient of `program` with central differences of
/// step `h` in every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, program: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = program(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = program(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// One named case of [`standard_suite`].
#[derive(Debug)]
pub struct SuiteCase {
    pub name: String,
    pub report: Result<GradCheckReport>,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        matches!(&self.report, Ok(r) if r.max_rel_error <= SUITE_TOL)
    }
}

struct Suite {
    cases: Vec<SuiteCase>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, inputs: &[Tensor<f64>], program: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        self.cases.push(SuiteCase {
            name: name.to_string(),
            report: check_gradients(inputs, SUITE_STEP, program),
        });
    }
}

/// Checks every differentiable tape operation, three seeded random
/// compositions and an operand with two consumers, all on small f64 inputs.
pub fn standard_suite() -> Vec<SuiteCase> {
    let mut suite = Suite { cases: Vec::new() };
    elementwise_ops(&mut suite);
    linear_algebra_ops(&mut suite);
    normalization_ops(&mut suite);
    convolution_ops(&mut suite);
    structural_ops(&mut suite);
    seeded_composite_programs(&mut suite);
    shared_operand(&mut suite);
    suite.cases
}

/// Values bounded away from zero so kinks (relu, abs) are not straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.2..2.0)).collect())
        .expect("length matches shape")
}

/// Contracts `out` with a fixed random weight so every output coordinate
/// contributes a distinct amount to the scalar loss.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(away_from_zero(&mut rng, &shape));
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Shape-preserving building blocks for randomly composed programs.
fn apply(t: &mut Tape<f64>, op: usize, x: Var, y: Var) -> Result<Var> {
    match op {
        0 => t.add(x, y),
        1 => t.mul(x, y),
        2 => t.gelu(x),
        3 => t.softmax(x, 1),
        4 => t.sub(x, y),
        5 => t.exp(x),
        _ => {
            let g = t.constant(Tensor::ones(&[4]));
            let b = t.constant(Tensor::zeros(&[4]));
            t.layernorm(x, g, b, 1e-5)
        }
    }
}

fn elementwise_ops(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = away_from_zero(&mut rng, &[3, 4]);
    let b = away_from_zero(&mut rng, &[3, 4]);
    let s = away_from_zero(&mut rng, &[1]);
    let p = positive(&mut rng, &[3, 4]);
    suite.check("add", &[a.clone(), b.clone()], |t, v| {
        let o = t.add(v[0], v[1])?;
        weighted_sum(t, o, 9)
    });
    suite.check("sub", &[a.clone(), b.clone()], |t, v| {
        let o = t.sub(v[0], v[1])?;
        weighted_sum(t, o, 9)
    });
    suite.check("mul", &[a.clone(), b.clone()], |t, v| {
        let o = t.mul(v[0], v[1])?;
        weighted_sum(t, o, 9)
    });
    suite.check("mul scalar broadcast", &[a.clone(), s.clone()], |t, v| {
        let o = t.mul(v[1], v[0])?;
        weighted_sum(t, o, 9)
    });
    suite.check("sub scalar broadcast", &[a.clone(), s], |t, v| {
        let o = t.sub(v[0], v[1])?;
        weighted_sum(t, o, 9)
    });
    suite.check("relu", &[a.clone()], |t, v| {
        let o = t.relu(v[0])?;
        weighted_sum(t, o, 9)
    });
    suite.check("gelu", &[a.clone()], |t, v| {
        let o = t.gelu(v[0])?;
        weighted_sum(t, o, 9)
    });
    suite.check("exp", &[a.clone()], |t, v| {
        let o = t.exp(v[0])?;
        weighted_sum(t, o, 9)
    });
    suite.check("log", &[p.clone()], |t, v| {
        let o = t.log(v[0])?;
        weighted_sum(t, o, 9)
    });
    suite.check("abs", &[a.clone()], |t, v| {
        let o = t.abs(v[0])?;
        weighted_sum(t, o, 9)
    });
    suite.check("powf", &[p], |t, v| {
        let o = t.powf(v[0], 3.0)?;
        weighted_sum(t, o, 9)
    });
    suite.check("scale and shift", &[a], |t, v| {
        let o = t.scale(v[0], -1.7)?;
        let o = t.add_scalar(o, 0.3)?;
        weighted_sum(t, o, 9)
    });
}

fn linear_algebra_ops(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = away_from_zero(&mut rng, &[3, 4]);
    let b = away_from_zero(&mut rng, &[4, 2]);
    suite.check("matmul", &[a.clone(), b], |t, v| {
        let o = t.matmul(v[0], v[1])?;
        weighted_sum(t, o, 3)
    });
    let x = away_from_zero(&mut rng, &[2, 3, 4]);
    let y = away_from_zero(&mut rng, &[2, 4, 5]);
    let yt = away_from_zero(&mut rng, &[2, 5, 4]);
    suite.check("bmm", &[x.clone(), y], |t, v| {
        let o = t.bmm(v[0], v[1], false)?;
        weighted_sum(t, o, 3)
    });
    suite.check("bmm transposed", &[x, yt], |t, v| {
        let o = t.bmm(v[0], v[1], true)?;
        weighted_sum(t, o, 3)
    });
    let bias = away_from_zero(&mut rng, &[4]);
    suite.check("add_bias", &[a, bias], |t, v| {
        let o = t.add_bias(v[0], v[1])?;
        weighted_sum(t, o, 3)
    });
}

fn normalization_ops(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = away_from_zero(&mut rng, &[3, 5]);
    suite.check("softmax last axis", &[x.clone()], |t, v| {
        let o = t.softmax(v[0], 1)?;
        weighted_sum(t, o, 4)
    });
    suite.check("softmax first axis", &[x.clone()], |t, v| {
        let o = t.softmax(v[0], 0)?;
        weighted_sum(t, o, 4)
    });
    let gain = away_from_zero(&mut rng, &[5]);
    let bias = away_from_zero(&mut rng, &[5]);
    suite.check("layernorm", &[x.clone(), gain, bias], |t, v| {
        let o = t.layernorm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, o, 4)
    });
    let targets = [4usize, 0, 2];
    suite.check("cross_entropy", &[x], |t, v| {
        t.cross_entropy(v[0], &targets)
    });
}

fn convolution_ops(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = away_from_zero(&mut rng, &[2, 6, 5]);
    let k = away_from_zero(&mut rng, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        suite.check("conv2d", &[x.clone(), k.clone()], move |t, v| {
            let o = t.conv2d(v[0], v[1], stride, pad)?;
            weighted_sum(t, o, 5)
        });
    }
    let xb = away_from_zero(&mut rng, &[2, 2, 4, 4]);
    suite.check("conv2d batched", &[xb.clone(), k], |t, v| {
        let o = t.conv2d(v[0], v[1], 2, 1)?;
        weighted_sum(t, o, 5)
    });
    let gamma = away_from_zero(&mut rng, &[2]);
    let beta = away_from_zero(&mut rng, &[2]);
    suite.check("channel_affine", &[xb, gamma, beta], |t, v| {
        let o = t.channel_affine(v[0], v[1], v[2])?;
        weighted_sum(t, o, 5)
    });
}

fn structural_ops(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = away_from_zero(&mut rng, &[3, 4]);
    let y = away_from_zero(&mut rng, &[2, 4]);
    let index: Arc<[usize]> = vec![0, 5, 5, 11, 3, 0].into();
    suite.check("gather", &[x.clone()], move |t, v| {
        let o = t.gather(v[0], &[2, 3], index.clone())?;
        weighted_sum(t, o, 6)
    });
    suite.check("concat", &[x.clone(), y], |t, v| {
        let o = t.concat(&[v[0], v[1], v[0]])?;
        weighted_sum(t, o, 6)
    });
    suite.check("reshape", &[x.clone()], |t, v| {
        let o = t.reshape(v[0], &[2, 6])?;
        weighted_sum(t, o, 6)
    });
    suite.check("mean_last", &[x.clone()], |t, v| {
        let o = t.mean_last(v[0])?;
        weighted_sum(t, o, 6)
    });
    suite.check("mean", &[x.clone()], |t, v| {
        let o = t.gelu(v[0])?;
        t.mean(o)
    });
    suite.check("sum", &[x], |t, v| {
        let o = t.exp(v[0])?;
        t.sum(o)
    });
}

fn seeded_composite_programs(suite: &mut Suite) {
    for seed in [100u64, 200, 300] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(2..=4);
        let ops: Vec<usize> = (0..len).map(|_| rng.gen_range(0..7)).collect();
        let a = away_from_zero(&mut rng, &[3, 4]);
        let b = away_from_zero(&mut rng, &[3, 4]);
        let w = away_from_zero(&mut rng, &[4, 4]);
        suite.check(&format!("composite {seed} {ops:?}"), &[a, b, w], |t, v| {
            let mut cur = v[0];
            for &op in &ops {
                cur = apply(t, op, cur, v[1])?;
                cur = t.matmul(cur, v[2])?;
            }
            weighted_sum(t, cur, seed)
        });
    }
}

fn shared_operand(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = away_from_zero(&mut rng, &[5]);
    suite.check("two consumers", &[x], |t, v| {
        let a = t.exp(v[0])?;
        let b = t.gelu(v[0])?;
        let o = t.mul(a, b)?;
        weighted_sum(t, o, 8)
    });
}
