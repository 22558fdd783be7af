//! Central finite-difference checks of every differentiable layer.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward code it is checking.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoenc::{DaeSpec, HeadSpec};
use crate::branches::{Classifier, CnnSpec, RnnSpec};
use crate::error::Result;
use crate::graph::{Graph, LstmVars, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Larger tensors are checked on this many sampled coordinates.
pub const MAX_COORDS: usize = 48;

/// Outcome of one op's check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub op: &'static str,
    pub rel_err: f64,
    pub coords: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)` with a tiny floor for all-zero gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Compares the analytic gradient of a scalar function of `inputs` with
/// central differences. `build` receives one graph node per input.
///
/// Every element of tensors up to [`MAX_COORDS`] long is checked; larger
/// ones are sampled. `corrupt` scales the analytic gradient, which is how
/// tests prove the check can fail.
pub fn check<F>(inputs: &[Tensor], rng: &mut ChaCha8Rng, corrupt: bool, build: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars)?;
        Ok(g.value(l).data()[0])
    };

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= MAX_COORDS {
            (0..t.len()).collect()
        } else {
            sample(rng, t.len(), MAX_COORDS).into_vec()
        };
        for j in coords {
            let orig = t.data()[j];
            work[ti].data_mut()[j] = orig + EPSILON;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - EPSILON;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * EPSILON));
            let a = g.grad(vars[ti]).data()[j];
            analytic.push(if corrupt { a * 1.01 } else { a });
        }
    }
    Ok((relative_error(&analytic, &numeric), analytic.len()))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// Values bounded away from zero so no ReLU kink lies within ε.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Reduces any node to a scalar through a fixed random projection.
fn project(g: &mut Graph, v: Var, weights: &Tensor) -> Result<Var> {
    let n = g.value(v).len();
    let flat = g.reshape(v, &[1, n])?;
    let w = g.constant(weights.clone().reshape(&[n, 1])?);
    g.matmul(flat, w)
}

/// Whole-network cross-entropy check over every parameter of `params`.
fn network_check<N: Classifier>(
    net: &N,
    params: &ParamStore,
    batch: &[Tensor],
    labels: &[usize],
    rng: &mut ChaCha8Rng,
    corrupt: bool,
) -> Result<(f64, usize)> {
    let names: Vec<&str> = params.iter().map(|p| p.name()).collect();
    let tensors: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    let refs: Vec<&Tensor> = batch.iter().collect();
    check(&tensors, rng, corrupt, |g, vars| {
        let bound = params_bound(&names, vars);
        let (_, logits) = net.forward(g, &bound, &refs)?;
        g.softmax_xent(logits, labels)
    })
}

fn params_bound(names: &[&str], vars: &[Var]) -> crate::params::Bound {
    crate::params::Bound::from_parts(names, vars)
}

/// Runs the full suite. `corrupt` names an op whose analytic gradient is
/// deliberately perturbed.
pub fn run_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |op: &'static str, r: (f64, usize)| {
        out.push(Check {
            op,
            rel_err: r.0,
            coords: r.1,
        })
    };
    let bad = |op: &str| corrupt == Some(op);

    let a = uniform(&mut rng, &[3, 4], 1.0);
    let b = uniform(&mut rng, &[4, 2], 1.0);
    let proj = uniform(&mut rng, &[6], 1.0);
    record(
        "matmul",
        check(&[a, b], &mut rng, bad("matmul"), |g, v| {
            let c = g.matmul(v[0], v[1])?;
            project(g, c, &proj)
        })?,
    );

    let x = uniform(&mut rng, &[2, 8], 1.0);
    let w = uniform(&mut rng, &[4, 2, 3], 1.0);
    let bias = uniform(&mut rng, &[4], 1.0);
    let proj = uniform(&mut rng, &[24], 1.0);
    record(
        "conv1d",
        check(&[x, w, bias], &mut rng, bad("conv1d"), |g, v| {
            let y = g.conv1d(v[0], v[1], v[2])?;
            project(g, y, &proj)
        })?,
    );

    let (d, h, steps) = (4, 3, 5);
    let xs: Vec<Tensor> = (0..steps).map(|_| uniform(&mut rng, &[d], 1.0)).collect();
    let wx = uniform(&mut rng, &[d, 4 * h], 0.5);
    let wh = uniform(&mut rng, &[h, 4 * h], 0.5);
    let lb = uniform(&mut rng, &[4 * h], 0.5);
    let h0 = uniform(&mut rng, &[h], 0.5);
    let c0 = uniform(&mut rng, &[h], 0.5);
    let proj_h = uniform(&mut rng, &[h], 1.0);
    let proj_c = uniform(&mut rng, &[h], 1.0);
    let mut inputs = alloc::vec![wx, wh, lb, h0, c0];
    inputs.extend(xs);
    record(
        "lstm_cell",
        check(&inputs, &mut rng, bad("lstm_cell"), |g, v| {
            let p = LstmVars {
                w_input: v[0],
                w_hidden: v[1],
                bias: v[2],
            };
            let (mut hs, mut cs) = (v[3], v[4]);
            for &x in &v[5..] {
                (hs, cs) = g.lstm_cell(x, hs, cs, &p)?;
            }
            let a = project(g, hs, &proj_h)?;
            let b = project(g, cs, &proj_c)?;
            g.add(a, b)
        })?,
    );

    for op in ["relu", "sigmoid", "tanh"] {
        let x = away_from_zero(&mut rng, &[2, 5]);
        let proj = uniform(&mut rng, &[10], 1.0);
        let name: &'static str = op;
        record(
            name,
            check(&[x], &mut rng, bad(op), |g, v| {
                let y = match name {
                    "relu" => g.relu(v[0]),
                    "sigmoid" => g.sigmoid(v[0]),
                    _ => g.tanh(v[0]),
                };
                project(g, y, &proj)
            })?,
        );
    }

    let logits = uniform(&mut rng, &[4, 3], 2.0);
    let labels = [0usize, 2, 1, 2];
    record(
        "softmax_xent",
        check(&[logits], &mut rng, bad("softmax_xent"), |g, v| {
            g.softmax_xent(v[0], &labels)
        })?,
    );

    let pred = uniform(&mut rng, &[8], 1.0);
    let target = uniform(&mut rng, &[8], 1.0);
    record(
        "mse",
        check(&[pred], &mut rng, bad("mse"), |g, v| g.mse(v[0], &target))?,
    );

    let cnn = CnnSpec::new(6, 3);
    let params = cnn.init(&mut rng, seed)?;
    let batch: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[6, 6], 1.0)).collect();
    record(
        "cnn_forward",
        network_check(&cnn, &params, &batch, &[1, 2], &mut rng, bad("cnn_forward"))?,
    );

    let rnn = RnnSpec::new(5, 3);
    let params = rnn.init(&mut rng, seed)?;
    let batch: Vec<Tensor> = (0..2).map(|_| uniform(&mut rng, &[5, 5], 1.0)).collect();
    record(
        "rnn_forward",
        network_check(&rnn, &params, &batch, &[0, 2], &mut rng, bad("rnn_forward"))?,
    );

    let dae = DaeSpec::new(128);
    let params = dae.init(&mut rng, seed)?;
    let names: Vec<&str> = params.iter().map(|p| p.name()).collect();
    let tensors: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
    let features = uniform(&mut rng, &[2, 128], 1.0).map(f64::abs);
    record(
        "dae_loss",
        check(&tensors, &mut rng, bad("dae_loss"), |g, v| {
            let bound = params_bound(&names, v);
            dae.loss_graph(g, &bound, &features)
        })?,
    );

    let head = HeadSpec::new(32, 3);
    let params = head.init(&mut rng, seed)?;
    let batch: Vec<Tensor> = (0..3).map(|_| uniform(&mut rng, &[32], 1.0).map(f64::abs)).collect();
    record(
        "head_forward",
        network_check(&head, &params, &batch, &[2, 0, 1], &mut rng, bad("head_forward"))?,
    );

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> Vec<Check> {
        run_suite(7, None).unwrap()
    }

    #[test]
    fn every_op_within_tolerance() {
        for c in suite() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn primitive_ops_meet_tighter_bounds() {
        for c in suite() {
            let bound = match c.op {
                "matmul" | "conv1d" | "softmax_xent" | "mse" => 1e-6,
                "lstm_cell" => 1e-5,
                _ => TOLERANCE,
            };
            assert!(c.rel_err < bound, "{c:?}");
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let checks = run_suite(7, Some("conv1d")).unwrap();
        let conv = checks.iter().find(|c| c.op == "conv1d").unwrap();
        assert!(!conv.passed());
        assert!(checks.iter().filter(|c| c.op != "conv1d").all(Check::passed));
    }

    #[test]
    fn same_seed_same_errors() {
        assert_eq!(run_suite(3, None).unwrap(), run_suite(3, None).unwrap());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
    }
}
