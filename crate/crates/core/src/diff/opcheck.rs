//! Randomized finite-difference checks for every primitive tape op.
//!
//! Each check draws inputs from a seeded RNG, reduces the op's output to a
//! scalar through a fixed random projection and compares tape gradients with
//! central differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{finite_diff_check, GradCheckReport};
use super::params::{BoundParams, ParamSet};
use super::tape::{Index, Result, Tape, Var};
use super::tensor::Tensor;

pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_scalar",
    "add_scalar",
    "concat0",
    "concat1",
    "relu",
    "leaky_relu",
    "exp",
    "logsumexp0",
    "logsumexp1",
    "log_normalize_rows",
    "segment_softmax",
    "segment_log_softmax",
    "segment_sum",
    "gather_rows",
    "scale_rows",
    "sum",
    "mse",
];

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// Entries bounded away from zero so that ReLU kinks are never straddled.
fn random_off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let m = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
}

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Runs the check for `op` at the random point selected by `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..5usize);
    let n = rng.random_range(1..5usize);
    let k = rng.random_range(1..5usize);
    let mut params = ParamSet::new();
    let a = if matches!(op, "relu" | "leaky_relu") { random_off_zero(&mut rng, m, n) } else { random(&mut rng, m, n) };
    params.insert("a", a);

    // Sorted segment ids over m rows and a gather index with repeats.
    let mut segs: Vec<usize> = (0..m).map(|_| rng.random_range(0..3usize)).collect();
    segs.sort_unstable();
    let segments: Index = Arc::from(segs);
    let gather: Index = Arc::from((0..m + 2).map(|_| rng.random_range(0..m)).collect::<Vec<_>>());

    let out_shape: (usize, usize) = match op {
        "matmul" => (m, k),
        "concat0" => (m + k, n),
        "concat1" => (m, n + k),
        "logsumexp0" => (1, n),
        "logsumexp1" => (m, 1),
        "segment_sum" => (3, n),
        "gather_rows" => (m + 2, n),
        "sum" | "mse" => (1, 1),
        _ => (m, n),
    };
    match op {
        "matmul" => params.insert("b", random(&mut rng, n, k)),
        "add" | "sub" | "mul" | "mse" => params.insert("b", random(&mut rng, m, n)),
        "add_row" => params.insert("b", random(&mut rng, 1, n)),
        "concat0" => params.insert("b", random(&mut rng, k, n)),
        "concat1" => params.insert("b", random(&mut rng, m, k)),
        "scale_rows" => params.insert("b", random(&mut rng, m, 1)),
        _ => {}
    }
    let proj = random(&mut rng, out_shape.0, out_shape.1);
    let scalar = rng.random_range(-2.0..2.0);
    let op_name = op.to_string();

    let f = move |tape: &mut Tape, p: &BoundParams| -> Result<Var> {
        let a = p.get("a")?;
        let b = || p.get("b");
        let out = match op_name.as_str() {
            "matmul" => tape.matmul(a, b()?)?,
            "add" => tape.add(a, b()?)?,
            "sub" => tape.sub(a, b()?)?,
            "mul" => tape.mul(a, b()?)?,
            "add_row" => tape.add_row(a, b()?)?,
            "mul_scalar" => tape.mul_scalar(a, scalar),
            "add_scalar" => tape.add_scalar(a, scalar),
            "concat0" => tape.concat(&[a, b()?], 0)?,
            "concat1" => tape.concat(&[a, b()?], 1)?,
            "relu" => tape.relu(a),
            "leaky_relu" => tape.leaky_relu(a, 0.2),
            "exp" => tape.exp(a),
            "logsumexp0" => tape.logsumexp(a, 0)?,
            "logsumexp1" => tape.logsumexp(a, 1)?,
            "log_normalize_rows" => tape.log_normalize_rows(a),
            "segment_softmax" => tape.segment_softmax(a, &segments)?,
            "segment_log_softmax" => tape.segment_log_softmax(a, &segments)?,
            "segment_sum" => tape.segment_sum(a, &segments, 3)?,
            "gather_rows" => tape.gather_rows(a, &gather)?,
            "scale_rows" => tape.scale_rows(a, b()?)?,
            "sum" => tape.sum(a),
            "mse" => tape.mse(a, b()?)?,
            other => panic!("unknown op `{other}`"),
        };
        project(tape, out, &proj)
    };
    finite_diff_check(&params, 1e-6, f)
}
