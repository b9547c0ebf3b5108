//! Seeded gradient-check cases, one per differentiable tape operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, linear, Tape, Tensor, Var};
use crate::error::Result;

pub type CaseFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// A differentiable operation together with a generator of valid inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub f: CaseFn,
}

impl OpCase {
    /// Worst relative error over `seeds` seeded input draws.
    pub fn check(&self, seeds: std::ops::Range<u64>, eps: f64) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (self.inputs)(&mut rng);
            worst = worst.max(grad_check(self.f, &inputs, eps)?.max_rel_error);
        }
        Ok(worst)
    }
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("uniform shape")
}

/// Reduces an op output to a scalar via a fixed random probe so every
/// output coordinate contributes a distinct weight.
fn probe<'t>(y: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    Ok(y.mul(w)?.sum())
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(2..=5))
}

fn unary_inputs(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |rng| {
        let (m, n) = dims(rng);
        vec![uniform(rng, m, n, lo, hi), uniform(rng, m, n, -1.0, 1.0)]
    }
}

fn pair_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, n) = dims(rng);
    vec![
        uniform(rng, m, n, -2.0, 2.0),
        uniform(rng, m, n, -2.0, 2.0),
        uniform(rng, m, n, -1.0, 1.0),
    ]
}

pub fn all() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |rng| {
                let (m, k, n) = (
                    rng.random_range(1..=4),
                    rng.random_range(1..=4),
                    rng.random_range(1..=4),
                );
                vec![
                    uniform(rng, m, k, -1.0, 1.0),
                    uniform(rng, k, n, -1.0, 1.0),
                    uniform(rng, m, n, -1.0, 1.0),
                ]
            },
            f: |_, x| probe(x[0].matmul(x[1])?, x[2]),
        },
        OpCase {
            name: "transpose",
            inputs: |rng| {
                let (m, n) = dims(rng);
                vec![uniform(rng, m, n, -1.0, 1.0), uniform(rng, n, m, -1.0, 1.0)]
            },
            f: |_, x| probe(x[0].t(), x[1]),
        },
        OpCase {
            name: "linear",
            inputs: |rng| {
                let (m, n) = dims(rng);
                let out = rng.random_range(1..=4);
                vec![
                    uniform(rng, m, n, -1.0, 1.0),
                    uniform(rng, out, n, -1.0, 1.0),
                    uniform(rng, 1, out, -1.0, 1.0),
                    uniform(rng, m, out, -1.0, 1.0),
                ]
            },
            f: |_, x| probe(linear(x[0], x[1], Some(x[2]))?, x[3]),
        },
        OpCase {
            name: "add",
            inputs: pair_inputs,
            f: |_, x| probe(x[0].add(x[1])?, x[2]),
        },
        OpCase {
            name: "sub",
            inputs: pair_inputs,
            f: |_, x| probe(x[0].sub(x[1])?, x[2]),
        },
        OpCase {
            name: "mul",
            inputs: pair_inputs,
            f: |_, x| probe(x[0].mul(x[1])?, x[2]),
        },
        OpCase {
            name: "div",
            inputs: |rng| {
                let (m, n) = dims(rng);
                vec![
                    uniform(rng, m, n, -2.0, 2.0),
                    uniform(rng, m, n, 0.5, 2.0),
                    uniform(rng, m, n, -1.0, 1.0),
                ]
            },
            f: |_, x| probe(x[0].div(x[1])?, x[2]),
        },
        OpCase {
            name: "minimum",
            inputs: pair_inputs,
            f: |_, x| probe(x[0].minimum(x[1])?, x[2]),
        },
        OpCase {
            name: "maximum",
            inputs: pair_inputs,
            f: |_, x| probe(x[0].maximum(x[1])?, x[2]),
        },
        OpCase {
            name: "add_row",
            inputs: |rng| {
                let (m, n) = dims(rng);
                vec![
                    uniform(rng, m, n, -1.0, 1.0),
                    uniform(rng, 1, n, -1.0, 1.0),
                    uniform(rng, m, n, -1.0, 1.0),
                ]
            },
            f: |_, x| probe(x[0].add_row(x[1])?, x[2]),
        },
        OpCase {
            name: "scale",
            inputs: |rng| unary_inputs(-2.0, 2.0)(rng),
            f: |_, x| probe(x[0].scale(-1.7).add_scalar(0.3), x[1]),
        },
        OpCase {
            name: "scale_by",
            inputs: |rng| {
                let (m, n) = dims(rng);
                vec![
                    uniform(rng, m, n, -1.0, 1.0),
                    uniform(rng, 1, 1, -2.0, 2.0),
                    uniform(rng, m, n, -1.0, 1.0),
                ]
            },
            f: |_, x| probe(x[0].scale_by(x[1])?, x[2]),
        },
        OpCase {
            name: "concat_cols",
            inputs: |rng| {
                let m = rng.random_range(1..=4);
                let (a, b) = (rng.random_range(1..=3), rng.random_range(1..=3));
                vec![
                    uniform(rng, m, a, -1.0, 1.0),
                    uniform(rng, m, b, -1.0, 1.0),
                    uniform(rng, m, a + b, -1.0, 1.0),
                ]
            },
            f: |tape, x| probe(tape.concat_cols(&[x[0], x[1]])?, x[2]),
        },
        OpCase {
            name: "slice_cols",
            inputs: |rng| {
                let m = rng.random_range(1..=4);
                vec![uniform(rng, m, 5, -1.0, 1.0), uniform(rng, m, 2, -1.0, 1.0)]
            },
            f: |_, x| probe(x[0].slice_cols(2, 2)?, x[1]),
        },
        OpCase {
            name: "select_rows",
            inputs: |rng| {
                let n = rng.random_range(1..=4);
                vec![uniform(rng, 4, n, -1.0, 1.0), uniform(rng, 3, n, -1.0, 1.0)]
            },
            f: |_, x| probe(x[0].select_rows(&[3, 0, 3])?, x[1]),
        },
        OpCase {
            name: "sigmoid",
            inputs: |rng| unary_inputs(-4.0, 4.0)(rng),
            f: |_, x| probe(x[0].sigmoid(), x[1]),
        },
        OpCase {
            name: "softplus",
            inputs: |rng| unary_inputs(-4.0, 4.0)(rng),
            f: |_, x| probe(x[0].softplus(), x[1]),
        },
        OpCase {
            name: "exp",
            inputs: |rng| unary_inputs(-2.0, 2.0)(rng),
            f: |_, x| probe(x[0].exp(), x[1]),
        },
        OpCase {
            name: "ln",
            inputs: |rng| unary_inputs(0.2, 3.0)(rng),
            f: |_, x| probe(x[0].ln(), x[1]),
        },
        OpCase {
            name: "sum",
            inputs: |rng| unary_inputs(-2.0, 2.0)(rng),
            f: |_, x| Ok(x[0].mul(x[0])?.sum()),
        },
        OpCase {
            name: "mean",
            inputs: |rng| unary_inputs(-2.0, 2.0)(rng),
            f: |_, x| Ok(x[0].mul(x[1])?.exp().mean()),
        },
        OpCase {
            name: "softmax_rows",
            inputs: |rng| unary_inputs(-3.0, 3.0)(rng),
            f: |_, x| probe(x[0].softmax_rows(), x[1]),
        },
        OpCase {
            name: "log_softmax_rows",
            inputs: |rng| unary_inputs(-3.0, 3.0)(rng),
            f: |_, x| probe(x[0].log_softmax_rows(), x[1]),
        },
        OpCase {
            name: "layer_norm_rows",
            inputs: |rng| {
                let m = rng.random_range(1..=4);
                let n = rng.random_range(3..=6);
                vec![uniform(rng, m, n, -2.0, 2.0), uniform(rng, m, n, -1.0, 1.0)]
            },
            f: |_, x| probe(x[0].layer_norm_rows(1e-5), x[1]),
        },
        OpCase {
            name: "normalize_rows",
            inputs: |rng| unary_inputs(0.1, 2.0)(rng),
            f: |_, x| probe(x[0].normalize_rows(1e-12), x[1]),
        },
    ]
}
