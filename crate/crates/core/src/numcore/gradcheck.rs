//! Central finite-difference gradient checker.
//!
//! The function under test maps a set of input tensors to an output tensor of
//! any shape; the checker contracts the output with fixed pseudo-random weights
//! into a scalar and compares the tape gradient of that scalar against
//! `(L(x+ε) - L(x-ε)) / 2ε` for every element of every differentiable input.
//!
//! Checks run in `f64`: the kernels are generic, so the same code paths that
//! train in `f32` are exercised, while 64-bit evaluation keeps rounding noise
//! far below the tolerance. Stencils whose ±ε evaluations take a different
//! discrete branch (a ReLU flipping sign, a sample crossing a pixel edge) are
//! not differentiable there and are counted in `skipped_nonsmooth`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::DiffTensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const MAX_CHECK_ELEMENTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    /// Flat index over the concatenation of all differentiable inputs.
    pub worst_index: usize,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Seed for the output contraction weights.
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison (fault injection).
    pub grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            seed: 0x5eed,
            grad_scale: 1.0,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Builds the graph for `inputs` and returns the output to be checked.
pub trait CheckFn: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> CheckFn for F {}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate(f: &impl CheckFn, inputs: &[DiffTensor<f64>], weights: &mut Option<Vec<f64>>, seed: u64) -> Result<(Tape<f64>, Vec<Var>, Var, Eval)> {
    let mut tape = Tape::<f64>::new();
    tape.track_branches();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let w = weights.get_or_insert_with(|| {
        if n == 1 {
            vec![1.0]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        }
    });
    if w.len() != n {
        return Err(Error::dim("grad_check", "output size changed under perturbation"));
    }
    let loss_var = tape.dot_const(out, w)?;
    let loss = tape.data(loss_var)[0];
    let signature = tape.branch_signature().unwrap_or(0);
    Ok((tape, vars, loss_var, Eval { loss, signature }))
}

/// Checks every element of every input marked `requires_grad`.
pub fn check_gradients(
    op_name: &str,
    inputs: &[DiffTensor<f64>],
    f: impl CheckFn,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let total: usize = inputs.iter().filter(|t| t.requires_grad).map(|t| t.len()).sum();
    if total > MAX_CHECK_ELEMENTS {
        return Err(Error::Invalid(format!(
            "{op_name}: {total} differentiable elements exceeds the {MAX_CHECK_ELEMENTS} limit"
        )));
    }
    let mut weights = None;
    let (tape, vars, loss_var, base) = evaluate(&f, inputs, &mut weights, opts.seed)?;
    let grads = tape.backward(loss_var)?;
    drop(tape);

    let mut report = GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        skipped_nonsmooth: 0,
    };
    let mut flat = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; input.len()],
        };
        for j in 0..input.len() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + opts.eps;
            let plus = evaluate(&f, &probe, &mut weights, opts.seed)?.3;
            probe[i].data_mut()[j] = x0 - opts.eps;
            let minus = evaluate(&f, &probe, &mut weights, opts.seed)?.3;
            probe[i].data_mut()[j] = x0;
            if plus.signature != base.signature || minus.signature != base.signature {
                report.skipped_nonsmooth += 1;
            } else {
                let numeric = (plus.loss - minus.loss) / (2.0 * opts.eps);
                let err = rel_error(analytic[j] * opts.grad_scale, numeric);
                if report.checked == 0 || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_index = flat + j;
                }
                report.checked += 1;
            }
        }
        flat += input.len();
    }
    Ok(report)
}

/// Standard-normal tensor for test instances.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> DiffTensor<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    DiffTensor::new(shape, data).expect("shape matches data").with_grad()
}
