//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Every differentiable computation is recorded on a [`Tape`] as it runs. The
//! tape is an append-only list of nodes, so parents always precede children
//! and [`Tape::backward`] is a single reverse sweep. A tape is owned by one
//! thread; independent tapes can run concurrently.

mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use kernels::{dot, norm, sigmoid};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("target index {target} out of range for {n} logits")]
    TargetOutOfRange { target: usize, n: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: nothing to reduce over")]
    EmptyReduction { op: &'static str },
    #[error("complex split needs an even dimension, got {dim}")]
    OddDimension { dim: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("function evaluation failed: {0}")]
    Evaluation(String),
}

/// Cosine similarity of two equal-length vectors as a scalar node.
pub fn cosine_similarity<T: Real>(
    tape: &mut Tape<T>,
    a: Var,
    b: Var,
) -> Result<Var, NumericsError> {
    if tape.shape(a).len() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "cosine_similarity",
            detail: format!("expected 1-D inputs, got {:?}", tape.shape(a)),
        });
    }
    tape.cosine_rows(a, b)
}

/// `-log softmax(logits)[target]`, evaluated with log-sum-exp.
pub fn softmax_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    target: usize,
) -> Result<Var, NumericsError> {
    let n = tape.value(logits).numel();
    if n == 0 || target >= n {
        return Err(NumericsError::TargetOutOfRange { target, n });
    }
    tape.cross_entropy_rows(logits, &[target], None)
}

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input, element)` where `max_rel_error` occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub passed: bool,
}

/// Absolute disagreement at or below this is accepted regardless of the
/// relative error, so near-zero gradients do not fail on truncation noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Checks the reverse-mode gradient of a scalar function against
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every element of every input.
///
/// The relative error of an element is `|a - n| / max(|a|, |n|)`, taken as
/// zero when `|a - n| <= GRAD_CHECK_FLOOR`.
pub fn grad_check<F, E>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: std::fmt::Display,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars).map_err(|e| NumericsError::Evaluation(e.to_string()))?;
        if tape.value(out).numel() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "grad_check",
                detail: format!("function returned shape {:?}", tape.shape(out)),
            });
        }
        if !tape.value(out).item().is_finite() {
            return Err(NumericsError::NonFinite {
                what: "grad_check function output",
            });
        }
        Ok((tape, out, vars))
    };

    let (tape, out, vars) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| grads.get_or_zeros(v, x.numel()))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    let mut worst = (0, 0);
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[i].numel());
        for (j, &ana) in analytic[i].iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (t, o, _) = eval(&probe)?;
            let plus = t.value(o).item();
            probe[i].data_mut()[j] = orig - eps;
            let (t, o, _) = eval(&probe)?;
            let minus = t.value(o).item();
            probe[i].data_mut()[j] = orig;

            let num = (plus - minus) / (2.0 * eps);
            let abs = (ana - num).abs();
            max_abs_error = max_abs_error.max(abs);
            let rel = if abs <= GRAD_CHECK_FLOOR {
                0.0
            } else {
                abs / ana.abs().max(num.abs())
            };
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (i, j);
            }
            col.push(num);
        }
        numeric.push(col);
    }
    Ok(GradCheckReport {
        max_rel_error,
        max_abs_error,
        worst,
        analytic,
        numeric,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
pub(crate) mod tests;
