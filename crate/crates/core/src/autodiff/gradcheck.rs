//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Result, StamError};

use super::{Tape, Tensor, Var};

/// First step of the stencil. Fourth-order truncation error is O(h^4), so a
/// step this large costs nothing there and keeps roundoff (which grows as
/// 1/h) low.
pub const FD_STEP: f64 = 1e-4;
/// Smaller steps tried, in order, when the stencil at [`FD_STEP`] crosses a
/// ReLU kink.
pub const FALLBACK_STEPS: [f64; 2] = [1e-5, 1e-6];
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked elements of `|a - n| / max(|a|, |n|, 1e-8)`, with
    /// `n` from the fourth-order central stencil.
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum was attained.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Checked elements that needed one of the [`FALLBACK_STEPS`].
    pub refined: usize,
    /// Elements whose stencil switched a ReLU at every step, where finite
    /// differences do not estimate the derivative; left out of
    /// `max_rel_error`.
    pub skipped: usize,
    /// Max relative error at [`FD_STEP`] over every element, kinks included.
    pub max_rel_error_all: f64,
}

fn evaluate<G>(f: &G, inputs: &[Tensor<f64>]) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).len() != 1 {
        return Err(StamError::shape(format!(
            "gradient check needs a scalar output, got shape {:?}",
            tape.shape(root)
        )));
    }
    Ok((tape, vars, root))
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the tape's gradients of the scalar `f(inputs)` against the
/// fourth-order central difference
/// `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, `h = FD_STEP`.
///
/// Where any stencil point switches some ReLU relative to `f(x)` the
/// stencil straddles a kink, and the element is retried with the
/// [`FALLBACK_STEPS`]. Elements that straddle at every step are counted in
/// `skipped` and only enter `max_rel_error_all`. Smooth computations never
/// retry or skip.
pub fn gradient_check<G>(f: G, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, vars, root) = evaluate(&f, inputs)?;
    let pattern = tape.activation_pattern();
    let grads = tape.backward(root);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        refined: 0,
        skipped: 0,
        max_rel_error_all: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(StamError::NonFiniteGradient(i));
        }
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            let mut at = |offset: f64| -> Result<(f64, u64)> {
                probe[i].data_mut()[e] = orig + offset;
                let r = scalar(&f, &probe);
                probe[i].data_mut()[e] = orig;
                r
            };
            let mut stencil = |h: f64| -> Result<(f64, bool)> {
                let (plus1, p1) = at(h)?;
                let (minus1, p2) = at(-h)?;
                let (plus2, p3) = at(2.0 * h)?;
                let (minus2, p4) = at(-2.0 * h)?;
                let numeric = (8.0 * (plus1 - minus1) - (plus2 - minus2)) / (12.0 * h);
                if !numeric.is_finite() {
                    return Err(StamError::NonFiniteGradient(i));
                }
                Ok((numeric, [p1, p2, p3, p4].iter().all(|&p| p == pattern)))
            };
            let a = analytic[e];
            let (mut numeric, mut smooth) = stencil(FD_STEP)?;
            report.max_rel_error_all = report.max_rel_error_all.max(rel_error(a, numeric));
            for h in FALLBACK_STEPS {
                if smooth {
                    break;
                }
                (numeric, smooth) = stencil(h)?;
                report.refined += usize::from(smooth);
            }
            if !smooth {
                report.skipped += 1;
                continue;
            }
            let rel = rel_error(a, numeric);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn scalar<G>(f: &G, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (tape, _, root) = evaluate(f, inputs)?;
    Ok((tape.value(root)[0], tape.activation_pattern()))
}
