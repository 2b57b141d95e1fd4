use crate::scalar::Scalar;

use super::{forward, Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` where
    /// `floor = 1e-6 * max(1, |f(point)|)` absorbs the rounding noise of the
    /// difference quotient on components whose true derivative is near zero.
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst component.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

const REL_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<S, F>(f: &F, point: &[Tensor<S>]) -> f64
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).sum().to_f64_lossy()
}

/// Checks every component of every input.
///
/// `f` must produce a scalar (or is summed to one). Never errors: a failed
/// forward pass shows up as an infinite error in the report.
pub fn finite_diff_check<S, F>(f: F, point: &[Tensor<S>], step: f64, tolerance: f64) -> GradCheckReport
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Var,
{
    let components: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    finite_diff_check_at(f, point, &components, step, tolerance)
}

/// Checks only the listed `(input, flat index)` components.
pub fn finite_diff_check_at<S, F>(
    f: F,
    point: &[Tensor<S>],
    components: &[(usize, usize)],
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Var,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = match forward(point, |tape, vars| {
        let out = f(tape, vars);
        if tape.value(out).numel() == 1 {
            out
        } else {
            tape.sum(out)
        }
    })
    .and_then(|rec| {
        let grads = rec.backward_scalar()?;
        Ok(rec.input_gradients(&grads))
    }) {
        Ok(g) => g,
        Err(_) => {
            return GradCheckReport {
                max_rel_error: f64::INFINITY,
                worst: None,
                checked: 0,
                passed: false,
            }
        }
    };

    let floor = REL_FLOOR * eval_scalar(&f, point).abs().max(1.0);
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut probe: Vec<Tensor<S>> = point.to_vec();
    for &(i, j) in components {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + S::lit(step);
        let plus = eval_scalar(&f, &probe);
        probe[i].data_mut()[j] = orig - S::lit(step);
        let minus = eval_scalar(&f, &probe);
        probe[i].data_mut()[j] = orig;
        // Use the realised step so rounding of `orig ± step` does not bias the quotient.
        let span = ((orig + S::lit(step)) - (orig - S::lit(step))).to_f64_lossy();
        let numeric = (plus - minus) / span;
        let err = rel_error(analytic[i].data()[j].to_f64_lossy(), numeric, floor);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > max_rel_error || worst.is_none() {
            max_rel_error = err;
            worst = Some((i, j));
        }
    }
    GradCheckReport {
        max_rel_error,
        worst,
        checked: components.len(),
        passed: max_rel_error <= tolerance,
    }
}
