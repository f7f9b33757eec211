//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// Up to `per_tensor` distinct coordinates per input, chosen from `seed`.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates where even the smallest step straddled a kink.
    pub kinks: usize,
}

/// Successive step divisors tried when one-sided differences disagree.
const STEP_DIVISORS: [f64; 3] = [1.0, 10.0, 100.0];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, points: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| if track { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::ShapeMismatch {
            context: "gradient check output".into(),
            expected: vec![1],
            actual: tape.value(out).shape().to_vec(),
        });
    }
    Ok((tape, vars, out))
}

/// Max relative error between the tape gradient of scalar `f` at `point` and
/// central differences with the given step, over every coordinate.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = check_gradients(
        |tape: &mut Tape, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(point),
        step,
        Coordinates::All,
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input variant of [`finite_difference_check`] with coordinate sampling.
pub fn check_gradients<F>(f: F, points: &[Tensor], step: f64, coords: Coordinates) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
    }
    let (tape, vars, out) = eval_scalar(&f, points, true)?;
    let grads = tape.backward_scalar(out)?;

    let (t, _, o) = eval_scalar(&f, points, false)?;
    let center = t.value(o).data()[0];
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    for (input, var) in vars.iter().enumerate() {
        if let Some(g) = grads.get(*var) {
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("analytic gradient of input {input} coordinate {index}"),
                });
            }
        }
    }
    for (input, point) in points.iter().enumerate() {
        let analytic = grads.get(vars[input]);
        let indices: Vec<usize> = match coords {
            Coordinates::All => (0..point.numel()).collect(),
            Coordinates::Sample { per_tensor, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (input as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, point.numel(), per_tensor.min(point.numel())).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for index in indices {
            let a = analytic.map_or(0.0, |g| g.data()[index]);
            let mut probe = points.to_vec();
            let x0 = point.data()[index];
            let mut numeric = f64::NAN;
            let mut smooth = false;
            for div in STEP_DIVISORS {
                let h = step / div;
                probe[input].data_mut()[index] = x0 + h;
                let (t, _, o) = eval_scalar(&f, &probe, false)?;
                let plus = t.value(o).data()[0];
                probe[input].data_mut()[index] = x0 - h;
                let (t, _, o) = eval_scalar(&f, &probe, false)?;
                let minus = t.value(o).data()[0];
                numeric = (plus - minus) / (2.0 * h);
                if !numeric.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("finite difference of input {input} coordinate {index}"),
                    });
                }
                // A kink inside [x - h, x + h] shows up as disagreeing
                // one-sided slopes; retry with a smaller step.
                let (fwd, bwd) = ((plus - center) / h, (center - minus) / h);
                let roundoff = 1e3 * f64::EPSILON * center.abs().max(1.0) / h;
                if (fwd - bwd).abs() <= 1e-4 * fwd.abs().max(bwd.abs()) + roundoff {
                    smooth = true;
                    break;
                }
            }
            if !smooth {
                report.kinks += 1;
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Coordinate {
                    input,
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
