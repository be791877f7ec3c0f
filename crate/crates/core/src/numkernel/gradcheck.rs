//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::numkernel::{Param, Tensor};
use crate::scalar::Scalar;

/// One evaluation of a scalar objective.
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub loss: T,
    /// Analytic gradient per parameter; may be empty when not requested.
    pub grads: Vec<Tensor<T>>,
    /// Every discrete decision taken (top-k picks, argmaxes). Two points with
    /// equal fingerprints lie on the same smooth piece of the objective.
    pub fingerprint: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error; gradients smaller than this
    /// are effectively compared in absolute terms.
    pub abs_floor: f64,
    /// Check at most this many coordinates per parameter (evenly strided).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-5,
            abs_floor: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates whose perturbation changed a discrete decision.
    pub skipped: Vec<Coordinate>,
    /// Coordinates above tolerance with their relative error.
    pub failures: Vec<(Coordinate, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f(params, need_grads)` must be deterministic. Coordinates whose `±epsilon`
/// perturbation changes the fingerprint are skipped and reported.
pub fn finite_diff_check<T, F>(
    params: &mut [Param<T>],
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&[Param<T>], bool) -> Result<Evaluation<T>>,
{
    if !(1e-7..=1e-4).contains(&opts.epsilon) {
        return Err(Error::Config(format!(
            "epsilon {} outside [1e-7, 1e-4]",
            opts.epsilon
        )));
    }
    let base = f(params, true)?;
    if !base.loss.is_finite() {
        return Err(Error::Numeric("non-finite loss at the check point".into()));
    }
    if base.grads.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            base.grads.len(),
            params.len()
        )));
    }
    let eps = T::lit(opts.epsilon);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        failures: Vec::new(),
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for idx in (0..n).step_by(stride) {
            let coord = Coordinate {
                param: params[pi].name.clone(),
                index: idx,
            };
            let orig = params[pi].value.data()[idx];
            params[pi].value.data_mut()[idx] = orig + eps;
            let plus = f(params, false);
            params[pi].value.data_mut()[idx] = orig - eps;
            let minus = f(params, false);
            params[pi].value.data_mut()[idx] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss perturbing {}[{}]",
                    coord.param, coord.index
                )));
            }
            if plus.fingerprint != base.fingerprint || minus.fingerprint != base.fingerprint {
                report.skipped.push(coord);
                continue;
            }
            let numeric = ((plus.loss - minus.loss) / (eps + eps)).as_f64();
            let analytic = base.grads[pi].data()[idx].as_f64();
            let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(coord.clone());
            }
            // a zero tolerance admits nothing, not even exact agreement
            if opts.tolerance <= 0.0 || rel > opts.tolerance {
                report.failures.push((coord, rel));
            }
        }
    }
    Ok(report)
}
