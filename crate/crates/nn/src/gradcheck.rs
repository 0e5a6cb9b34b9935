//! Central finite-difference gradient checking in double precision.

use crate::params::ParamSet;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many entries, evenly strided over the vector.
    pub max_entries: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-6,
            floor: 1e-6,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along flat parameter `i`.
pub fn numeric_partial<F>(params: &ParamSet<f64>, i: usize, step: f64, f: &F) -> f64
where
    F: Fn(&ParamSet<f64>) -> f64,
{
    let mut p = params.clone();
    let v = p.flat_get(i);
    p.flat_set(i, v + step);
    let up = f(&p);
    p.flat_set(i, v - step);
    let down = f(&p);
    (up - down) / (2.0 * step)
}

/// Compare `analytic` against central differences of `loss` at `params`.
pub fn check_gradient<F>(params: &ParamSet<f64>, analytic: &ParamSet<f64>, loss: F, cfg: GradCheck) -> GradCheckReport
where
    F: Fn(&ParamSet<f64>) -> f64,
{
    let n = params.numel();
    assert_eq!(n, analytic.numel(), "gradient layout mismatch");
    let stride = match cfg.max_entries {
        Some(m) if m > 0 && m < n => n.div_ceil(m),
        _ => 1,
    };
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in (0..n).step_by(stride) {
        let numeric = numeric_partial(params, i, cfg.step, &loss);
        let a = analytic.flat_get(i);
        let err = relative_error(a, numeric, cfg.floor);
        report.checked += 1;
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}
