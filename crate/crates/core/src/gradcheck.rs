//! Central finite differences and analytic-vs-numeric comparison.

use crate::tensor::Tensor;

/// Central differences `(f(x + h·e) - f(x - h·e)) / 2h` for every entry of `x`.
pub fn finite_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Pass criteria for one entry: relative error at most `rel`, except where the
/// analytic magnitude is below `small`, in which case the absolute error must
/// be at most `abs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub small: f64,
}

impl Tolerance {
    /// rel ≤ 1e-4, or abs ≤ 1e-7 where |analytic| < 1e-4.
    pub const STANDARD: Tolerance = Tolerance {
        rel: 1e-4,
        abs: 1e-7,
        small: 1e-4,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    pub passed: bool,
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error among entries judged by the relative rule.
    pub max_rel: f64,
    /// Largest absolute error among entries judged by the absolute rule.
    pub max_abs: f64,
}

impl CheckReport {
    pub fn empty() -> Self {
        Self {
            passed: true,
            checked: 0,
            failures: 0,
            max_rel: 0.0,
            max_abs: 0.0,
        }
    }

    pub fn merge(self, other: CheckReport) -> CheckReport {
        CheckReport {
            passed: self.passed && other.passed,
            checked: self.checked + other.checked,
            failures: self.failures + other.failures,
            max_rel: self.max_rel.max(other.max_rel),
            max_abs: self.max_abs.max(other.max_abs),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

pub fn compare(analytic: &Tensor, numeric: &Tensor, tol: Tolerance) -> CheckReport {
    assert_eq!(analytic.shape(), numeric.shape());
    compare_where(analytic, numeric, tol, |_| true)
}

/// Like [`compare`] but only entries for which `include(index)` holds are
/// checked (used to skip points near a ReLU kink).
pub fn compare_where(
    analytic: &Tensor,
    numeric: &Tensor,
    tol: Tolerance,
    include: impl Fn(usize) -> bool,
) -> CheckReport {
    let mut report = CheckReport::empty();
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        if !include(i) {
            continue;
        }
        report.checked += 1;
        let ok = if a.abs() < tol.small {
            let e = (a - n).abs();
            report.max_abs = report.max_abs.max(e);
            e <= tol.abs
        } else {
            let e = relative_error(a, n);
            report.max_rel = report.max_rel.max(e);
            e <= tol.rel
        };
        if !ok || !a.is_finite() || !n.is_finite() {
            report.failures += 1;
            report.passed = false;
        }
    }
    report
}
