//! Two-sample Kolmogorov-Smirnov machinery for distribution audits.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid_argument, Result};
use crate::math::{ln, sqrt};

/// Supremum distance between the empirical CDFs of two samples.
///
/// Both samples are sorted and walked jointly; at every distinct value all
/// ties on both sides are consumed before the CDF gap is measured, so tied
/// observations are handled exactly.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid_argument(
            "ks statistic",
            format!("need non-empty samples, got {} and {}", a.len(), b.len()),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid_argument("ks statistic", "samples must be finite"));
    }
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_unstable_by(f64::total_cmp);
    ys.sort_unstable_by(f64::total_cmp);
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() || j < ys.len() {
        let x = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < xs.len() && xs[i] == x {
            i += 1;
        }
        while j < ys.len() && ys[j] == x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// Rejection threshold for the two-sample test at significance `alpha`
/// (asymptotic form): `c(alpha) * sqrt((n+m)/(n*m))` with
/// `c(alpha) = sqrt(-ln(alpha/2)/2)`.
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> Result<f64> {
    if n == 0 || m == 0 {
        return Err(invalid_argument(
            "ks critical",
            "sample sizes must be positive",
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid_argument(
            "ks critical",
            format!("alpha {alpha} outside (0,1)"),
        ));
    }
    let c = sqrt(-ln(alpha / 2.0) / 2.0);
    Ok(c * sqrt((n + m) as f64 / (n * m) as f64))
}
