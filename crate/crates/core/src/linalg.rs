//! Small dense least-squares helpers shared by the diagnostic and baseline regressions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ordinary least-squares fit.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
}

/// Regress `y` on the given named columns, optionally prepending a constant.
/// Columns that are constant (or, with a constant, collinear with it) are rejected by name.
pub fn ols(y: &[f64], columns: &[(&str, &[f64])], with_constant: bool) -> Result<OlsFit> {
    let n = y.len();
    let k = columns.len() + usize::from(with_constant);
    if n < k || k == 0 {
        return Err(Error::Domain(format!("regression needs at least {k} observations, got {n}")));
    }
    for (name, col) in columns {
        if col.len() != n {
            return Err(Error::Domain(format!("column `{name}` has {} rows, expected {n}", col.len())));
        }
        let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if with_constant && hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE) {
            return Err(Error::DegenerateDesign { column: name.to_string() });
        }
    }
    let x = DMatrix::from_fn(n, k, |i, j| match (with_constant, j) {
        (true, 0) => 1.0,
        (true, j) => columns[j - 1].1[i],
        (false, j) => columns[j].1[i],
    });
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax().max(f64::MIN_POSITIVE);
    if let Some(j) = (0..k).find(|&j| r[(j, j)].abs() <= 1e-12 * scale) {
        let name = match (with_constant, j) {
            (true, 0) => "constant",
            (true, j) => columns[j - 1].0,
            (false, j) => columns[j].0,
        };
        return Err(Error::DegenerateDesign { column: name.to_string() });
    }
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Domain("singular regression design".into()))?;
    let fitted = &x * &beta;
    let residuals = &yv - &fitted;
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        residuals: residuals.iter().copied().collect(),
        fitted: fitted.iter().copied().collect(),
    })
}

/// Pearson correlation; `NaN` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return f64::NAN;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation sample quantile ignoring NaNs; `NaN` for an empty input.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Mean ignoring NaNs; `NaN` if nothing remains.
pub fn mean(values: &[f64]) -> f64 {
    let (s, n) = values.iter().filter(|x| !x.is_nan()).fold((0.0, 0usize), |(s, n), &x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
