//! Quadratic surrogate of the matching function and the elasticities it implies.
//!
//! m̂(x, y) = β₁x + β₂xy + β₃y + β₄x² + β₅y² with x = A·U and y = V, fitted by LASSO on
//! RMS-standardized regressors without an intercept.

pub mod lasso;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{MarketPanel, ScaleRecord};
use crate::error::{Error, Result};
use crate::estimator::EfficiencySeries;
use lasso::{cross_validate, fit_path_to, kkt_violation, Gram};

pub const TERM_NAMES: [&str; 5] = ["AU", "AU*V", "V", "AU^2", "V^2"];

/// How the penalty weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    CrossValidated,
    Fixed(f64),
}

impl std::str::FromStr for LambdaChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("cv") {
            return Ok(LambdaChoice::CrossValidated);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(LambdaChoice::Fixed(v)),
            _ => Err(Error::Validation(format!("lambda must be `cv` or a nonnegative number, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoConfig {
    pub folds: usize,
    pub n_lambdas: usize,
    /// Smallest grid penalty as a fraction of the largest.
    pub lambda_ratio: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig { folds: 5, n_lambdas: 50, lambda_ratio: 1e-7, seed: 0, tolerance: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    /// In-sample R²; absent when undefined (no variation in hires or not fitted).
    pub r2: Option<f64>,
    pub nonzero: usize,
    pub kkt_residual: f64,
    pub n: usize,
}

/// The five surrogate coefficients in the units of the data they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCoefficients {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub beta5: f64,
    /// Penalty on the standardized problem.
    pub lambda: f64,
    pub lambda_source: String,
    pub fit_stats: FitStats,
    /// Scaling of the data the surrogate was fitted on, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<ScaleRecord>,
}

impl SurrogateCoefficients {
    pub fn from_betas(b: [f64; 5]) -> Self {
        SurrogateCoefficients {
            beta1: b[0],
            beta2: b[1],
            beta3: b[2],
            beta4: b[3],
            beta5: b[4],
            lambda: 0.0,
            lambda_source: "fixed".into(),
            fit_stats: FitStats { r2: None, nonzero: b.iter().filter(|v| **v != 0.0).count(), kkt_residual: 0.0, n: 0 },
            scale: None,
        }
    }

    pub fn betas(&self) -> [f64; 5] {
        [self.beta1, self.beta2, self.beta3, self.beta4, self.beta5]
    }

    /// m̂(x, y) with x = A·U, y = V.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.beta1 * x + self.beta2 * x * y + self.beta3 * y + self.beta4 * x * x + self.beta5 * y * y
    }

    /// ∂m̂/∂x.
    pub fn d_dx(&self, x: f64, y: f64) -> f64 {
        self.beta1 + self.beta2 * y + 2.0 * self.beta4 * x
    }

    /// ∂m̂/∂y.
    pub fn d_dy(&self, x: f64, y: f64) -> f64 {
        self.beta2 * x + self.beta3 + 2.0 * self.beta5 * y
    }
}

fn regressors(x: f64, y: f64) -> [f64; 5] {
    [x, x * y, y, x * x, y * y]
}

/// Fit the surrogate to hires given efficiency-weighted unemployment `x` and vacancies `y`.
pub fn fit_surrogate_xy(
    h: &[f64],
    x: &[f64],
    y: &[f64],
    choice: LambdaChoice,
    cfg: &LassoConfig,
) -> Result<SurrogateCoefficients> {
    let n = h.len();
    if x.len() != n || y.len() != n || n < cfg.folds.max(5) {
        return Err(Error::Domain(format!("surrogate fit needs aligned inputs with at least 5 rows, got {n}")));
    }
    let rows: Vec<[f64; 5]> = x.iter().zip(y).map(|(&x, &y)| regressors(x, y)).collect();
    let mut scales = [0.0; 5];
    for j in 0..5 {
        let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        if !(hi - lo > 1e-12 * hi.abs().max(lo.abs())) {
            return Err(Error::DegenerateDesign { column: TERM_NAMES[j].to_string() });
        }
        scales[j] = (rows.iter().map(|r| r[j] * r[j]).sum::<f64>() / n as f64).sqrt();
    }
    let xs = DMatrix::from_fn(n, 5, |i, j| rows[i][j] / scales[j]);
    let yv = DVector::from_column_slice(h);
    let gram = Gram::from_rows(&xs, &yv);

    let (lambda, source) = match choice {
        LambdaChoice::Fixed(l) => (l, "fixed"),
        LambdaChoice::CrossValidated => {
            let cv = cross_validate(&xs, &yv, cfg.folds, cfg.n_lambdas, cfg.lambda_ratio, cfg.seed, cfg.tolerance);
            (cv.best_lambda, "cv")
        }
    };
    let beta_std = fit_path_to(&gram, lambda, cfg.n_lambdas, cfg.tolerance);
    let kkt = kkt_violation(&gram, &beta_std, lambda);
    if kkt > cfg.tolerance {
        log::warn!("surrogate fit KKT residual {kkt:e} exceeds tolerance {:e}", cfg.tolerance);
    }

    let b: Vec<f64> = (0..5).map(|j| beta_std[j] / scales[j]).collect();
    let mut coeffs = SurrogateCoefficients::from_betas([b[0], b[1], b[2], b[3], b[4]]);
    let mean_h = h.iter().sum::<f64>() / n as f64;
    let sst: f64 = h.iter().map(|v| (v - mean_h).powi(2)).sum();
    let sse: f64 = (0..n).map(|i| (h[i] - coeffs.value(x[i], y[i])).powi(2)).sum();
    coeffs.lambda = lambda;
    coeffs.lambda_source = source.into();
    coeffs.fit_stats = FitStats {
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        nonzero: beta_std.iter().filter(|v| **v != 0.0).count(),
        kkt_residual: kkt,
        n,
    };
    Ok(coeffs)
}

/// Fit the surrogate on a panel with its recovered efficiency series.
pub fn fit_surrogate(
    panel: &MarketPanel,
    efficiency: &EfficiencySeries,
    choice: LambdaChoice,
    cfg: &LassoConfig,
) -> Result<SurrogateCoefficients> {
    efficiency.check_alignment(panel)?;
    let x: Vec<f64> = panel.observations().iter().zip(&efficiency.entries).map(|(o, e)| e.a * o.unemployed).collect();
    let mut coeffs = fit_surrogate_xy(&panel.hires(), &x, &panel.vacancies(), choice, cfg)?;
    coeffs.scale = Some(panel.scale());
    Ok(coeffs)
}

/// Denominator used to turn ∂m̂/∂(AU) into an unemployment elasticity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EtaDenominator {
    /// η_U = ∂m̂/∂(AU) · AU / H.
    #[default]
    EfficiencyUnits,
    /// η_U = ∂m̂/∂(AU) · U / H.
    Unemployment,
}

impl std::str::FromStr for EtaDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "au" | "AU" | "au_over_h" => Ok(EtaDenominator::EfficiencyUnits),
            "u" | "U" | "u_over_h" => Ok(EtaDenominator::Unemployment),
            _ => Err(Error::Validation(format!("eta denominator must be `au` or `u`, got `{s}`"))),
        }
    }
}

/// A point (A, U, V, H) at which elasticities are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub a: f64,
    pub u: f64,
    pub v: f64,
    pub h: f64,
}

fn check_h(h: f64) -> Result<()> {
    if h > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("elasticity requires positive hires, got {h}")))
    }
}

pub fn elasticity_u(coeffs: &SurrogateCoefficients, p: Point, denom: EtaDenominator) -> Result<f64> {
    check_h(p.h)?;
    let x = p.a * p.u;
    let weight = match denom {
        EtaDenominator::EfficiencyUnits => x,
        EtaDenominator::Unemployment => p.u,
    };
    Ok(coeffs.d_dx(x, p.v) * weight / p.h)
}

pub fn elasticity_v(coeffs: &SurrogateCoefficients, p: Point) -> Result<f64> {
    check_h(p.h)?;
    Ok(coeffs.d_dy(p.a * p.u, p.v) * p.v / p.h)
}

/// ∂m̂(A·u, v)/∂u = A·(β₁ + β₂v + 2β₄·A·u).
pub fn marginal_hires_du(coeffs: &SurrogateCoefficients, a: f64, u: f64, v: f64) -> f64 {
    a * coeffs.d_dx(a * u, v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElasticityPoint {
    pub market_id: String,
    pub period: i64,
    #[serde(rename = "eta_U")]
    pub eta_u: f64,
    #[serde(rename = "eta_V")]
    pub eta_v: f64,
}

pub fn elasticity_series(
    panel: &MarketPanel,
    efficiency: &EfficiencySeries,
    coeffs: &SurrogateCoefficients,
    denom: EtaDenominator,
) -> Result<Vec<ElasticityPoint>> {
    efficiency.check_alignment(panel)?;
    panel
        .observations()
        .iter()
        .zip(&efficiency.entries)
        .map(|(o, e)| {
            let p = Point { a: e.a, u: o.unemployed, v: o.vacancies, h: o.hires };
            Ok(ElasticityPoint {
                market_id: o.market_id.clone(),
                period: o.period,
                eta_u: elasticity_u(coeffs, p, denom)?,
                eta_v: elasticity_v(coeffs, p)?,
            })
        })
        .collect()
}

pub fn write_elasticities_csv<W: Write>(points: &[ElasticityPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["market_id", "period", "eta_U", "eta_V"])?;
    for p in points {
        w.write_record([p.market_id.clone(), p.period.to_string(), p.eta_u.to_string(), p.eta_v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn quadratic_data(b: [f64; 5]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..12 {
            for j in 0..12 {
                x.push(0.5 + 0.12 * i as f64);
                y.push(0.5 + 0.13 * j as f64);
            }
        }
        let c = SurrogateCoefficients::from_betas(b);
        let h = x.iter().zip(&y).map(|(&x, &y)| c.value(x, y)).collect();
        (h, x, y)
    }

    #[test]
    fn unpenalized_recovers_quadratic() {
        let truth = [0.8, -0.3, 0.6, -0.2, 0.1];
        let (h, x, y) = quadratic_data(truth);
        let fit = fit_surrogate_xy(&h, &x, &y, LambdaChoice::Fixed(0.0), &LassoConfig::default()).unwrap();
        for (b, t) in fit.betas().iter().zip(truth) {
            assert!((b - t).abs() < 1e-6, "{b} vs {t}");
        }
        assert!(fit.fit_stats.r2.unwrap() > 1.0 - 1e-12);
    }

    #[test]
    fn huge_penalty_zeroes_everything() {
        let (h, x, y) = quadratic_data([0.8, -0.3, 0.6, -0.2, 0.1]);
        let fit = fit_surrogate_xy(&h, &x, &y, LambdaChoice::Fixed(1e9), &LassoConfig::default()).unwrap();
        assert_eq!(fit.betas(), [0.0; 5]);
    }

    #[test]
    fn constant_column_is_named() {
        let x = vec![1.0; 20];
        let y: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.01).collect();
        let h = y.clone();
        match fit_surrogate_xy(&h, &x, &y, LambdaChoice::Fixed(0.0), &LassoConfig::default()) {
            Err(Error::DegenerateDesign { column }) => assert_eq!(column, "AU"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn linear_surrogate_elasticity() {
        let c = SurrogateCoefficients::from_betas([1.0, 0.0, 0.0, 0.0, 0.0]);
        let p = Point { a: 1.2, u: 2.0, v: 3.0, h: 4.0 };
        assert_relative_eq!(elasticity_u(&c, p, EtaDenominator::EfficiencyUnits).unwrap(), 2.4 / 4.0);
        assert_relative_eq!(elasticity_u(&c, p, EtaDenominator::Unemployment).unwrap(), 2.0 / 4.0);
        assert_eq!(marginal_hires_du(&c, 1.7, 0.3, 0.9), 1.7);
        assert!(matches!(elasticity_v(&c, Point { h: 0.0, ..p }), Err(Error::Domain(_))));
    }

    #[test]
    fn marginal_decreasing_iff_concave() {
        let concave = SurrogateCoefficients::from_betas([1.0, 0.1, 0.5, -0.2, 0.0]);
        let convex = SurrogateCoefficients::from_betas([1.0, 0.1, 0.5, 0.2, 0.0]);
        assert!(marginal_hires_du(&concave, 1.0, 2.0, 1.0) < marginal_hires_du(&concave, 1.0, 1.0, 1.0));
        assert!(marginal_hires_du(&convex, 1.0, 2.0, 1.0) > marginal_hires_du(&convex, 1.0, 1.0, 1.0));
    }

    proptest! {
        #[test]
        fn analytic_derivatives_match_finite_differences(
            b in prop::array::uniform5(-2.0f64..2.0),
            a in 0.5f64..2.0, u in 0.5f64..2.0, v in 0.5f64..2.0,
        ) {
            let c = SurrogateCoefficients::from_betas(b);
            let eps = 1e-5;
            let m = |u: f64, v: f64| c.value(a * u, v);
            let fd_u = (m(u + eps, v) - m(u - eps, v)) / (2.0 * eps);
            let fd_v = (m(u, v + eps) - m(u, v - eps)) / (2.0 * eps);
            let du = marginal_hires_du(&c, a, u, v);
            let dv = c.d_dy(a * u, v);
            let scale = 1.0 + b.iter().map(|x| x.abs()).sum::<f64>() * 4.0;
            prop_assert!((fd_u - du).abs() <= 1e-8 * scale.max(du.abs()));
            prop_assert!((fd_v - dv).abs() <= 1e-6 * scale.max(dv.abs()));
        }
    }
}
