//! Conditional-independence residual check and descriptive market ratios.

use std::io::Write;

use serde::Serialize;

use crate::data::MarketPanel;
use crate::error::Result;
use crate::estimator::EfficiencySeries;
use crate::linalg::{ols, pearson};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualPair {
    pub market_id: String,
    pub period: i64,
    /// Residual of vacancies on unemployment.
    pub resid_v: f64,
    /// Residual of efficiency on unemployment.
    pub resid_a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualCheck {
    /// Pearson correlation of the two residual series; NaN when either is degenerate.
    pub correlation: f64,
    pub n: usize,
    pub with_constant: bool,
    pub pairs: Vec<ResidualPair>,
}

impl ResidualCheck {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "correlation": if self.correlation.is_nan() { None } else { Some(self.correlation) },
            "degenerate": self.correlation.is_nan(),
            "n": self.n,
            "with_constant": self.with_constant,
        })
    }
}

/// Regress V on U and A on U and correlate the residuals. If efficiency were correlated with
/// vacancies given unemployment, the identifying independence assumption would be suspect.
pub fn residual_independence_check(
    panel: &MarketPanel,
    efficiency: &EfficiencySeries,
    with_constant: bool,
) -> Result<ResidualCheck> {
    efficiency.check_alignment(panel)?;
    let u = panel.unemployed();
    let ev = ols(&panel.vacancies(), &[("U", &u)], with_constant)?.residuals;
    let ea = ols(&efficiency.values(), &[("U", &u)], with_constant)?.residuals;
    let scale = efficiency.values().iter().map(|a| a.abs()).fold(0.0, f64::max).max(1.0);
    let correlation = if ea.iter().all(|e| e.abs() <= 1e-12 * scale) {
        log::warn!("efficiency is an exact affine function of unemployment; residual correlation undefined");
        f64::NAN
    } else {
        pearson(&ev, &ea)
    };
    let pairs = panel
        .observations()
        .iter()
        .zip(ev.iter().zip(&ea))
        .map(|(o, (&resid_v, &resid_a))| ResidualPair { market_id: o.market_id.clone(), period: o.period, resid_v, resid_a })
        .collect();
    Ok(ResidualCheck { correlation, n: panel.len(), with_constant, pairs })
}

pub fn write_residuals_csv<W: Write>(check: &ResidualCheck, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["market_id", "period", "resid_V", "resid_A"])?;
    for p in &check.pairs {
        w.write_record([p.market_id.clone(), p.period.to_string(), p.resid_v.to_string(), p.resid_a.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketSummary {
    pub market_id: String,
    pub period: i64,
    /// V / U.
    pub tightness: f64,
    /// H / U.
    pub job_finding: f64,
    /// H / V.
    pub worker_finding: f64,
}

pub fn market_summaries(panel: &MarketPanel) -> Vec<MarketSummary> {
    panel
        .observations()
        .iter()
        .map(|o| MarketSummary {
            market_id: o.market_id.clone(),
            period: o.period,
            tightness: o.vacancies / o.unemployed,
            job_finding: o.hires / o.unemployed,
            worker_finding: o.hires / o.vacancies,
        })
        .collect()
}

pub fn write_summaries_csv<W: Write>(rows: &[MarketSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["market_id", "period", "tightness", "job_finding", "worker_finding"])?;
    for r in rows {
        w.write_record([
            r.market_id.clone(),
            r.period.to_string(),
            r.tightness.to_string(),
            r.job_finding.to_string(),
            r.worker_finding.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
