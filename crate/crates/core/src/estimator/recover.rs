//! Inversion of the traced distribution to recover per-observation efficiency.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use super::kernel::{conditional_percentile_mid, KernelConfig, KernelSample};
use super::trace::{ClipFlag, EfficiencyDistribution};
use crate::data::MarketPanel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyEntry {
    pub market_id: String,
    pub period: i64,
    #[serde(rename = "A")]
    pub a: f64,
    pub percentile: f64,
    pub flag: ClipFlag,
}

/// Recovered efficiency, aligned with the panel's (market_id, period) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EfficiencySeries {
    pub entries: Vec<EfficiencyEntry>,
}

impl EfficiencySeries {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.a).collect()
    }

    pub fn clipped(&self) -> usize {
        self.entries.iter().filter(|e| e.flag != ClipFlag::Ok).count()
    }

    /// Check that the series covers the panel observation-for-observation.
    pub fn check_alignment(&self, panel: &MarketPanel) -> Result<()> {
        if self.entries.len() != panel.len() {
            return Err(Error::Validation(format!(
                "efficiency series has {} rows but the panel has {}",
                self.entries.len(),
                panel.len()
            )));
        }
        for (e, o) in self.entries.iter().zip(panel.observations()) {
            if e.market_id != o.market_id || e.period != o.period {
                return Err(Error::Lookup { market_id: o.market_id.clone(), period: o.period });
            }
        }
        Ok(())
    }

    /// Reorder the series to the panel's order; every panel observation must be present.
    pub fn aligned_to(&self, panel: &MarketPanel) -> Result<EfficiencySeries> {
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| a.market_id.cmp(&b.market_id).then(a.period.cmp(&b.period)));
        let mut entries = Vec::with_capacity(panel.len());
        for o in panel.observations() {
            let k = sorted
                .binary_search_by(|e| e.market_id.as_str().cmp(&o.market_id).then(e.period.cmp(&o.period)))
                .map_err(|_| Error::Lookup { market_id: o.market_id.clone(), period: o.period })?;
            entries.push(sorted[k].clone());
        }
        Ok(EfficiencySeries { entries })
    }

    /// CSV `market_id,period,A,percentile,flag`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["market_id", "period", "A", "percentile", "flag"])?;
        for e in &self.entries {
            w.write_record([
                e.market_id.clone(),
                e.period.to_string(),
                e.a.to_string(),
                e.percentile.to_string(),
                e.flag.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn { column: name.to_string() })
        };
        let (im, ip, ia) = (col("market_id")?, col("period")?, col("A")?);
        let (iq, iflag) = (headers.iter().position(|h| h == "percentile"), headers.iter().position(|h| h == "flag"));
        let mut entries = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let row = i + 1;
            let record = record?;
            let get = |k: usize| record.get(k).unwrap_or("");
            let bad = |what: &str| Error::InvalidRow { row, message: format!("invalid {what}") };
            let a: f64 = get(ia).parse().map_err(|_| bad("A"))?;
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidRow { row, message: format!("efficiency must be positive, got {a}") });
            }
            entries.push(EfficiencyEntry {
                market_id: get(im).to_string(),
                period: get(ip).parse().map_err(|_| bad("period"))?,
                a,
                percentile: iq.map_or(Ok(f64::NAN), |k| get(k).parse().map_err(|_| bad("percentile")))?,
                flag: iflag.map_or(Some(ClipFlag::Ok), |k| ClipFlag::parse(get(k))).ok_or_else(|| bad("flag"))?,
            });
        }
        Ok(EfficiencySeries { entries })
    }
}

/// Invert F(a | U_t) at each observation's mid-distribution percentile of H_t given (U_t, V_t),
/// then rescale so the base observation has efficiency exactly one.
pub fn recover_efficiency(
    panel: &MarketPanel,
    sample: &KernelSample,
    dist: &EfficiencyDistribution,
    cfg: &KernelConfig,
) -> Result<EfficiencySeries> {
    let raw = (0..sample.len())
        .into_par_iter()
        .map(|t| {
            let p = conditional_percentile_mid(sample, sample.h[t], sample.u[t], sample.v[t], cfg)?;
            let (la, flag) = dist.inverse_log(p, sample.u[t]);
            Ok((la, p, flag))
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = panel
        .observations()
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(t, (o, (la, p, flag)))| EfficiencyEntry {
            market_id: o.market_id.clone(),
            period: o.period,
            a: if t == dist.base.index { 1.0 } else { (la - dist.base_log_offset).exp() },
            percentile: p,
            flag,
        })
        .collect();
    Ok(EfficiencySeries { entries })
}
