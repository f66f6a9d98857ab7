//! Panel data model, ingestion, unit normalization and base-point selection.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REQUIRED_COLUMNS: [&str; 5] = ["market_id", "period", "hires", "unemployed", "vacancies"];

/// Default minimum number of observations per market for estimation entry points.
pub const DEFAULT_MIN_OBS: usize = 30;

/// One (market, period) record of hires, unemployed and vacancies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub market_id: String,
    pub period: i64,
    pub hires: f64,
    pub unemployed: f64,
    pub vacancies: f64,
    /// Optional calendar label carried through for output only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

/// Divisors applied to H, U and V by [`MarketPanel::normalize_scales`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "V")]
    pub v: f64,
}

impl ScaleRecord {
    pub fn identity() -> Self {
        ScaleRecord { h: 1.0, u: 1.0, v: 1.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.h == 1.0 && self.u == 1.0 && self.v == 1.0
    }

    /// Serialize as `{"scale": {"H": .., "U": .., "V": ..}}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "scale": self })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let inner = value
            .get("scale")
            .ok_or_else(|| Error::Schema("scale record is missing the `scale` key".into()))?;
        Ok(serde_json::from_value(inner.clone())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    Csv,
    Json,
}

impl InputFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => InputFormat::Json,
            _ => InputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalePolicy {
    MeanOne,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BaseSpec {
    FirstPeriod,
    Explicit { market_id: String, period: i64 },
}

impl std::str::FromStr for BaseSpec {
    type Err = Error;

    /// Parses `first` or `MARKET:PERIOD` (the market may itself contain colons).
    fn from_str(s: &str) -> Result<Self> {
        if s == "first" || s == "first_period" {
            return Ok(BaseSpec::FirstPeriod);
        }
        let (market, period) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Validation(format!("base `{s}` is not `first` or MARKET:PERIOD")))?;
        let period = period
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::Validation(format!("base period `{period}` is not an integer")))?;
        Ok(BaseSpec::Explicit { market_id: market.to_string(), period })
    }
}

/// The normalization point: efficiency is fixed to `a0 = 1` at this observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePoint {
    pub market_id: String,
    pub period: i64,
    /// Position of the base observation in the sorted panel.
    pub index: usize,
    pub h0: f64,
    pub u0: f64,
    pub v0: f64,
    pub a0: f64,
}

/// Non-fatal data-quality flag raised during ingestion.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestWarning {
    pub row: usize,
    pub message: String,
}

/// Validated tidy panel sorted by `(market_id, period)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPanel {
    observations: Vec<Observation>,
    markets: Vec<String>,
    scale: ScaleRecord,
    warnings: Vec<IngestWarning>,
}

impl MarketPanel {
    /// Validate and sort a list of observations. `observations[i]` is reported as row `i + 1`.
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let mut warnings = Vec::new();
        for (i, obs) in observations.iter().enumerate() {
            let row = i + 1;
            let bad = |message: String| Error::InvalidRow { row, message };
            if obs.market_id.is_empty() {
                return Err(bad("empty market_id".into()));
            }
            if !obs.hires.is_finite() || obs.hires < 0.0 {
                return Err(bad(format!("hires must be a finite nonnegative number, got {}", obs.hires)));
            }
            if !obs.unemployed.is_finite() || obs.unemployed <= 0.0 {
                return Err(bad(format!("unemployed must be positive, got {}", obs.unemployed)));
            }
            if !obs.vacancies.is_finite() || obs.vacancies <= 0.0 {
                return Err(bad(format!("vacancies must be positive, got {}", obs.vacancies)));
            }
            if obs.hires > obs.unemployed + obs.vacancies {
                warnings.push(IngestWarning { row, message: "hires exceed unemployed + vacancies".into() });
            } else if obs.hires > obs.unemployed.min(obs.vacancies) {
                warnings.push(IngestWarning { row, message: "hires exceed min(unemployed, vacancies)".into() });
            }
        }
        for w in &warnings {
            log::warn!("row {}: {}", w.row, w.message);
        }

        let mut observations = observations;
        observations.sort_by(|a, b| a.market_id.cmp(&b.market_id).then(a.period.cmp(&b.period)));
        for pair in observations.windows(2) {
            if pair[0].market_id == pair[1].market_id && pair[0].period == pair[1].period {
                return Err(Error::DuplicateKey {
                    market_id: pair[0].market_id.clone(),
                    period: pair[0].period,
                });
            }
        }
        let markets: Vec<String> = observations
            .iter()
            .map(|o| o.market_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(MarketPanel { observations, markets, scale: ScaleRecord::identity(), warnings })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn markets(&self) -> &[String] {
        &self.markets
    }

    pub fn scale(&self) -> ScaleRecord {
        self.scale
    }

    pub fn warnings(&self) -> &[IngestWarning] {
        &self.warnings
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn hires(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.hires).collect()
    }

    pub fn unemployed(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.unemployed).collect()
    }

    pub fn vacancies(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.vacancies).collect()
    }

    /// Sorted distinct periods across all markets.
    pub fn periods(&self) -> Vec<i64> {
        self.observations
            .iter()
            .map(|o| o.period)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn position(&self, market_id: &str, period: i64) -> Option<usize> {
        self.observations
            .binary_search_by(|o| o.market_id.as_str().cmp(market_id).then(o.period.cmp(&period)))
            .ok()
    }

    /// Check the per-market observation floor required by estimation entry points.
    pub fn require_min_obs(&self, floor: usize) -> Result<()> {
        for market in &self.markets {
            let n = self.observations.iter().filter(|o| &o.market_id == market).count();
            if n < floor {
                return Err(Error::Validation(format!(
                    "market `{market}` has {n} observations; at least {floor} are required"
                )));
            }
        }
        Ok(())
    }

    /// Divide H, U and V by their pooled means (`MeanOne`) or leave the panel unchanged.
    /// Divisors compose with any scaling already applied.
    pub fn normalize_scales(&self, policy: ScalePolicy) -> MarketPanel {
        match policy {
            ScalePolicy::None => self.clone(),
            ScalePolicy::MeanOne => {
                let n = self.observations.len().max(1) as f64;
                let mean = |f: fn(&Observation) -> f64| self.observations.iter().map(f).sum::<f64>() / n;
                let dh = mean(|o| o.hires);
                let du = mean(|o| o.unemployed);
                let dv = mean(|o| o.vacancies);
                // A panel with zero hires everywhere keeps H unscaled.
                let dh = if dh > 0.0 { dh } else { 1.0 };
                let mut out = self.clone();
                for o in &mut out.observations {
                    o.hires /= dh;
                    o.unemployed /= du;
                    o.vacancies /= dv;
                }
                out.scale = ScaleRecord { h: self.scale.h * dh, u: self.scale.u * du, v: self.scale.v * dv };
                out
            }
        }
    }

    /// Undo all scaling recorded in the scale record.
    pub fn denormalize(&self) -> MarketPanel {
        let mut out = self.clone();
        for o in &mut out.observations {
            o.hires *= self.scale.h;
            o.unemployed *= self.scale.u;
            o.vacancies *= self.scale.v;
        }
        out.scale = ScaleRecord::identity();
        out
    }

    /// Resolve a base specification to a member observation. `FirstPeriod` picks the
    /// smallest period, breaking ties by market id, so the result is independent of row order.
    pub fn select_base(&self, spec: &BaseSpec) -> Result<BasePoint> {
        let index = match spec {
            BaseSpec::FirstPeriod => self
                .observations
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.period.cmp(&b.period).then(a.market_id.cmp(&b.market_id)))
                .map(|(i, _)| i)
                .ok_or_else(|| Error::Validation("panel is empty".into()))?,
            BaseSpec::Explicit { market_id, period } => {
                self.position(market_id, *period).ok_or_else(|| Error::Lookup {
                    market_id: market_id.clone(),
                    period: *period,
                })?
            }
        };
        let o = &self.observations[index];
        if !(o.hires > 0.0) {
            return Err(Error::Validation(format!(
                "base observation ({}, {}) has zero hires",
                o.market_id, o.period
            )));
        }
        Ok(BasePoint {
            market_id: o.market_id.clone(),
            period: o.period,
            index,
            h0: o.hires,
            u0: o.unemployed,
            v0: o.vacancies,
            a0: 1.0,
        })
    }

    /// Write the panel in the ingestion CSV schema.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let with_date = self.observations.iter().any(|o| o.date.is_some());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = REQUIRED_COLUMNS.to_vec();
        if with_date {
            header.push("date");
        }
        w.write_record(&header)?;
        for o in &self.observations {
            let mut rec = vec![
                o.market_id.clone(),
                o.period.to_string(),
                o.hires.to_string(),
                o.unemployed.to_string(),
                o.vacancies.to_string(),
            ];
            if with_date {
                rec.push(o.date.clone().unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Load and validate a panel from disk.
pub fn load_panel(path: &Path, format: InputFormat) -> Result<MarketPanel> {
    let file = BufReader::new(File::open(path)?);
    match format {
        InputFormat::Csv => read_csv(file),
        InputFormat::Json => read_json(file),
    }
}

pub fn read_csv<R: Read>(reader: R) -> Result<MarketPanel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };
    let idx = [
        col("market_id")?,
        col("period")?,
        col("hires")?,
        col("unemployed")?,
        col("vacancies")?,
    ];
    let date_idx = headers.iter().position(|h| h == "date");

    let mut observations = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |k: usize| record.get(idx[k]).unwrap_or("");
        let number = |k: usize| -> Result<f64> {
            field(k).parse::<f64>().map_err(|_| Error::InvalidRow {
                row,
                message: format!("column `{}` value `{}` is not a number", REQUIRED_COLUMNS[k], field(k)),
            })
        };
        let period = field(1).parse::<i64>().map_err(|_| Error::InvalidRow {
            row,
            message: format!("column `period` value `{}` is not an integer", field(1)),
        })?;
        observations.push(Observation {
            market_id: field(0).to_string(),
            period,
            hires: number(2)?,
            unemployed: number(3)?,
            vacancies: number(4)?,
            date: date_idx.and_then(|d| record.get(d)).filter(|s| !s.is_empty()).map(str::to_string),
        });
    }
    MarketPanel::new(observations)
}

pub fn read_json<R: Read>(reader: R) -> Result<MarketPanel> {
    let value: serde_json::Value = serde_json::from_reader(reader)?;
    let rows = value
        .as_array()
        .ok_or_else(|| Error::Schema("JSON input must be an array of objects".into()))?;
    let mut observations = Vec::with_capacity(rows.len());
    for (i, item) in rows.iter().enumerate() {
        let row = i + 1;
        let obj = item
            .as_object()
            .ok_or_else(|| Error::InvalidRow { row, message: "entry is not an object".into() })?;
        for name in REQUIRED_COLUMNS {
            if !obj.contains_key(name) {
                return Err(Error::MissingColumn { column: name.to_string() });
            }
        }
        let number = |name: &str| -> Result<f64> {
            let v = &obj[name];
            v.as_f64()
                .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
                .ok_or_else(|| Error::InvalidRow { row, message: format!("field `{name}` is not a number") })
        };
        let market_id = match &obj["market_id"] {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            _ => return Err(Error::InvalidRow { row, message: "field `market_id` is not a string".into() }),
        };
        let period = obj["period"]
            .as_i64()
            .or_else(|| obj["period"].as_str().and_then(|s| s.parse().ok()))
            .ok_or_else(|| Error::InvalidRow { row, message: "field `period` is not an integer".into() })?;
        observations.push(Observation {
            market_id,
            period,
            hires: number("hires")?,
            unemployed: number("unemployed")?,
            vacancies: number("vacancies")?,
            date: obj.get("date").and_then(|d| d.as_str()).map(str::to_string),
        });
    }
    MarketPanel::new(observations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn obs(m: &str, p: i64, h: f64, u: f64, v: f64) -> Observation {
        Observation { market_id: m.into(), period: p, hires: h, unemployed: u, vacancies: v, date: None }
    }

    #[test]
    fn zero_unemployed_names_row() {
        let csv = "market_id,period,hires,unemployed,vacancies\nA,1,5,10,10\nA,2,5,0,10\nA,3,5,10,10\n";
        match read_csv(csv.as_bytes()) {
            Err(Error::InvalidRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected row error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "market_id,period,hires,unemployed\nA,1,5,10\n";
        match read_csv(csv.as_bytes()) {
            Err(Error::MissingColumn { column }) => assert_eq!(column, "vacancies"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        let csv = "market_id,period,hires,unemployed,vacancies\nA,1,5,10,10\nA,1,6,10,10\n";
        assert!(matches!(read_csv(csv.as_bytes()), Err(Error::DuplicateKey { .. })));
    }

    #[test]
    fn long_single_market_series() {
        let mut csv = String::from("market_id,period,hires,unemployed,vacancies,date\n");
        for p in 1..=629 {
            csv.push_str(&format!("marketA,{p},{},{},{},\n", 100 + p % 7, 1000 + p, 900 + p % 13));
        }
        let panel = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(panel.len(), 629);
        assert_eq!(panel.markets().len(), 1);
    }

    #[test]
    fn json_two_markets() {
        let mut rows = Vec::new();
        for m in ["north", "south"] {
            for p in 1..=12 {
                rows.push(serde_json::json!({
                    "market_id": m, "period": p, "hires": 10.0, "unemployed": 50.0, "vacancies": 40.0
                }));
            }
        }
        let text = serde_json::to_string(&rows).unwrap();
        let panel = read_json(text.as_bytes()).unwrap();
        assert_eq!(panel.len(), 24);
        assert_eq!(panel.markets(), &["north".to_string(), "south".to_string()]);
    }

    #[test]
    fn hires_above_stocks_only_warns() {
        let panel = MarketPanel::new(vec![obs("A", 1, 30.0, 10.0, 10.0), obs("A", 2, 15.0, 10.0, 20.0)]).unwrap();
        assert_eq!(panel.warnings().len(), 2);
        assert_eq!(panel.warnings()[0].row, 1);
    }

    #[test]
    fn mean_one_scaling() {
        let panel =
            MarketPanel::new(vec![obs("A", 1, 2.0, 50.0, 10.0), obs("A", 2, 4.0, 150.0, 30.0)]).unwrap();
        let scaled = panel.normalize_scales(ScalePolicy::MeanOne);
        assert_eq!(scaled.scale().u, 100.0);
        assert_eq!(scaled.observations()[0].unemployed, 0.5);
        assert_eq!(panel.normalize_scales(ScalePolicy::None), panel);
    }

    #[test]
    fn base_selection() {
        let panel = MarketPanel::new(vec![
            obs("tokyo", 5, 1.0, 2.0, 3.0),
            obs("osaka", 7, 1.0, 2.0, 3.0),
            obs("osaka", 5, 1.0, 2.0, 3.0),
        ])
        .unwrap();
        let first = panel.select_base(&BaseSpec::FirstPeriod).unwrap();
        assert_eq!((first.market_id.as_str(), first.period), ("osaka", 5));
        let explicit = panel.select_base(&"tokyo:5".parse().unwrap()).unwrap();
        assert_eq!(explicit.market_id, "tokyo");
        assert_eq!(explicit.a0, 1.0);
        assert!(matches!(
            panel.select_base(&BaseSpec::Explicit { market_id: "kyoto".into(), period: 5 }),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let panel = MarketPanel::new(vec![obs("A", 1, 2.5, 50.0, 10.0), obs("B", 1, 4.0, 150.0, 30.0)]).unwrap();
        let mut buf = Vec::new();
        panel.write_csv(&mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), panel);
    }

    fn arb_rows() -> impl Strategy<Value = Vec<(u8, f64, f64, f64)>> {
        prop::collection::vec((0u8..3, 0.0f64..1e5, 1e-3f64..1e6, 1e-3f64..1e6), 1..40)
    }

    fn build(rows: &[(u8, f64, f64, f64)]) -> Vec<Observation> {
        rows.iter()
            .enumerate()
            .map(|(i, &(m, h, u, v))| obs(&format!("m{m}"), i as i64, h, u, v))
            .collect()
    }

    proptest! {
        #[test]
        fn normalize_round_trip(rows in arb_rows()) {
            let panel = MarketPanel::new(build(&rows)).unwrap();
            let scaled = panel.normalize_scales(ScalePolicy::MeanOne);
            let n = scaled.len() as f64;
            prop_assert!((scaled.unemployed().iter().sum::<f64>() / n - 1.0).abs() < 1e-12);
            prop_assert!((scaled.vacancies().iter().sum::<f64>() / n - 1.0).abs() < 1e-12);
            let back = scaled.denormalize();
            for (a, b) in back.observations().iter().zip(panel.observations()) {
                assert_relative_eq!(a.unemployed, b.unemployed, max_relative = 1e-12);
                assert_relative_eq!(a.vacancies, b.vacancies, max_relative = 1e-12);
                assert_relative_eq!(a.hires, b.hires, max_relative = 1e-12, epsilon = 1e-300);
            }
        }

        #[test]
        fn base_invariant_to_row_order(rows in arb_rows(), seed in any::<u64>()) {
            let mut observations = build(&rows);
            prop_assume!(observations.iter().any(|o| o.hires > 0.0));
            for o in &mut observations { o.hires += 1.0; }
            let a = MarketPanel::new(observations.clone()).unwrap();
            let mut shuffled = observations;
            let k = (seed % shuffled.len() as u64) as usize;
            shuffled.rotate_left(k);
            shuffled.reverse();
            let b = MarketPanel::new(shuffled).unwrap();
            prop_assert_eq!(a.observations(), b.observations());
            prop_assert_eq!(a.select_base(&BaseSpec::FirstPeriod).unwrap(), b.select_base(&BaseSpec::FirstPeriod).unwrap());
        }
    }
}
