//! Tracing the conditional efficiency distribution F(a | u) by CRS rescaling of the base point.

use rayon::prelude::*;
use serde::Serialize;

use super::kernel::{conditional_cdf, conditional_percentile_mid, KernelConfig, KernelSample};
use crate::data::BasePoint;
use crate::error::{Error, Result};

/// Whether an inversion stayed inside a column's traced range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipFlag {
    Ok,
    ClippedLow,
    ClippedHigh,
}

impl ClipFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClipFlag::Ok => "ok",
            ClipFlag::ClippedLow => "clipped_low",
            ClipFlag::ClippedHigh => "clipped_high",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(ClipFlag::Ok),
            "clipped_low" => Some(ClipFlag::ClippedLow),
            "clipped_high" => Some(ClipFlag::ClippedHigh),
            _ => None,
        }
    }

    fn merge(self, other: ClipFlag) -> ClipFlag {
        if self == ClipFlag::Ok {
            other
        } else {
            self
        }
    }
}

/// One traced u-column: rearranged CDF values on the contiguous supported a-range `lo..=hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct TracedColumn {
    pub lo: usize,
    pub hi: usize,
    pub values: Vec<f64>,
    /// Interior cells without local support, filled by interpolation.
    pub filled: usize,
}

impl TracedColumn {
    pub fn get(&self, i: usize) -> Option<f64> {
        (self.lo..=self.hi).contains(&i).then(|| self.values[i - self.lo])
    }
}

/// F(a | u) on an (a, u) grid with the base point at `a = 1, u = u0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyDistribution {
    pub base: BasePoint,
    pub u_grid: Vec<f64>,
    pub a_grid: Vec<f64>,
    pub columns: Vec<TracedColumn>,
    /// Log of the raw inverted efficiency at the base observation; subtracting it
    /// pins the recovered series to one at the base.
    pub base_log_offset: f64,
    log_a: Vec<f64>,
}

impl EfficiencyDistribution {
    /// Value of F at grid cell `(i, j)`, `None` outside the traced range.
    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.columns[j].get(i)
    }

    /// JSON view: `{base, u_grid, a_grid, shape, F}` with F row-major over (a, u).
    pub fn to_json(&self) -> serde_json::Value {
        let mut f = Vec::with_capacity(self.a_grid.len() * self.u_grid.len());
        for i in 0..self.a_grid.len() {
            for j in 0..self.u_grid.len() {
                f.push(self.value(i, j));
            }
        }
        serde_json::json!({
            "base": self.base,
            "u_grid": self.u_grid,
            "a_grid": self.a_grid,
            "shape": [self.a_grid.len(), self.u_grid.len()],
            "base_log_offset": self.base_log_offset,
            "F": f,
        })
    }

    /// Columns bracketing `u` and the linear weight on the upper one.
    fn bracket(&self, u: f64) -> (usize, usize, f64) {
        let g = &self.u_grid;
        if g.len() == 1 {
            return (0, 0, 0.0);
        }
        let k = g.partition_point(|&x| x < u).clamp(1, g.len() - 1);
        let w = ((u - g[k - 1]) / (g[k] - g[k - 1])).clamp(0.0, 1.0);
        (k - 1, k, w)
    }

    /// F(a | u) in distribution units, interpolating linearly in log a and in u.
    pub fn cdf_at(&self, a: f64, u: f64) -> Result<f64> {
        let (first, last) = (self.u_grid[0], *self.u_grid.last().unwrap());
        if !(u >= first && u <= last) {
            return Err(Error::OutsideTracedRange(format!("u={u} outside [{first}, {last}]")));
        }
        let la = a.ln();
        let (j0, j1, w) = self.bracket(u);
        let col_value = |j: usize| -> Result<f64> {
            let c = &self.columns[j];
            let xs = &self.log_a[c.lo..=c.hi];
            if !(la >= xs[0] && la <= xs[xs.len() - 1]) {
                return Err(Error::OutsideTracedRange(format!("a={a} outside traced column u={}", self.u_grid[j])));
            }
            if xs.len() == 1 {
                return Ok(c.values[0]);
            }
            let k = xs.partition_point(|&x| x < la).clamp(1, xs.len() - 1);
            let t = (la - xs[k - 1]) / (xs[k] - xs[k - 1]);
            Ok(c.values[k - 1] + t * (c.values[k] - c.values[k - 1]))
        };
        let f0 = col_value(j0)?;
        if w == 0.0 {
            return Ok(f0);
        }
        let f1 = col_value(j1)?;
        Ok((1.0 - w) * f0 + w * f1)
    }

    /// Smallest log a with F(a | column j) >= p, interpolated; clipped to the traced range.
    fn inverse_column(&self, j: usize, p: f64) -> (f64, ClipFlag) {
        let c = &self.columns[j];
        let xs = &self.log_a[c.lo..=c.hi];
        let vals = &c.values;
        let k = vals.partition_point(|&f| f < p);
        if k == 0 {
            let flag = if p < vals[0] { ClipFlag::ClippedLow } else { ClipFlag::Ok };
            return (xs[0], flag);
        }
        if k >= vals.len() {
            return (xs[xs.len() - 1], ClipFlag::ClippedHigh);
        }
        let (f0, f1) = (vals[k - 1], vals[k]);
        let la = if f1 > f0 { xs[k - 1] + (p - f0) / (f1 - f0) * (xs[k] - xs[k - 1]) } else { xs[k] };
        (la, ClipFlag::Ok)
    }

    /// Raw (not base-normalized) log efficiency with conditional percentile `p` at `u`.
    pub fn inverse_log(&self, p: f64, u: f64) -> (f64, ClipFlag) {
        let (j0, j1, w) = self.bracket(u);
        let (l0, f0) = self.inverse_column(j0, p);
        if w == 0.0 {
            return (l0, f0);
        }
        let (l1, f1) = self.inverse_column(j1, p);
        if w == 1.0 {
            return (l1, f1);
        }
        ((1.0 - w) * l0 + w * l1, f0.merge(f1))
    }
}

/// Geometric efficiency grid over `[a_min, a_max]` containing 1 exactly.
pub fn efficiency_grid(cfg: &KernelConfig) -> Vec<f64> {
    let n = cfg.a_grid_size;
    let (l0, l1) = (cfg.a_min.ln(), cfg.a_max.ln());
    let mut grid: Vec<f64> = (0..n).map(|k| (l0 + (l1 - l0) * k as f64 / (n - 1) as f64).exp()).collect();
    grid[0] = cfg.a_min;
    grid[n - 1] = cfg.a_max;
    match grid.iter().position(|&a| (a - 1.0).abs() <= 1e-9) {
        Some(k) => grid[k] = 1.0,
        None => {
            let k = grid.partition_point(|&a| a < 1.0);
            grid.insert(k, 1.0);
        }
    }
    grid
}

/// Nearest-rank sample quantiles of `u` at evenly spaced levels (min and max included), plus `u0`.
pub fn unemployment_grid(u: &[f64], u0: f64, size: usize) -> Vec<f64> {
    let mut sorted = u.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut grid: Vec<f64> = (0..size)
        .map(|k| {
            let level = k as f64 / (size - 1) as f64;
            sorted[(level * (n - 1) as f64).round() as usize]
        })
        .collect();
    grid.push(u0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Rearrange one raw column: keep the supported span, interpolate interior gaps, sort.
fn finish_column(raw: &[Option<f64>], u: f64, max_missing_fraction: f64) -> Result<TracedColumn> {
    let supported: Vec<usize> = raw.iter().enumerate().filter_map(|(i, f)| f.map(|_| i)).collect();
    let (Some(&lo), Some(&hi)) = (supported.first(), supported.last()) else {
        return Err(Error::UnsupportedColumn { u, missing: raw.len(), span: 0 });
    };
    let span = hi - lo + 1;
    let missing = span - supported.len();
    if missing as f64 > max_missing_fraction * span as f64 {
        return Err(Error::UnsupportedColumn { u, missing, span });
    }
    let mut values = Vec::with_capacity(span);
    let mut s = 0;
    for i in lo..=hi {
        match raw[i] {
            Some(f) => {
                values.push(f);
                s += 1;
            }
            None => {
                let (a, b) = (supported[s - 1], supported[s]);
                let t = (i - a) as f64 / (b - a) as f64;
                let (fa, fb) = (raw[a].unwrap(), raw[b].unwrap());
                values.push(fa + t * (fb - fa));
            }
        }
    }
    values.sort_by(f64::total_cmp);
    Ok(TracedColumn { lo, hi, values, filled: missing })
}

/// Unrearranged F(a | u) = G(c·H0 | u, c·V0) with c = a·u / (a0·u0).
pub fn trace_cell(sample: &KernelSample, base: &BasePoint, a: f64, u: f64, cfg: &KernelConfig) -> Result<f64> {
    let c = a * u / (base.a0 * base.u0);
    conditional_cdf(sample, c * base.h0, u, c * base.v0, cfg)
}

/// Trace F(a | u) over the grids: F(a | u) = G(c·H0 | u, c·V0) with c = a·u / (a0·u0),
/// followed by per-column monotone rearrangement.
pub fn trace_efficiency_distribution(
    sample: &KernelSample,
    base: &BasePoint,
    cfg: &KernelConfig,
) -> Result<EfficiencyDistribution> {
    cfg.validate()?;
    let a_grid = efficiency_grid(cfg);
    let u_grid = unemployment_grid(&sample.u, base.u0, cfg.u_grid_size);

    let columns = u_grid
        .par_iter()
        .map(|&u| {
            let raw: Vec<Option<f64>> = a_grid
                .iter()
                .map(|&a| {
                    match trace_cell(sample, base, a, u, cfg) {
                        Ok(f) => Ok(Some(f)),
                        Err(Error::NoLocalSupport { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<_>>()?;
            finish_column(&raw, u, cfg.max_missing_fraction)
        })
        .collect::<Result<Vec<_>>>()?;
    let filled: usize = columns.iter().map(|c| c.filled).sum();
    if filled > 0 {
        log::info!("interpolated {filled} interior grid cells without local support");
    }

    let log_a = a_grid.iter().map(|a| a.ln()).collect();
    let mut dist = EfficiencyDistribution { base: base.clone(), u_grid, a_grid, columns, base_log_offset: 0.0, log_a };
    let p0 = conditional_percentile_mid(sample, base.h0, base.u0, base.v0, cfg)?;
    dist.base_log_offset = dist.inverse_log(p0, base.u0).0;
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_contains_one() {
        let g = efficiency_grid(&KernelConfig::default());
        assert_eq!(g.len(), 201);
        assert_eq!(g[100], 1.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        let even = efficiency_grid(&KernelConfig { a_grid_size: 10, ..KernelConfig::default() });
        assert_eq!(even.len(), 11);
        assert!(even.contains(&1.0));
    }

    #[test]
    fn u_grid_includes_extremes_and_base() {
        let u = [3.0, 1.0, 2.0, 5.0, 4.0];
        let g = unemployment_grid(&u, 2.5, 3);
        assert_eq!(g, vec![1.0, 2.5, 3.0, 5.0]);
    }

    #[test]
    fn column_gap_filling() {
        let raw = [None, Some(0.1), None, Some(0.5), Some(0.4), None];
        let c = finish_column(&raw, 1.0, 0.5).unwrap();
        assert_eq!((c.lo, c.hi, c.filled), (1, 4, 1));
        for (got, want) in c.values.iter().zip([0.1, 0.3, 0.4, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
        let sparse = [Some(0.1), None, None, None, Some(0.5)];
        assert!(matches!(finish_column(&sparse, 1.0, 0.5), Err(Error::UnsupportedColumn { .. })));
        assert!(matches!(finish_column(&[None, None], 1.0, 0.5), Err(Error::UnsupportedColumn { .. })));
    }
}
