//! Kernel-weighted conditional distribution of hires given (U, V).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::MarketPanel;
use crate::error::{Error, Result};

/// Tuning for the kernel estimator. All lengths are in mean-one units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Common bandwidth of the product-normal kernel.
    pub bandwidth: f64,
    /// Number of points in the hires grid used for quantile inversion.
    pub cdf_grid_size: usize,
    /// Number of points in the geometric efficiency grid.
    pub a_grid_size: usize,
    pub a_min: f64,
    pub a_max: f64,
    /// Number of sample quantiles of U used as tracing columns (the base U is always added).
    pub u_grid_size: usize,
    /// Total kernel mass below which a point has no local support.
    pub min_mass: f64,
    /// Largest fraction of interior cells of a traced column that may lack support.
    pub max_missing_fraction: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth: 0.01,
            cdf_grid_size: 512,
            a_grid_size: 201,
            a_min: 1.0 / 16.0,
            a_max: 16.0,
            u_grid_size: 25,
            min_mass: 1e-12,
            max_missing_fraction: 0.5,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::Validation(format!("bandwidth must be positive, got {}", self.bandwidth)));
        }
        if self.cdf_grid_size < 2 || self.a_grid_size < 2 || self.u_grid_size < 2 {
            return Err(Error::Validation("grid sizes must be at least 2".into()));
        }
        if !(self.a_min > 0.0 && self.a_min < 1.0 && self.a_max > 1.0) {
            return Err(Error::Validation("efficiency grid must satisfy 0 < a_min < 1 < a_max".into()));
        }
        Ok(())
    }
}

/// Kernel weights at one evaluation point.
pub struct LocalWeights {
    pub weights: Vec<f64>,
    pub mass: f64,
}

/// The (H, U, V) columns of a scaled panel, with H pre-sorted for quantile work.
#[derive(Debug, Clone)]
pub struct KernelSample {
    pub h: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    order: Vec<usize>,
}

impl KernelSample {
    pub fn from_panel(panel: &MarketPanel) -> Self {
        Self::new(panel.hires(), panel.unemployed(), panel.vacancies())
    }

    pub fn new(h: Vec<f64>, u: Vec<f64>, v: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..h.len()).collect();
        order.sort_by(|&a, &b| h[a].total_cmp(&h[b]).then(a.cmp(&b)));
        KernelSample { h, u, v, order }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn h_min(&self) -> f64 {
        self.order.first().map_or(f64::NAN, |&i| self.h[i])
    }

    pub fn h_max(&self) -> f64 {
        self.order.last().map_or(f64::NAN, |&i| self.h[i])
    }

    /// Product-normal density weights of every observation around `(u, v)`.
    pub fn weights(&self, u: f64, v: f64, bandwidth: f64) -> LocalWeights {
        let inv = 1.0 / (bandwidth * bandwidth);
        let norm = inv / (2.0 * PI);
        let weights: Vec<f64> = self
            .u
            .iter()
            .zip(&self.v)
            .map(|(&ut, &vt)| {
                let (du, dv) = (ut - u, vt - v);
                norm * (-0.5 * (du * du + dv * dv) * inv).exp()
            })
            .collect();
        let mass = weights.iter().sum();
        LocalWeights { weights, mass }
    }

    fn supported(&self, u: f64, v: f64, cfg: &KernelConfig) -> Result<LocalWeights> {
        let w = self.weights(u, v, cfg.bandwidth);
        if !(w.mass >= cfg.min_mass) {
            return Err(Error::NoLocalSupport { u, v, mass: w.mass });
        }
        Ok(w)
    }
}

/// Kernel estimate of P(H < h | U = u, V = v).
pub fn conditional_cdf(sample: &KernelSample, h: f64, u: f64, v: f64, cfg: &KernelConfig) -> Result<f64> {
    let w = sample.supported(u, v, cfg)?;
    let below: f64 = sample.h.iter().zip(&w.weights).filter(|(&ht, _)| ht < h).map(|(_, &wt)| wt).sum();
    Ok((below / w.mass).clamp(0.0, 1.0))
}

/// Mid-distribution percentile: ties at `h` (including an observation's own record)
/// count with half weight. Used for the percentile of each observed hire.
pub fn conditional_percentile_mid(sample: &KernelSample, h: f64, u: f64, v: f64, cfg: &KernelConfig) -> Result<f64> {
    let w = sample.supported(u, v, cfg)?;
    let (mut below, mut tied) = (0.0, 0.0);
    for (&ht, &wt) in sample.h.iter().zip(&w.weights) {
        if ht < h {
            below += wt;
        } else if ht == h {
            tied += wt;
        }
    }
    Ok(((below + 0.5 * tied) / w.mass).clamp(0.0, 1.0))
}

/// Evenly spaced hires grid spanning the sample range.
pub fn hires_grid(sample: &KernelSample, cfg: &KernelConfig) -> Vec<f64> {
    let (lo, hi) = (sample.h_min(), sample.h_max());
    let n = cfg.cdf_grid_size;
    (0..n).map(|k| if k + 1 == n { hi } else { lo + (hi - lo) * k as f64 / (n - 1) as f64 }).collect()
}

/// Smallest hires-grid value whose conditional CDF reaches `p`, refined by linear
/// interpolation between neighboring grid points.
pub fn conditional_quantile(sample: &KernelSample, p: f64, u: f64, v: f64, cfg: &KernelConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let w = sample.supported(u, v, cfg)?;
    let grid = hires_grid(sample, cfg);
    let mut cum = 0.0;
    let mut next = 0;
    let mut prev_g = 0.0;
    for (k, &hk) in grid.iter().enumerate() {
        while next < sample.order.len() && sample.h[sample.order[next]] < hk {
            cum += w.weights[sample.order[next]];
            next += 1;
        }
        let g = (cum / w.mass).min(1.0);
        if g >= p {
            if k == 0 || g <= prev_g {
                return Ok(hk);
            }
            let h_prev = grid[k - 1];
            return Ok(h_prev + (p - prev_g) / (g - prev_g) * (hk - h_prev));
        }
        prev_g = g;
    }
    Ok(*grid.last().unwrap())
}
