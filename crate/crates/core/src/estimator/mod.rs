//! Nonparametric estimation of the matching function and latent matching efficiency.
//!
//! Under constant returns to scale and independence of efficiency and vacancies given
//! unemployment, the conditional law of hires given (U, V) identifies the conditional law
//! of efficiency given U up to one normalization point. The estimator
//!
//! 1. estimates G(h | u, v) with a product-normal kernel ([`kernel`]),
//! 2. traces F(a | u) by rescaling the base observation along CRS rays ([`trace`]),
//! 3. inverts F at each observation's conditional percentile ([`recover`]).

pub mod kernel;
pub mod recover;
pub mod trace;

pub use kernel::{conditional_cdf, conditional_percentile_mid, conditional_quantile, KernelConfig, KernelSample};
pub use recover::{recover_efficiency, EfficiencyEntry, EfficiencySeries};
pub use trace::{trace_cell, trace_efficiency_distribution, ClipFlag, EfficiencyDistribution, TracedColumn};

use crate::data::{BasePoint, BaseSpec, MarketPanel, ScalePolicy};
use crate::error::Result;

/// Everything produced by one efficiency estimation run.
#[derive(Debug, Clone)]
pub struct EfficiencyEstimate {
    /// The panel in the units used for estimation.
    pub panel: MarketPanel,
    pub sample: KernelSample,
    pub base: BasePoint,
    pub distribution: EfficiencyDistribution,
    pub series: EfficiencySeries,
}

/// Scale the panel, select the base, trace F(a | u) and recover the efficiency series.
pub fn estimate_efficiency(
    panel: &MarketPanel,
    base: &BaseSpec,
    policy: ScalePolicy,
    cfg: &KernelConfig,
) -> Result<EfficiencyEstimate> {
    cfg.validate()?;
    let panel = panel.normalize_scales(policy);
    let base = panel.select_base(base)?;
    let sample = KernelSample::from_panel(&panel);
    let distribution = trace_efficiency_distribution(&sample, &base, cfg)?;
    let series = recover_efficiency(&panel, &sample, &distribution, cfg)?;
    log::debug!(
        "recovered {} efficiency values ({} clipped), {} u-columns",
        series.entries.len(),
        series.clipped(),
        distribution.u_grid.len()
    );
    Ok(EfficiencyEstimate { panel, sample, base, distribution, series })
}

/// m(a·u, v) = G⁻¹(F(a | u) | u, v), with `a` in base-normalized units.
pub fn evaluate_matching_function(
    sample: &KernelSample,
    dist: &EfficiencyDistribution,
    a: f64,
    u: f64,
    v: f64,
    cfg: &KernelConfig,
) -> Result<f64> {
    let p = dist.cdf_at(a * dist.base_log_offset.exp(), u)?;
    conditional_quantile(sample, p, u, v, cfg)
}
