//! Synthetic Cobb-Douglas panels with known efficiency, a brute-force allocation oracle,
//! and the Monte Carlo experiment comparing nonparametric and Cobb-Douglas mismatch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::data::{BaseSpec, MarketPanel, Observation, ScalePolicy};
use crate::elasticity::{elasticity_series, fit_surrogate, EtaDenominator, LambdaChoice, LassoConfig};
use crate::error::{Error, Result};
use crate::estimator::{estimate_efficiency, KernelConfig};
use crate::linalg::{mean, median, ols, pearson, quantile};
use crate::mismatch::{cd_mismatch_index, mismatch_series, MarketState, PlannerStatus};

/// Data-generating process. All `sd_*` values are stationary standard deviations of
/// log deviations; every AR(1) process starts at its center.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DgpConfig {
    pub t: usize,
    pub l: usize,
    /// True unemployment elasticity σ in H = (A·U)^σ·V^(1−σ).
    pub sigma_u: f64,
    /// Persistence of log efficiency.
    pub rho_a: f64,
    pub sd_a: f64,
    pub sd_u: f64,
    /// Standard deviation of log tightness V/U.
    pub sd_v: f64,
    /// Persistence of log unemployment and log tightness.
    pub rho_uv: f64,
    pub seed: u64,
    /// Loading of log vacancies on the efficiency deviation; zero keeps A independent of V given U.
    pub dependence_knob: f64,
    /// Spread of market efficiency levels: log α_ℓ ranges over ±spread.
    pub efficiency_spread: f64,
    /// Spread of market sizes: relative sizes range over 1 ± spread.
    pub size_spread: f64,
    /// Standard deviation of multiplicative measurement noise on hires.
    pub noise_sd: f64,
}

impl DgpConfig {
    /// Single market used for efficiency and elasticity recovery checks.
    pub fn recovery() -> Self {
        DgpConfig {
            t: 600,
            l: 1,
            sigma_u: 0.7,
            rho_a: 0.5,
            sd_a: 0.04,
            sd_u: 0.001,
            sd_v: 0.04,
            rho_uv: 0.5,
            seed: 0,
            dependence_knob: 0.0,
            efficiency_spread: 0.0,
            size_spread: 0.0,
            noise_sd: 0.0,
        }
    }

    /// Three markets with different efficiency levels and sizes.
    pub fn bias() -> Self {
        DgpConfig {
            t: 1200,
            l: 3,
            sd_a: 0.005,
            sd_u: 0.03,
            sd_v: 0.1,
            efficiency_spread: 0.1,
            size_spread: 0.2,
            ..Self::recovery()
        }
    }

    /// Recovery design with vacancies loading on efficiency.
    pub fn independence() -> Self {
        DgpConfig { dependence_knob: 1.0, ..Self::recovery() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_u > 0.0 && self.sigma_u < 1.0) {
            return Err(Error::Validation(format!("sigma_u must lie in (0, 1), got {}", self.sigma_u)));
        }
        if !(0.0..1.0).contains(&self.rho_a) || !(0.0..1.0).contains(&self.rho_uv) {
            return Err(Error::Validation("persistence parameters must lie in [0, 1)".into()));
        }
        if self.t < 10 || self.l == 0 {
            return Err(Error::Validation(format!("need T >= 10 and L >= 1, got T={} L={}", self.t, self.l)));
        }
        if !(0.0..1.0).contains(&self.size_spread) {
            return Err(Error::Validation("size_spread must lie in [0, 1)".into()));
        }
        for (name, v) in [("sd_a", self.sd_a), ("sd_u", self.sd_u), ("sd_v", self.sd_v), ("noise_sd", self.noise_sd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Recovery,
    Bias,
    Independence,
}

impl Preset {
    pub fn config(self) -> DgpConfig {
        match self {
            Preset::Recovery => DgpConfig::recovery(),
            Preset::Bias => DgpConfig::bias(),
            Preset::Independence => DgpConfig::independence(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Recovery => "recovery",
            Preset::Bias => "bias",
            Preset::Independence => "independence",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recovery" => Ok(Preset::Recovery),
            "bias" => Ok(Preset::Bias),
            "independence" => Ok(Preset::Independence),
            _ => Err(Error::Validation(format!("unknown preset `{s}`"))),
        }
    }
}

/// A simulated panel with its true efficiency (aligned with the panel order).
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: MarketPanel,
    pub true_a: Vec<f64>,
    pub sigma_u: f64,
}

fn ar1(rng: &mut ChaCha8Rng, t: usize, rho: f64, sd: f64) -> Vec<f64> {
    let innovation = (1.0 - rho * rho).sqrt() * sd;
    let mut x = vec![0.0; t];
    for k in 1..t {
        let e: f64 = StandardNormal.sample(rng);
        x[k] = rho * x[k - 1] + innovation * e;
    }
    x
}

/// Market offsets 0, +1, −1, +2, −2, … scaled to [−1, 1].
fn market_pattern(l: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..l).map(|k| if k == 0 { 0.0 } else if k % 2 == 1 { k.div_ceil(2) as f64 } else { -((k / 2) as f64) }).collect();
    let max = raw.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if max == 0.0 {
        raw
    } else {
        raw.iter().map(|x| x / max).collect()
    }
}

pub fn market_label(k: usize, l: usize) -> String {
    let width = l.saturating_sub(1).to_string().len().max(2);
    format!("m{k:0width$}")
}

/// Level of the simulated matching function; keeps hires below both stocks. Irrelevant to
/// every estimate because efficiency is normalized at the base observation.
pub const MATCHING_LEVEL: f64 = 0.3;

/// Simulate H = c·(A·U)^σ·V^(1−σ) with AR(1) log efficiency, unemployment and tightness.
pub fn generate_cd_dgp(cfg: &DgpConfig) -> Result<SimulatedPanel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pattern = market_pattern(cfg.l);
    let sigma = cfg.sigma_u;
    let mut observations = Vec::with_capacity(cfg.t * cfg.l);
    let mut true_a = Vec::with_capacity(cfg.t * cfg.l);
    for (k, &p) in pattern.iter().enumerate() {
        let log_alpha = cfg.efficiency_spread * p;
        let log_size = (1.0 - cfg.size_spread * p).ln();
        let xa = ar1(&mut rng, cfg.t, cfg.rho_a, cfg.sd_a);
        let xu = ar1(&mut rng, cfg.t, cfg.rho_uv, cfg.sd_u);
        let xt = ar1(&mut rng, cfg.t, cfg.rho_uv, cfg.sd_v);
        let noise: Vec<f64> = (0..cfg.t).map(|_| StandardNormal.sample(&mut rng)).collect();
        for s in 0..cfg.t {
            let a = (log_alpha + xa[s]).exp();
            let log_u = log_size + xu[s];
            let log_v = log_u + xt[s] + cfg.dependence_knob * xa[s];
            let u = 1000.0 * log_u.exp();
            let v = 800.0 * log_v.exp();
            let h = MATCHING_LEVEL * (a * u).powf(sigma) * v.powf(1.0 - sigma) * (cfg.noise_sd * noise[s]).exp();
            observations.push(Observation {
                market_id: market_label(k, cfg.l),
                period: s as i64 + 1,
                hires: h,
                unemployed: u,
                vacancies: v,
                date: None,
            });
            true_a.push(a);
        }
    }
    Ok(SimulatedPanel { panel: MarketPanel::new(observations)?, true_a, sigma_u: sigma })
}

/// Partial correlation of `x` and `y` given `z` (with constants).
pub fn partial_correlation(x: &[f64], y: &[f64], z: &[f64]) -> Result<f64> {
    let ex = ols(x, &[("z", z)], true)?.residuals;
    let ey = ols(y, &[("z", z)], true)?.residuals;
    Ok(pearson(&ex, &ey))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

const EXHAUSTIVE_LIMIT: f64 = 2e7;

/// Visit integer compositions of `n` into `parts` in lexicographic order, restricted to
/// per-coordinate windows `[lo_k, hi_k]` on the first `parts − 1` coordinates.
fn search_compositions(
    n: usize,
    lo: &[usize],
    hi: &[usize],
    eval: &mut dyn FnMut(&[usize]) -> f64,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    fn rec(
        k: usize,
        remaining: usize,
        cur: &mut Vec<usize>,
        lo: &[usize],
        hi: &[usize],
        eval: &mut dyn FnMut(&[usize]) -> f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if k + 1 == cur.len() {
            cur[k] = remaining;
            let v = eval(cur);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                *best = Some((v, cur.clone()));
            }
            return;
        }
        let top = hi[k].min(remaining);
        for c in lo[k]..=top {
            cur[k] = c;
            rec(k + 1, remaining - c, cur, lo, hi, eval, best);
        }
    }
    let mut cur = vec![0; lo.len() + 1];
    if lo.iter().zip(hi).all(|(a, b)| a <= b) {
        rec(0, n, &mut cur, lo, hi, eval, best);
    }
}

/// Grid search over allocations k·U_total/grid_steps (k integer compositions of grid_steps).
/// Exhaustive when the simplex grid is small enough; otherwise an exhaustive coarse search
/// followed by exhaustive local searches on successively finer nested grids.
/// Ties resolve to the lexicographically smallest allocation.
pub fn brute_force_allocate<F>(m_oracle: F, l: usize, u_total: f64, grid_steps: usize) -> Result<Vec<f64>>
where
    F: Fn(usize, f64) -> f64,
{
    if l == 0 || l > 4 {
        return Err(Error::Unsupported(format!("brute-force allocation supports 1..=4 markets, got {l}")));
    }
    if grid_steps == 0 || !(u_total > 0.0) {
        return Err(Error::Domain("grid_steps and U_total must be positive".into()));
    }
    if l == 1 {
        return Ok(vec![u_total]);
    }
    // Coarsen by divisors until the coarse grid is small enough to enumerate.
    let mut levels = vec![grid_steps];
    while binomial(levels.last().unwrap() + l - 1, l - 1) > EXHAUSTIVE_LIMIT {
        let n = *levels.last().unwrap();
        let d = [10, 5, 4, 3, 2]
            .into_iter()
            .find(|d| n % d == 0)
            .ok_or_else(|| Error::Unsupported(format!("cannot coarsen a grid of {n} steps")))?;
        levels.push(n / d);
    }
    levels.reverse();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for (depth, &n) in levels.iter().enumerate() {
        let step = u_total / n as f64;
        let mut eval = |k: &[usize]| -> f64 { k.iter().enumerate().map(|(i, &c)| m_oracle(i, c as f64 * step)).sum() };
        let (lo, hi) = match (&best, depth) {
            (Some((_, prev)), d) if d > 0 => {
                let factor = n / levels[d - 1];
                let radius = 2 * factor;
                let center: Vec<usize> = prev.iter().map(|&c| c * factor).collect();
                let lo: Vec<usize> = center[..l - 1].iter().map(|&c| c.saturating_sub(radius)).collect();
                let hi: Vec<usize> = center[..l - 1].iter().map(|&c| (c + radius).min(n)).collect();
                (lo, hi)
            }
            _ => (vec![0; l - 1], vec![n; l - 1]),
        };
        let mut level_best = None;
        search_compositions(n, &lo, &hi, &mut eval, &mut level_best);
        best = level_best;
    }
    let (_, k) = best.ok_or_else(|| Error::Domain("empty allocation grid".into()))?;
    Ok(k.iter().map(|&c| c as f64 * u_total / grid_steps as f64).collect())
}

/// Pipeline settings for the Monte Carlo experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub kernel: KernelConfig,
    pub lasso: LassoConfig,
    /// Run the surrogate and mismatch stages (off for pure recovery runs).
    pub fit_surrogate: bool,
}

impl ExperimentConfig {
    pub fn new(dgp: DgpConfig) -> Self {
        ExperimentConfig { dgp, kernel: KernelConfig::default(), lasso: LassoConfig::default(), fit_surrogate: true }
    }
}

/// Outcome of one replication. Undefined quantities are NaN (serialized as null).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub seed: u64,
    /// corr(log Â, log A) against truth normalized at the base observation.
    pub corr_log_a: f64,
    pub rmse_log_a: f64,
    pub clipped: usize,
    pub eta_u_median: f64,
    pub eta_sum_median: f64,
    pub beta4: f64,
    pub m_true: f64,
    pub m_np: f64,
    pub m_cd: f64,
    pub m_cd_heterogeneous: f64,
    pub cd_sigma_u: f64,
    pub cd_sigma_v: f64,
    pub fallback_periods: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        Quantiles {
            q05: quantile(values, 0.05),
            q25: quantile(values, 0.25),
            q50: quantile(values, 0.5),
            q75: quantile(values, 0.75),
            q95: quantile(values, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignTest {
    pub negative: usize,
    pub nonzero: usize,
    /// One-sided p-value of P(#negative ≥ observed) under a fair coin.
    pub p_value: f64,
}

impl SignTest {
    pub fn negative_side(values: &[f64]) -> Self {
        let nonzero = values.iter().filter(|v| **v != 0.0 && !v.is_nan()).count();
        let negative = values.iter().filter(|v| **v < 0.0).count();
        let p_value = if nonzero == 0 {
            1.0
        } else if negative == 0 {
            1.0
        } else {
            let b = Binomial::new(0.5, nonzero as u64).expect("valid binomial");
            b.sf(negative as u64 - 1)
        };
        SignTest { negative, nonzero, p_value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasSummary {
    pub replications: usize,
    pub failed: usize,
    pub corr_log_a_median: f64,
    pub rmse_log_a_median: f64,
    pub eta_u_median: f64,
    pub eta_sum_median: f64,
    pub m_true_mean: f64,
    pub bias_np_mean: f64,
    pub bias_cd_mean: f64,
    pub bias_np: Quantiles,
    pub bias_cd: Quantiles,
    pub cd_sign_test: SignTest,
    pub cd_sigma_v_median: f64,
    /// Share of replications whose CD vacancy coefficient exceeds 1 − σ.
    pub cd_sigma_v_above_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReplicationResult>,
    pub summary: BiasSummary,
}

fn run_replication(cfg: &ExperimentConfig, replication: usize) -> ReplicationResult {
    let seed = cfg.dgp.seed.wrapping_add(replication as u64);
    let mut row = ReplicationResult {
        replication,
        seed,
        corr_log_a: f64::NAN,
        rmse_log_a: f64::NAN,
        clipped: 0,
        eta_u_median: f64::NAN,
        eta_sum_median: f64::NAN,
        beta4: f64::NAN,
        m_true: f64::NAN,
        m_np: f64::NAN,
        m_cd: f64::NAN,
        m_cd_heterogeneous: f64::NAN,
        cd_sigma_u: f64::NAN,
        cd_sigma_v: f64::NAN,
        fallback_periods: 0,
        error: None,
    };
    if let Err(e) = fill_replication(cfg, seed, &mut row) {
        row.error = Some(e.to_string());
    }
    row
}

fn fill_replication(cfg: &ExperimentConfig, seed: u64, row: &mut ReplicationResult) -> Result<()> {
    let sim = generate_cd_dgp(&DgpConfig { seed, ..cfg.dgp.clone() })?;
    let panel = &sim.panel;
    let sigma = sim.sigma_u;

    // Misspecified Cobb-Douglas regression on the raw data.
    let log_h: Vec<f64> = panel.hires().iter().map(|h| h.ln()).collect();
    let log_u: Vec<f64> = panel.unemployed().iter().map(|u| u.ln()).collect();
    let log_v: Vec<f64> = panel.vacancies().iter().map(|v| v.ln()).collect();
    let cd = ols(&log_h, &[("log U", &log_u), ("log V", &log_v)], true)?;
    row.cd_sigma_u = cd.coefficients[1];
    row.cd_sigma_v = cd.coefficients[2];
    let a_cd: Vec<f64> = cd.residuals.iter().map(|e| (cd.coefficients[0] + e).exp()).collect();

    // Nonparametric pipeline.
    let est = estimate_efficiency(panel, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &cfg.kernel)?;
    let base_true = sim.true_a[est.base.index];
    let log_true: Vec<f64> = sim.true_a.iter().map(|a| (a / base_true).ln()).collect();
    let log_hat: Vec<f64> = est.series.values().iter().map(|a| a.ln()).collect();
    row.corr_log_a = pearson(&log_hat, &log_true);
    row.rmse_log_a = (log_hat.iter().zip(&log_true).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / log_hat.len() as f64).sqrt();
    row.clipped = est.series.clipped();
    if !cfg.fit_surrogate {
        return Ok(());
    }
    let coeffs = fit_surrogate(&est.panel, &est.series, LambdaChoice::CrossValidated, &cfg.lasso)?;
    row.beta4 = coeffs.beta4;
    let eta = elasticity_series(&est.panel, &est.series, &coeffs, EtaDenominator::EfficiencyUnits)?;
    let eta_u: Vec<f64> = eta.iter().map(|e| e.eta_u).collect();
    let eta_sum: Vec<f64> = eta.iter().map(|e| e.eta_u + e.eta_v).collect();
    row.eta_u_median = median(&eta_u);
    row.eta_sum_median = median(&eta_sum);

    let np = mismatch_series(&est.panel, &est.series, &coeffs)?;
    row.fallback_periods = np
        .iter()
        .filter(|p| p.solution.as_ref().is_some_and(|s| s.status == PlannerStatus::NonconcaveFallback))
        .count();
    row.m_np = mean(&np.iter().filter_map(|p| p.solution.as_ref().map(|s| s.index)).collect::<Vec<_>>());

    // Truth and Cobb-Douglas indices per period on the raw panel.
    let mut by_period: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for (i, o) in panel.observations().iter().enumerate() {
        by_period.entry(o.period).or_default().push(i);
    }
    let obs = panel.observations();
    let states_with = |idx: &[usize], a: &dyn Fn(usize) -> f64| -> Vec<MarketState> {
        idx.iter().map(|&i| MarketState::new(obs[i].market_id.clone(), a(i), obs[i].unemployed, obs[i].vacancies)).collect()
    };
    let (mut m_true, mut m_cd, mut m_cd_het) = (Vec::new(), Vec::new(), Vec::new());
    let cd_sigma_ok = row.cd_sigma_u > 0.0 && row.cd_sigma_u < 1.0;
    for idx in by_period.values() {
        // (A·u)^σ v^(1−σ) is Cobb-Douglas with Hicks-neutral efficiency A^σ.
        m_true.push(cd_mismatch_index(&states_with(idx, &|i| sim.true_a[i].powf(sigma)), sigma, true)?);
        if cd_sigma_ok {
            m_cd.push(cd_mismatch_index(&states_with(idx, &|_| 1.0), row.cd_sigma_u, false)?);
            m_cd_het.push(cd_mismatch_index(&states_with(idx, &|i| a_cd[i]), row.cd_sigma_u, true)?);
        }
    }
    row.m_true = mean(&m_true);
    row.m_cd = mean(&m_cd);
    row.m_cd_heterogeneous = mean(&m_cd_het);
    Ok(())
}

fn summarize(rows: &[ReplicationResult], sigma: f64) -> BiasSummary {
    let col = |f: fn(&ReplicationResult) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let bias_np: Vec<f64> = rows.iter().map(|r| r.m_np - r.m_true).collect();
    let bias_cd: Vec<f64> = rows.iter().map(|r| r.m_cd - r.m_true).collect();
    let sv: Vec<f64> = col(|r| r.cd_sigma_v);
    let valid_sv = sv.iter().filter(|v| !v.is_nan()).count();
    BiasSummary {
        replications: rows.len(),
        failed: rows.iter().filter(|r| r.error.is_some()).count(),
        corr_log_a_median: median(&col(|r| r.corr_log_a)),
        rmse_log_a_median: median(&col(|r| r.rmse_log_a)),
        eta_u_median: median(&col(|r| r.eta_u_median)),
        eta_sum_median: median(&col(|r| r.eta_sum_median)),
        m_true_mean: mean(&col(|r| r.m_true)),
        bias_np_mean: mean(&bias_np),
        bias_cd_mean: mean(&bias_cd),
        bias_np: Quantiles::of(&bias_np),
        bias_cd: Quantiles::of(&bias_cd),
        cd_sign_test: SignTest::negative_side(&bias_cd),
        cd_sigma_v_median: median(&sv),
        cd_sigma_v_above_truth: if valid_sv == 0 {
            f64::NAN
        } else {
            sv.iter().filter(|v| **v > 1.0 - sigma).count() as f64 / valid_sv as f64
        },
    }
}

/// Run `replications` independent replications (seed + r for replication r) in parallel.
pub fn run_bias_experiment(cfg: &ExperimentConfig, replications: usize) -> Result<BiasReport> {
    cfg.dgp.validate()?;
    if replications == 0 {
        return Err(Error::Validation("replications must be at least 1".into()));
    }
    let rows: Vec<ReplicationResult> = (0..replications).into_par_iter().map(|r| run_replication(cfg, r)).collect();
    for r in rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("replication {} failed: {}", r.replication, r.error.as_deref().unwrap_or(""));
    }
    let summary = summarize(&rows, cfg.dgp.sigma_u);
    Ok(BiasReport { config: cfg.clone(), rows, summary })
}
