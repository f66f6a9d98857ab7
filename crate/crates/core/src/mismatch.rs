//! Planner reallocation of unemployed workers across markets and the mismatch index
//! M = 1 − H / H*, where H* is the surrogate hires under the allocation that equalizes
//! marginal hires across markets.

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::MarketPanel;
use crate::elasticity::{marginal_hires_du, SurrogateCoefficients};
use crate::error::{Error, Result};
use crate::estimator::{ClipFlag, EfficiencySeries};

/// Inputs of one market in one period.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketState {
    pub market_id: String,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "U_obs")]
    pub u_obs: f64,
    #[serde(rename = "V")]
    pub v: f64,
}

impl MarketState {
    pub fn new(market_id: impl Into<String>, a: f64, u_obs: f64, v: f64) -> Self {
        MarketState { market_id: market_id.into(), a, u_obs, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerStatus {
    /// Concave surrogate, exact water-filling solution.
    Ok,
    /// Surrogate not concave in u; best of several projected-gradient runs.
    NonconcaveFallback,
    /// Exact solution, but some input efficiency was clipped at the traced range.
    Clipped,
}

impl PlannerStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlannerStatus::Ok => "ok",
            PlannerStatus::NonconcaveFallback => "nonconcave_fallback",
            PlannerStatus::Clipped => "clipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannerSolution {
    pub allocation: Vec<f64>,
    /// Common marginal value of an unemployed worker at the optimum.
    pub multiplier: f64,
    #[serde(rename = "H_star")]
    pub h_star: f64,
    #[serde(rename = "H_obs")]
    pub h_obs: f64,
    pub index: f64,
    pub kkt_residual: f64,
    pub status: PlannerStatus,
}

/// Optimality certificate for an allocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    pub multiplier: f64,
    /// Largest |marginal − multiplier| over markets with positive allocation.
    pub interior_deviation: f64,
    /// Largest excess of a zero-allocation market's marginal over the multiplier.
    pub corner_violation: f64,
    /// |Σ u* − Σ u_obs| / Σ u_obs.
    pub feasibility_gap: f64,
    pub residual: f64,
}

fn total_hires(states: &[MarketState], coeffs: &SurrogateCoefficients, alloc: &[f64]) -> f64 {
    states.iter().zip(alloc).map(|(s, &u)| coeffs.value(s.a * u, s.v)).sum()
}

fn marginals(states: &[MarketState], coeffs: &SurrogateCoefficients, alloc: &[f64]) -> Vec<f64> {
    states.iter().zip(alloc).map(|(s, &u)| marginal_hires_du(coeffs, s.a, u, s.v)).collect()
}

fn validate_states(states: &[MarketState]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Domain("planner needs at least one market".into()));
    }
    for s in states {
        if !(s.a > 0.0 && s.v > 0.0 && s.u_obs >= 0.0) {
            return Err(Error::Domain(format!("invalid state for market `{}`", s.market_id)));
        }
    }
    let total: f64 = states.iter().map(|s| s.u_obs).sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Domain(format!("total unemployed must be positive, got {total}")));
    }
    Ok(total)
}

/// Recompute marginals at the solution and certify the equal-marginal conditions.
pub fn kkt_report(solution: &PlannerSolution, states: &[MarketState], coeffs: &SurrogateCoefficients) -> KktReport {
    let total: f64 = states.iter().map(|s| s.u_obs).sum();
    let alloc = &solution.allocation;
    let m = marginals(states, coeffs, alloc);
    let interior_tol = 1e-12 * total;
    let lambda = if solution.multiplier.is_finite() {
        solution.multiplier
    } else {
        estimate_multiplier(&m, alloc, interior_tol)
    };
    let mut interior_deviation = 0.0f64;
    let mut corner_violation = 0.0f64;
    for (mk, &u) in m.iter().zip(alloc) {
        if u > interior_tol {
            interior_deviation = interior_deviation.max((mk - lambda).abs());
        } else {
            corner_violation = corner_violation.max(mk - lambda);
        }
    }
    let feasibility_gap = (alloc.iter().sum::<f64>() - total).abs() / total;
    KktReport {
        multiplier: lambda,
        interior_deviation,
        corner_violation,
        feasibility_gap,
        residual: interior_deviation.max(corner_violation),
    }
}

fn estimate_multiplier(m: &[f64], alloc: &[f64], interior_tol: f64) -> f64 {
    let interior: Vec<f64> = m.iter().zip(alloc).filter(|(_, &u)| u > interior_tol).map(|(&mk, _)| mk).collect();
    if interior.is_empty() {
        m.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        interior.iter().sum::<f64>() / interior.len() as f64
    }
}

/// Maximize Σ m̂(A_ℓ u_ℓ, V_ℓ) subject to Σ u_ℓ = Σ u_obs and u ≥ 0.
pub fn planner_allocate(states: &[MarketState], coeffs: &SurrogateCoefficients) -> Result<PlannerSolution> {
    let total = validate_states(states)?;
    let (allocation, multiplier, status) = if states.len() == 1 {
        let m = marginal_hires_du(coeffs, states[0].a, total, states[0].v);
        (vec![total], m, PlannerStatus::Ok)
    } else if coeffs.beta4 < 0.0 {
        let (alloc, lambda) = water_fill(states, coeffs, total);
        (alloc, lambda, PlannerStatus::Ok)
    } else {
        let alloc = projected_gradient(states, coeffs, total);
        (alloc, f64::NAN, PlannerStatus::NonconcaveFallback)
    };
    let observed: Vec<f64> = states.iter().map(|s| s.u_obs).collect();
    let h_star = total_hires(states, coeffs, &allocation);
    let h_obs = total_hires(states, coeffs, &observed);
    let mut solution = PlannerSolution {
        allocation,
        multiplier,
        h_star,
        h_obs,
        index: 1.0 - h_obs / h_star,
        kkt_residual: 0.0,
        status,
    };
    let report = kkt_report(&solution, states, coeffs);
    solution.multiplier = report.multiplier;
    solution.kkt_residual = report.residual;
    Ok(solution)
}

/// Exact solution for a strictly concave surrogate: u_ℓ(λ) = max(0, (q_ℓ − λ)/κ_ℓ) with
/// q_ℓ the marginal at zero and κ_ℓ = −2β₄A_ℓ², λ found by bisection and then solved in
/// closed form on the identified active set.
fn water_fill(states: &[MarketState], coeffs: &SurrogateCoefficients, total: f64) -> (Vec<f64>, f64) {
    let q: Vec<f64> = states.iter().map(|s| s.a * (coeffs.beta1 + coeffs.beta2 * s.v)).collect();
    let kappa: Vec<f64> = states.iter().map(|s| -2.0 * coeffs.beta4 * s.a * s.a).collect();
    let alloc_at = |lambda: f64| -> Vec<f64> { q.iter().zip(&kappa).map(|(&q, &k)| ((q - lambda) / k).max(0.0)).collect() };
    let sum_at = |lambda: f64| alloc_at(lambda).iter().sum::<f64>();

    let mut hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = q.iter().zip(&kappa).map(|(&q, &k)| q - k * total).fold(f64::INFINITY, f64::min);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let s = sum_at(mid);
        if (s - total).abs() <= 1e-10 * total || mid == lo || mid == hi {
            lo = mid;
            hi = mid;
            break;
        }
        if s > total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut lambda = 0.5 * (lo + hi);

    // Closed-form multiplier on the active set {q_ℓ > λ}.
    let active: Vec<usize> = (0..q.len()).filter(|&l| q[l] > lambda).collect();
    if !active.is_empty() {
        let num: f64 = active.iter().map(|&l| q[l] / kappa[l]).sum::<f64>() - total;
        let den: f64 = active.iter().map(|&l| 1.0 / kappa[l]).sum();
        let exact = num / den;
        let consistent = (0..q.len()).all(|l| if active.contains(&l) { q[l] > exact } else { q[l] <= exact });
        if consistent {
            lambda = exact;
        }
    }
    let mut alloc = alloc_at(lambda);
    // Absorb rounding in the largest allocation so the budget holds to machine precision.
    let gap = total - alloc.iter().sum::<f64>();
    if let Some((k, _)) = alloc.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
        alloc[k] = (alloc[k] + gap).max(0.0);
    }
    (alloc, lambda)
}

/// Euclidean projection onto {u ≥ 0, Σu = total}.
pub fn project_simplex(y: &[f64], total: f64) -> Vec<f64> {
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - total) / (k + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    let mut u: Vec<f64> = y.iter().map(|&v| (v - theta).max(0.0)).collect();
    let gap = total - u.iter().sum::<f64>();
    if let Some((k, _)) = u.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
        u[k] = (u[k] + gap).max(0.0);
    }
    u
}

/// Multi-start projected-gradient ascent used when the surrogate is not concave in u.
fn projected_gradient(states: &[MarketState], coeffs: &SurrogateCoefficients, total: f64) -> Vec<f64> {
    const STARTS: usize = 16;
    const ITERS: usize = 2000;
    let l = states.len();
    let curvature = states.iter().map(|s| (2.0 * coeffs.beta4 * s.a * s.a).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + l as u64);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..STARTS {
        let draws: Vec<f64> = (0..l).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = draws.iter().sum();
        let mut u: Vec<f64> = draws.iter().map(|d| total * d / s).collect();
        for _ in 0..ITERS {
            let g = marginals(states, coeffs, &u);
            let gmax = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let step = if curvature > 0.0 { 1.0 / curvature } else { 0.1 * total / gmax.max(1e-300) };
            let next = project_simplex(&u.iter().zip(&g).map(|(u, g)| u + step * g).collect::<Vec<_>>(), total);
            let moved = next.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            u = next;
            if moved <= 1e-14 * total {
                break;
            }
        }
        let value = total_hires(states, coeffs, &u);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, u));
        }
    }
    best.map(|(_, u)| u).unwrap_or_default()
}

/// Cobb-Douglas baseline m = A·u^σ·v^(1−σ): the planner allocation is
/// u*_ℓ ∝ A_ℓ^(1/(1−σ))·V_ℓ (A ≡ 1 when `heterogeneous_a` is false).
pub fn cd_mismatch_index(states: &[MarketState], sigma: f64, heterogeneous_a: bool) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::Domain(format!("Cobb-Douglas elasticity must lie in (0, 1), got {sigma}")));
    }
    let total = validate_states(states)?;
    let eff = |s: &MarketState| if heterogeneous_a { s.a } else { 1.0 };
    let weights: Vec<f64> = states.iter().map(|s| eff(s).powf(1.0 / (1.0 - sigma)) * s.v).collect();
    let wsum: f64 = weights.iter().sum();
    let m = |s: &MarketState, u: f64| eff(s) * u.powf(sigma) * s.v.powf(1.0 - sigma);
    let h_obs: f64 = states.iter().map(|s| m(s, s.u_obs)).sum();
    let h_star: f64 = states.iter().zip(&weights).map(|(s, w)| m(s, total * w / wsum)).sum();
    Ok(1.0 - h_obs / h_star)
}

/// One period of a mismatch series.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodMismatch {
    pub period: i64,
    pub states: Vec<MarketState>,
    /// `None` when some market is unobserved in this period.
    pub solution: Option<PlannerSolution>,
}

impl PeriodMismatch {
    pub fn status_str(&self) -> &'static str {
        self.solution.as_ref().map_or("skipped_missing_market", |s| s.status.as_str())
    }
}

/// Group the panel into per-period market states (with a flag for clipped efficiencies).
fn period_states(panel: &MarketPanel, efficiency: &EfficiencySeries) -> Result<BTreeMap<i64, (Vec<MarketState>, bool)>> {
    efficiency.check_alignment(panel)?;
    let mut by_period: BTreeMap<i64, (Vec<MarketState>, bool)> = BTreeMap::new();
    for (o, e) in panel.observations().iter().zip(&efficiency.entries) {
        let slot = by_period.entry(o.period).or_default();
        slot.0.push(MarketState::new(o.market_id.clone(), e.a, o.unemployed, o.vacancies));
        slot.1 |= e.flag != ClipFlag::Ok;
    }
    Ok(by_period)
}

/// Solve the planner problem in every period where all markets are observed.
pub fn mismatch_series(
    panel: &MarketPanel,
    efficiency: &EfficiencySeries,
    coeffs: &SurrogateCoefficients,
) -> Result<Vec<PeriodMismatch>> {
    let n_markets = panel.markets().len();
    let grouped: Vec<(i64, (Vec<MarketState>, bool))> = period_states(panel, efficiency)?.into_iter().collect();
    let out = grouped
        .into_par_iter()
        .map(|(period, (states, clipped))| {
            if states.len() < n_markets {
                log::warn!("period {period}: {} of {n_markets} markets observed, skipped", states.len());
                return Ok(PeriodMismatch { period, states, solution: None });
            }
            let mut solution = planner_allocate(&states, coeffs)?;
            if clipped && solution.status == PlannerStatus::Ok {
                solution.status = PlannerStatus::Clipped;
            }
            Ok(PeriodMismatch { period, states, solution: Some(solution) })
        })
        .collect::<Result<Vec<_>>>()?;
    let fallbacks = out
        .iter()
        .filter(|p| p.solution.as_ref().is_some_and(|s| s.status == PlannerStatus::NonconcaveFallback))
        .count();
    if fallbacks > 0 {
        log::warn!("surrogate is not concave in unemployment; {fallbacks} periods used the fallback solver");
    }
    Ok(out)
}

/// Cobb-Douglas baseline index per period (periods with missing markets are skipped).
pub fn cd_mismatch_series(
    panel: &MarketPanel,
    efficiency: &EfficiencySeries,
    sigma: f64,
    heterogeneous_a: bool,
) -> Result<Vec<(i64, f64)>> {
    let n_markets = panel.markets().len();
    period_states(panel, efficiency)?
        .into_iter()
        .filter(|(_, (states, _))| states.len() == n_markets)
        .map(|(period, (states, _))| Ok((period, cd_mismatch_index(&states, sigma, heterogeneous_a)?)))
        .collect()
}

/// CSV `period,index,H_obs,H_star,status,kkt_residual`.
pub fn write_mismatch_csv<W: Write>(series: &[PeriodMismatch], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["period", "index", "H_obs", "H_star", "status", "kkt_residual"])?;
    for p in series {
        let (index, h_obs, h_star, kkt) = match &p.solution {
            Some(s) => (s.index.to_string(), s.h_obs.to_string(), s.h_star.to_string(), s.kkt_residual.to_string()),
            None => Default::default(),
        };
        w.write_record([p.period.to_string(), index, h_obs, h_star, p.status_str().to_string(), kkt])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `period,market_id,A,U_obs,V,U_star`.
pub fn write_allocations_csv<W: Write>(series: &[PeriodMismatch], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["period", "market_id", "A", "U_obs", "V", "U_star"])?;
    for p in series {
        for (k, s) in p.states.iter().enumerate() {
            let star = p.solution.as_ref().map_or(String::new(), |sol| sol.allocation[k].to_string());
            w.write_record([p.period.to_string(), s.market_id.clone(), s.a.to_string(), s.u_obs.to_string(), s.v.to_string(), star])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn concave() -> SurrogateCoefficients {
        SurrogateCoefficients::from_betas([1.2, 0.3, 0.4, -0.25, -0.05])
    }

    #[test]
    fn single_market_keeps_everyone() {
        let s = [MarketState::new("a", 1.3, 2.0, 1.0)];
        let sol = planner_allocate(&s, &concave()).unwrap();
        assert_eq!(sol.allocation, vec![2.0]);
        assert_eq!(sol.index, 0.0);
    }

    #[test]
    fn symmetric_markets_unchanged() {
        let s = [MarketState::new("a", 1.1, 0.5, 0.9), MarketState::new("b", 1.1, 0.5, 0.9)];
        let sol = planner_allocate(&s, &concave()).unwrap();
        assert_abs_diff_eq!(sol.allocation[0], 0.5, epsilon = 1e-12);
        assert!(sol.index.abs() <= 1e-9);
        assert!(sol.kkt_residual <= 1e-8);
    }

    #[test]
    fn empty_or_zero_total_is_domain_error() {
        assert!(matches!(planner_allocate(&[], &concave()), Err(Error::Domain(_))));
        let s = [MarketState::new("a", 1.0, 0.0, 1.0), MarketState::new("b", 1.0, 0.0, 1.0)];
        assert!(matches!(planner_allocate(&s, &concave()), Err(Error::Domain(_))));
    }

    #[test]
    fn corner_market_gets_nothing() {
        // Market b has a much lower marginal at zero than a has at the full budget.
        let c = SurrogateCoefficients::from_betas([1.0, 0.0, 0.0, -0.01, 0.0]);
        let s = [MarketState::new("a", 1.0, 0.5, 1.0), MarketState::new("b", 0.2, 0.5, 1.0)];
        let sol = planner_allocate(&s, &c).unwrap();
        assert_eq!(sol.allocation[1], 0.0);
        assert_abs_diff_eq!(sol.allocation[0], 1.0, epsilon = 1e-15);
        let rep = kkt_report(&sol, &s, &c);
        assert!(rep.corner_violation <= 0.0 && rep.interior_deviation <= 1e-12);
    }

    #[test]
    fn nonconcave_fallback_goes_to_a_vertex() {
        let c = SurrogateCoefficients::from_betas([1.0, 0.0, 0.0, 0.1, 0.0]);
        let s = [MarketState::new("a", 1.0, 0.5, 1.0), MarketState::new("b", 1.5, 0.5, 1.0)];
        let sol = planner_allocate(&s, &c).unwrap();
        assert_eq!(sol.status, PlannerStatus::NonconcaveFallback);
        assert_abs_diff_eq!(sol.allocation[1], 1.0, epsilon = 1e-12);
        assert!((sol.allocation.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cd_two_market_closed_form() {
        let s = [MarketState::new("a", 1.0, 0.9, 1.0), MarketState::new("b", 1.0, 0.1, 1.0)];
        let m = cd_mismatch_index(&s, 0.5, false).unwrap();
        let expected = 1.0 - (0.9f64.sqrt() + 0.1f64.sqrt()) / (2.0 * 0.5f64.sqrt());
        assert_abs_diff_eq!(m, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(m, 0.105_573, epsilon = 1e-6);
    }

    #[test]
    fn cd_proportional_allocation_is_optimal() {
        let s = [MarketState::new("a", 1.0, 2.0, 1.0), MarketState::new("b", 1.0, 6.0, 3.0)];
        assert_abs_diff_eq!(cd_mismatch_index(&s, 0.7, false).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(cd_mismatch_index(&s, 1.0, false), Err(Error::Domain(_))));
    }

    #[test]
    fn perturbation_lowers_objective() {
        let c = concave();
        let s = [
            MarketState::new("a", 1.4, 0.2, 0.7),
            MarketState::new("b", 0.8, 0.5, 1.1),
            MarketState::new("c", 1.0, 0.3, 1.3),
        ];
        let sol = planner_allocate(&s, &c).unwrap();
        let best = total_hires(&s, &c, &sol.allocation);
        for (i, j) in (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).filter(|(i, j)| i != j) {
            let mut u = sol.allocation.clone();
            if u[j] == 0.0 {
                continue;
            }
            let d = 0.01 * u[j];
            u[i] += d;
            u[j] -= d;
            assert!(total_hires(&s, &c, &u) < best, "moving {d} from {j} to {i}");
        }
    }

    #[test]
    fn simplex_projection() {
        let u = project_simplex(&[0.5, -1.0, 2.0], 1.0);
        assert_abs_diff_eq!(u.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(u.iter().all(|&x| x >= 0.0));
        assert_eq!(project_simplex(&[0.2, 0.8], 1.0), vec![0.2, 0.8]);
    }

    proptest! {
        #[test]
        fn water_filling_beats_random_allocations(
            seed in 0u64..1000,
            a in prop::collection::vec(0.5f64..2.0, 2..5),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let states: Vec<MarketState> = a.iter().enumerate()
                .map(|(k, &a)| MarketState::new(format!("m{k}"), a, rng.random_range(0.1..1.0), rng.random_range(0.5..1.5)))
                .collect();
            let c = SurrogateCoefficients::from_betas([1.0, 0.2, 0.5, -rng.random_range(0.05..0.5), -0.1]);
            let sol = planner_allocate(&states, &c).unwrap();
            let total: f64 = states.iter().map(|s| s.u_obs).sum();
            prop_assert!((sol.allocation.iter().sum::<f64>() - total).abs() <= 1e-9 * total);
            prop_assert!(sol.allocation.iter().all(|&u| u >= 0.0));
            prop_assert!(sol.kkt_residual <= 1e-8);
            prop_assert!(sol.index >= -1e-9);
            let best = total_hires(&states, &c, &sol.allocation);
            for _ in 0..1000 {
                let d: Vec<f64> = (0..states.len()).map(|_| Exp1.sample(&mut rng)).collect();
                let s: f64 = d.iter().sum();
                let u: Vec<f64> = d.iter().map(|x| total * x / s).collect();
                prop_assert!(total_hires(&states, &c, &u) <= best + 1e-12);
            }
        }
    }
}
