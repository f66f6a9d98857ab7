//! Estimator checks against the known truth of the simulated Cobb-Douglas design.

use matchkit::data::{BaseSpec, MarketPanel, Observation, ScalePolicy};
use matchkit::estimator::{conditional_quantile, estimate_efficiency, evaluate_matching_function, ClipFlag, KernelConfig};
use matchkit::linalg::median;
use matchkit::simulation::{generate_cd_dgp, DgpConfig, SimulatedPanel, MATCHING_LEVEL};

fn recovery(seed: u64) -> SimulatedPanel {
    generate_cd_dgp(&DgpConfig { seed, ..DgpConfig::recovery() }).unwrap()
}

/// True hires in the scaled units of `scaled` at efficiency `a` (raw units).
fn true_hires(sim: &SimulatedPanel, scaled: &MarketPanel, a: f64, u: f64, v: f64) -> f64 {
    let s = scaled.scale();
    let sigma = sim.sigma_u;
    MATCHING_LEVEL * (a * u * s.u).powf(sigma) * (v * s.v).powf(1.0 - sigma) / s.h
}

#[test]
fn conditional_median_matches_resampling_oracle() {
    let sim = recovery(3);
    let cfg = KernelConfig::default();
    let est = estimate_efficiency(&sim.panel, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &cfg).unwrap();
    let obs = est.panel.observations();
    for &t in &[50usize, 200, 400] {
        let (u, v) = (obs[t].unemployed, obs[t].vacancies);
        // Efficiency is independent of (U, V): resample its empirical law through the true m.
        let draws: Vec<f64> = sim.true_a.iter().map(|&a| true_hires(&sim, &est.panel, a, u, v)).collect();
        let oracle = median(&draws);
        let h = conditional_quantile(&est.sample, 0.5, u, v, &cfg).unwrap();
        assert!((h / oracle - 1.0).abs() <= 0.02, "t={t} h={h} oracle={oracle}");
    }
}

#[test]
fn base_percentile_matches_efficiency_rank() {
    let sim = recovery(4);
    let est = estimate_efficiency(&sim.panel, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &KernelConfig::default()).unwrap();
    let a0 = sim.true_a[est.base.index];
    let oracle = sim.true_a.iter().filter(|&&a| a <= a0).count() as f64 / sim.true_a.len() as f64;
    let f = est.distribution.cdf_at(1.0, est.base.u0).unwrap();
    assert!((f - oracle).abs() <= 0.1, "F={f} oracle={oracle}");
    assert!((f - 0.5).abs() <= 0.15);
}

#[test]
fn recovered_matching_function_reproduces_hires() {
    let sim = recovery(5);
    let cfg = KernelConfig::default();
    let est = estimate_efficiency(&sim.panel, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &cfg).unwrap();
    let a_base = sim.true_a[est.base.index];
    let errors: Vec<f64> = est
        .panel
        .observations()
        .iter()
        .zip(&sim.true_a)
        .step_by(7)
        .filter_map(|(o, &a)| {
            evaluate_matching_function(&est.sample, &est.distribution, a / a_base, o.unemployed, o.vacancies, &cfg)
                .ok()
                .map(|h| (h / o.hires - 1.0).abs())
        })
        .collect();
    assert!(errors.len() > 60);
    assert!(median(&errors) <= 0.05, "median relative error {}", median(&errors));
}

#[test]
fn efficiency_is_invariant_to_panel_scale() {
    let sim = recovery(6);
    let scaled = MarketPanel::new(
        sim.panel
            .observations()
            .iter()
            .map(|o| Observation {
                hires: 3.7 * o.hires,
                unemployed: 3.7 * o.unemployed,
                vacancies: 3.7 * o.vacancies,
                ..o.clone()
            })
            .collect(),
    )
    .unwrap();
    let cfg = KernelConfig::default();
    let a = estimate_efficiency(&sim.panel, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &cfg).unwrap();
    let b = estimate_efficiency(&scaled, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &cfg).unwrap();
    for (x, y) in a.series.values().iter().zip(b.series.values()) {
        assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
    }
}

#[test]
fn inversion_round_trip_within_one_grid_step() {
    let sim = recovery(8);
    let est = estimate_efficiency(&sim.panel, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &KernelConfig::default()).unwrap();
    let dist = &est.distribution;
    let step = (dist.a_grid[1] / dist.a_grid[0]).ln();
    let mut checked = 0;
    for (j, col) in dist.columns.iter().enumerate() {
        let u = dist.u_grid[j];
        for i in col.lo + 1..col.hi {
            let p = col.values[i - col.lo];
            // Only strictly increasing interior cells have a unique preimage.
            if !(p > col.values[i - col.lo - 1] && p < col.values[i - col.lo + 1]) {
                continue;
            }
            let (la, flag) = dist.inverse_log(p, u);
            assert_eq!(flag, ClipFlag::Ok);
            assert!((la - dist.a_grid[i].ln()).abs() <= step + 1e-12, "cell ({i},{j})");
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn traced_columns_are_distribution_functions() {
    let sim = recovery(9);
    let est = estimate_efficiency(&sim.panel, &BaseSpec::FirstPeriod, ScalePolicy::MeanOne, &KernelConfig::default()).unwrap();
    for col in &est.distribution.columns {
        assert!(col.values.iter().all(|f| (0.0..=1.0).contains(f)));
        assert!(col.values.windows(2).all(|w| w[0] <= w[1]));
        assert!(col.values[0] <= 0.05 && *col.values.last().unwrap() >= 0.95);
    }
}

#[test]
fn base_point_is_one_for_any_base() {
    let sim = recovery(10);
    let spec: BaseSpec = "m00:123".parse().unwrap();
    let est = estimate_efficiency(&sim.panel, &spec, ScalePolicy::MeanOne, &KernelConfig::default()).unwrap();
    let i = est.panel.position("m00", 123).unwrap();
    assert!((est.series.entries[i].a - 1.0).abs() <= 1e-9);
}
