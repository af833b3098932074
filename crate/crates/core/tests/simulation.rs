mod common;

use isoreg::closed_form::{closed_policy, ExplicitSpec};
use isoreg::error::Error;
use isoreg::hjb::{solve_general, Grid, SolveOptions};
use isoreg::network::min_cost_dispatch;
use isoreg::simulator::{
    deviation_test, simulate_regulated, simulate_unregulated, Deviation, EffortShift, PolicySource, SimConfig,
};
use isoreg::Plan;

use common::{chain3, scenario};

fn config(n_paths: usize, antithetic: bool) -> SimConfig {
    SimConfig { n_paths, dt: 1e-3, seed: 99, antithetic, stored_paths: 3 }
}

#[test]
fn unregulated_increment_matches_emissions() {
    let model = chain3();
    let plan = min_cost_dispatch(&model.network, &model.producers, 1e-9).unwrap();
    let emission: f64 = model.producers.iter().zip(&plan.q).map(|(p, &q)| p.emission(q)).sum();
    let b = simulate_unregulated(&model, &plan, &config(2000, false), 0.0).unwrap();
    let inc = b.pollution_increment();
    assert!(inc.agrees_with(emission * model.market.horizon, 3.0, 0.0), "{inc:?} vs {emission}");
}

#[test]
fn antithetic_pairs_at_least_halve_the_variance() {
    let model = chain3();
    let plan = min_cost_dispatch(&model.network, &model.producers, 1e-9).unwrap();
    let plain = simulate_unregulated(&model, &plan, &config(2000, false), 0.0).unwrap().pollution_increment();
    let anti = simulate_unregulated(&model, &plan, &config(2000, true), 0.0).unwrap().pollution_increment();
    assert!(anti.std_error.powi(2) <= 0.5 * plain.std_error.powi(2), "{anti:?} vs {plain:?}");
    assert_eq!(anti.n_paths, 2000);
}

#[test]
fn antithetic_needs_pairs() {
    let model = chain3();
    let plan = min_cost_dispatch(&model.network, &model.producers, 1e-9).unwrap();
    let r = simulate_unregulated(&model, &plan, &config(3, true), 0.0);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn forced_zero_effort_costs_the_quadrature_amount() {
    let s = scenario("prop5_toy.json");
    let model = &s.model;
    let plan = Plan { q: vec![1.0], phi: vec![] };
    let spec = ExplicitSpec::from_model(model, &plan.q).unwrap();
    let h = 1.0;
    let rho = model.market.rho;
    // with deterministic sensitivities E[U] = −exp(ρ ∫ h a*²/2 dt) after dropping effort
    let n = 2000;
    let simpson: f64 = (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            let a = closed_policy(&spec, t).unwrap().1[0];
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            w * 0.5 * h * a * a
        })
        .sum::<f64>()
        / (3.0 * n as f64);
    let drop = 1.0 - (rho * simpson).exp();
    let cfg = SimConfig { n_paths: 4000, dt: 1e-3, seed: 5, antithetic: false, stored_paths: 0 };
    let dev = Deviation { producer: 0, shift: EffortShift::Fixed(0.0), window: (0.0, 1.0) };
    let out = deviation_test(model, PolicySource::Closed { spec: &spec, plan: &plan }, &cfg, s.initial_pollution, dev).unwrap();
    assert!(out.difference.agrees_with(drop, 3.0, 2e-3 * drop.abs()), "{:?} vs {drop}", out.difference);
    assert!(out.difference.mean < 0.0);
}

#[test]
fn leaving_the_grid_fails_validation() {
    let s = scenario("prop5_toy.json");
    let model = &s.model;
    let l0 = s.initial_pollution;
    let grid = Grid::new(l0 - 0.2, l0 + 0.2, 41, 20000, 1.0).unwrap();
    let surface = solve_general(model, grid, &SolveOptions::default()).unwrap();
    let r = simulate_regulated(model, PolicySource::Surface(&surface), &config(50, false), l0);
    assert!(matches!(r, Err(Error::Validation(_))), "{r:?}");
}

#[test]
fn stored_paths_are_written_with_headers() {
    let s = scenario("two_node_toy.json");
    let plan = min_cost_dispatch(&s.model.network, &s.model.producers, 1e-9).unwrap();
    let b = simulate_unregulated(&s.model, &plan, &config(10, false), s.initial_pollution).unwrap();
    assert_eq!(b.trajectories.len(), 3);
    let dir = std::env::temp_dir().join(format!("isoreg-paths-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let file = dir.join("paths.csv");
    b.write_paths_csv(&file).unwrap();
    let text = std::fs::read_to_string(&file).unwrap();
    assert!(text.starts_with("path_id,t,L,Y_1,Y_2,a_1,a_2\n"));
    assert_eq!(text.lines().count(), 1 + 3 * b.times.len());
    std::fs::remove_dir_all(&dir).unwrap();
}
