use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use isoreg::closed_form::ExplicitSpec;
use isoreg::config::Scenario;
use isoreg::constant_plan::{optimize_vd, reservation_offset, write_candidates_csv, OptimizeOptions};
use isoreg::hjb::{solve_fixed_plan, solve_general, value_at, Grid, SolveOptions, ValueSurface};
use isoreg::network::{balance_residual, induced_production, is_feasible, min_cost_dispatch_with, production_cost, DEFAULT_FEASIBILITY_TOL};
use isoreg::simulator::{
    estimate_social_cost, simulate_regulated, simulate_unregulated, verify_agent_value, write_summary_csv, CostEstimate,
    PathBundle, PolicySource, SimConfig,
};
use isoreg::{Error, Model, Plan};

use crate::{Cli, Command, GridArgs, PolicyKind, SweepParam};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Dispatch { config } => dispatch(&load(config)?, &cli.out),
        Command::Solve { config, fixed_plan, grid, t_stride, ell_stride } => {
            solve(&load(config)?, &cli.out, fixed_plan.as_deref(), grid, *t_stride, *ell_stride)
        }
        Command::Simulate { config, policy, plan, paths, seed, dt, grid } => {
            let s = load(config)?;
            let mut cfg = sim_config(&s);
            cfg.n_paths = paths.unwrap_or(cfg.n_paths);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.dt = dt.unwrap_or(cfg.dt);
            simulate(&s, &cli.out, *policy, plan, &cfg, grid)
        }
        Command::ConstantPlan { config, grid } => constant_plan(&load(config)?, &cli.out, grid),
        Command::Sensitivity { config, param, values, paths, seed, grid } => {
            sensitivity(&load(config)?, &cli.out, *param, values, *paths, *seed, grid)
        }
    }
}

fn load(path: &Path) -> Result<Scenario> {
    Ok(Scenario::load(path)?)
}

fn out_file(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir.join(name))
}

fn sim_config(s: &Scenario) -> SimConfig {
    SimConfig {
        n_paths: s.simulation.n_paths,
        dt: s.sim_dt(),
        seed: s.simulation.seed,
        antithetic: s.simulation.antithetic,
        stored_paths: s.simulation.stored_paths,
    }
}

fn dispatch_plan(s: &Scenario) -> Result<Plan> {
    Ok(min_cost_dispatch_with(&s.model.network, &s.model.producers, DEFAULT_FEASIBILITY_TOL, &s.solver.search_options())?)
}

/// `dispatch` or comma-separated edge flows.
fn parse_plan(s: &Scenario, text: &str) -> Result<Plan> {
    if text.trim() == "dispatch" {
        return dispatch_plan(s);
    }
    let phi = text
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Input(format!("flow {t:?} is not a number"))))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let q = induced_production(&s.model.network, &phi)?;
    let plan = Plan { q, phi };
    if !is_feasible(&s.model.network, &plan, DEFAULT_FEASIBILITY_TOL) {
        bail!(Error::Infeasible(format!("flows {:?} violate a line limit or capacity", plan.phi)));
    }
    Ok(plan)
}

/// Default grid for the scenario with `key=value` overrides applied. The time
/// step follows the stability bound unless `n_t` is given explicitly.
fn build_grid(s: &Scenario, model: &Model, args: &GridArgs) -> Result<Grid> {
    let mut n_ell = s.solver.n_ell;
    let (mut n_t, mut ell_min, mut ell_max) = (None, None, None);
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid override {item:?} is not key=value")))?;
        let bad = || Error::Config(format!("grid override {item:?} has an invalid value"));
        match key.trim() {
            "n_ell" => n_ell = value.trim().parse().map_err(|_| bad())?,
            "n_t" => n_t = Some(value.trim().parse::<usize>().map_err(|_| bad())?),
            "ell_min" => ell_min = Some(value.trim().parse::<f64>().map_err(|_| bad())?),
            "ell_max" => ell_max = Some(value.trim().parse::<f64>().map_err(|_| bad())?),
            other => return Err(Error::Config(format!("unknown grid key {other:?}")).into()),
        }
    }
    let base = Grid::for_model(model, s.initial_pollution, n_ell)?;
    let mut grid = Grid::new(ell_min.unwrap_or(base.ell_min), ell_max.unwrap_or(base.ell_max), n_ell, 1, base.horizon)?;
    grid.n_t = match n_t {
        Some(n) => n,
        None => {
            let bound = grid.stability_bound(model.max_drift(), model.market.sigma);
            (grid.horizon / bound).ceil().max(1.0) as usize
        }
    };
    let grid = Grid::new(grid.ell_min, grid.ell_max, grid.n_ell, grid.n_t, grid.horizon)?;
    grid.check_stability(model.max_drift(), model.market.sigma)?;
    if !grid.contains(0.0, s.initial_pollution) {
        bail!(Error::Config(format!(
            "initial pollution {} lies outside the grid [{}, {}]",
            s.initial_pollution, grid.ell_min, grid.ell_max
        )));
    }
    Ok(grid)
}

fn solve_options(s: &Scenario) -> SolveOptions {
    SolveOptions { search: s.solver.search_options(), alpha_step: Some(s.alpha_step()), store_policy: true }
}

fn write_pairs(path: &Path, rows: &[(&str, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "value"])?;
    for (k, v) in rows {
        w.write_record([*k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

fn dispatch(s: &Scenario, out: &Path) -> Result<()> {
    let model = &s.model;
    let plan = dispatch_plan(s)?;
    let residual = balance_residual(&model.network, &plan)?;
    let mut w = csv::Writer::from_path(out_file(out, "dispatch_nodes.csv")?)?;
    w.write_record(["node", "demand", "q", "production_cost", "emission", "balance_residual"])?;
    println!("{:>6} {:>14} {:>14} {:>16} {:>14}", "node", "demand", "q", "cost/h", "emission/h");
    for (i, node) in model.network.nodes.iter().enumerate() {
        let p = &model.producers[i];
        let (q, c, e) = (plan.q[i], p.production_cost(plan.q[i]), p.emission(plan.q[i]));
        println!("{:>6} {:>14.4} {:>14.4} {:>16.4} {:>14.4}", node.id, node.demand, q, c, e);
        w.write_record([node.id.to_string(), node.demand.to_string(), q.to_string(), c.to_string(), e.to_string(), residual[i].to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_file(out, "dispatch_edges.csv")?)?;
    w.write_record(["edge", "from", "to", "phi", "loss"])?;
    println!("{:>6} {:>6} {:>6} {:>14} {:>14}", "edge", "from", "to", "flow", "loss");
    for (k, e) in model.network.edges.iter().enumerate() {
        let loss = e.resistance * plan.phi[k] * plan.phi[k];
        println!("{:>6} {:>6} {:>6} {:>14.4} {:>14.6}", k + 1, e.from, e.to, plan.phi[k], loss);
        w.write_record([(k + 1).to_string(), e.from.to_string(), e.to.to_string(), plan.phi[k].to_string(), loss.to_string()])?;
    }
    w.flush()?;
    let cost = production_cost(&model.producers, &plan.q);
    let max_res = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    println!("production cost per hour: {cost:.6}");
    println!("production cost over the horizon: {:.6e}", cost * model.market.horizon);
    println!("max balance residual: {max_res:.3e}");
    Ok(())
}

fn solve(s: &Scenario, out: &Path, fixed: Option<&str>, grid_args: &GridArgs, t_stride: Option<usize>, ell_stride: usize) -> Result<()> {
    let model = &s.model;
    let grid = build_grid(s, model, grid_args)?;
    let start = Instant::now();
    let surface = match fixed {
        Some(text) => solve_fixed_plan(model, &parse_plan(s, text)?, grid, true)?,
        None => solve_general(model, grid, &solve_options(s))?,
    };
    let elapsed = start.elapsed().as_secs_f64();
    let (v0, slope0) = value_at(&surface, 0.0, s.initial_pollution)?;
    let offset = reservation_offset(model);
    let stride = t_stride.unwrap_or_else(|| grid.n_t.div_ceil(200).max(1));
    surface.write_csv(&out_file(out, "surface.csv")?, stride, ell_stride.max(1))?;
    write_pairs(
        &out_file(out, "solve_summary.csv")?,
        &[
            ("v0", v0.to_string()),
            ("v_ell0", slope0.to_string()),
            ("reservation_offset", offset.to_string()),
            ("rho", model.market.rho.to_string()),
            ("sigma", model.market.sigma.to_string()),
            ("ell_min", grid.ell_min.to_string()),
            ("ell_max", grid.ell_max.to_string()),
            ("n_ell", grid.n_ell.to_string()),
            ("n_t", grid.n_t.to_string()),
            ("seconds", elapsed.to_string()),
        ],
    )?;
    println!("grid: ell in [{:.6e}, {:.6e}], n_ell = {}, n_t = {}", grid.ell_min, grid.ell_max, grid.n_ell, grid.n_t);
    println!("v(0, {}) = {v0:.8e}", s.initial_pollution);
    println!("v_ell(0, {}) = {slope0:.8e}", s.initial_pollution);
    println!(
        "computed with rho = {} (risk aversion) and reservation utilities {:?}; \
         the reservation levels add {offset:.6e} to the regulator's cost",
        model.market.rho, model.market.reservations
    );
    println!("solve time: {elapsed:.2} s");
    Ok(())
}

fn summary_rows(bundle: &PathBundle) -> Result<Vec<(String, CostEstimate)>> {
    let mut rows = vec![
        ("social_cost".to_string(), estimate_social_cost(bundle)),
        ("production_cost".to_string(), bundle.production_cost()),
        ("pollution_cost".to_string(), bundle.pollution_cost()),
        ("pollution_increment".to_string(), bundle.pollution_increment()),
    ];
    if bundle.regulated {
        rows.push((
            "total_payment".to_string(),
            bundle.estimate(|p| p.payments.iter().sum::<f64>()),
        ));
        for i in 0..bundle.initial_certainty.len() {
            rows.push((format!("agent_utility_{}", i + 1), verify_agent_value(bundle, i)?));
        }
    }
    Ok(rows)
}

fn policy_bundle(s: &Scenario, model: &Model, kind: PolicyKind, plan_text: &str, cfg: &SimConfig, grid_args: &GridArgs) -> Result<(PathBundle, Option<ValueSurface>)> {
    let l0 = s.initial_pollution;
    Ok(match kind {
        PolicyKind::Optimal => {
            let grid = build_grid(s, model, grid_args)?;
            let surface = solve_general(model, grid, &solve_options(s))?;
            let b = simulate_regulated(model, PolicySource::Surface(&surface), cfg, l0)?;
            (b, Some(surface))
        }
        PolicyKind::Fixed => {
            let grid = build_grid(s, model, grid_args)?;
            let surface = solve_fixed_plan(model, &parse_plan(s, plan_text)?, grid, true)?;
            let b = simulate_regulated(model, PolicySource::Surface(&surface), cfg, l0)?;
            (b, Some(surface))
        }
        PolicyKind::Closed => {
            let plan = parse_plan(s, plan_text)?;
            let spec = ExplicitSpec::from_model(model, &plan.q)?;
            (simulate_regulated(model, PolicySource::Closed { spec: &spec, plan: &plan }, cfg, l0)?, None)
        }
        PolicyKind::Unregulated => (simulate_unregulated(model, &parse_plan(s, plan_text)?, cfg, l0)?, None),
    })
}

fn simulate(s: &Scenario, out: &Path, kind: PolicyKind, plan_text: &str, cfg: &SimConfig, grid_args: &GridArgs) -> Result<()> {
    let (bundle, surface) = policy_bundle(s, &s.model, kind, plan_text, cfg, grid_args)?;
    if let Some(surface) = &surface {
        let (v0, _) = value_at(surface, 0.0, s.initial_pollution)?;
        println!("v(0, {}) = {v0:.8e}", s.initial_pollution);
    }
    let rows = summary_rows(&bundle)?;
    bundle.write_paths_csv(&out_file(out, "paths.csv")?)?;
    write_summary_csv(&rows, &out_file(out, "simulation_summary.csv")?)?;
    println!("{} paths, dt = {}, seed = {}", bundle.n_paths(), cfg.dt, cfg.seed);
    for (name, e) in &rows {
        println!("{name:>22}: {:.8e} ± {:.3e}", e.mean, e.std_error);
    }
    if bundle.regulated {
        println!("{:>22}: {:.4}%", "steps off the grid", 100.0 * bundle.clamped_share());
    }
    Ok(())
}

fn constant_plan(s: &Scenario, out: &Path, grid_args: &GridArgs) -> Result<()> {
    let model = &s.model;
    let grid = build_grid(s, model, grid_args)?;
    let c = s.constant_plan;
    let options = OptimizeOptions {
        resolution: c.resolution,
        refine_starts: c.refine_starts,
        finalists: c.finalists,
        ..OptimizeOptions::default()
    };
    let start = Instant::now();
    let result = optimize_vd(model, grid, s.initial_pollution, &options)?;
    write_candidates_csv(&result, &out_file(out, "constant_plan_candidates.csv")?)?;
    let mut rows: Vec<(String, String)> = Vec::new();
    rows.extend(result.plan.q.iter().enumerate().map(|(i, q)| (format!("q_{}", i + 1), q.to_string())));
    rows.extend(result.plan.phi.iter().enumerate().map(|(e, p)| (format!("phi_{}", e + 1), p.to_string())));
    rows.push(("value".into(), result.value.to_string()));
    rows.push(("reservation_offset".into(), reservation_offset(model).to_string()));
    rows.push(("candidates".into(), result.candidates.len().to_string()));
    let pairs: Vec<(&str, String)> = rows.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_pairs(&out_file(out, "constant_plan.csv")?, &pairs)?;
    println!("best constant plan: q = {:?}, phi = {:?}", result.plan.q, result.plan.phi);
    println!("value at (0, {}) = {:.8e}", s.initial_pollution, result.value);
    println!("{} candidates evaluated in {:.2} s", result.candidates.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn sensitivity(
    s: &Scenario,
    out: &Path,
    param: SweepParam,
    values: &[f64],
    paths: usize,
    seed: Option<u64>,
    grid_args: &GridArgs,
) -> Result<()> {
    if values.is_empty() {
        bail!(Error::Input("the sensitivity sweep needs at least one value".into()));
    }
    let name = match param {
        SweepParam::Sigma => "sigma",
        SweepParam::Rho => "rho",
    };
    let n = s.model.n();
    let mut cfg = sim_config(s);
    cfg.n_paths = paths;
    cfg.stored_paths = paths;
    cfg.seed = seed.unwrap_or(cfg.seed);

    let mut summary = csv::Writer::from_path(out_file(out, "sensitivity_summary.csv")?)?;
    let mut header = vec!["param".to_string(), "value".into(), "v0".into(), "social_cost".into(), "social_cost_se".into(), "pollution_increment".into()];
    header.extend((1..=n).map(|i| format!("mean_effort_{i}")));
    header.extend((1..=n).map(|i| format!("q0_{i}")));
    header.extend((1..=s.model.network.n_edges()).map(|e| format!("phi0_{e}")));
    summary.write_record(&header)?;
    let mut efforts = csv::Writer::from_path(out_file(out, "sensitivity_efforts.csv")?)?;
    let mut header = vec!["param".to_string(), "value".into(), "t".into()];
    header.extend((1..=n).map(|i| format!("a_{i}")));
    efforts.write_record(&header)?;

    for &value in values {
        let mut market = s.model.market.clone();
        match param {
            SweepParam::Sigma => market.sigma = value,
            SweepParam::Rho => market.rho = value,
        }
        let model = Model::new(s.model.network.clone(), s.model.producers.clone(), market)?;
        let (bundle, surface) = policy_bundle(s, &model, PolicyKind::Optimal, "dispatch", &cfg, grid_args)?;
        let surface = surface.expect("optimal policy solves a surface");
        let (v0, _) = value_at(&surface, 0.0, s.initial_pollution)?;
        let start = surface.policy_at(&model, 0.0, s.initial_pollution)?;
        let steps = bundle.times.len();
        let mut curve = vec![vec![0.0; steps]; n];
        for tr in &bundle.trajectories {
            for (row, eff) in curve.iter_mut().zip(&tr.effort) {
                for (c, a) in row.iter_mut().zip(eff) {
                    *c += a / bundle.trajectories.len() as f64;
                }
            }
        }
        let social = estimate_social_cost(&bundle);
        let mut row = vec![name.to_string(), value.to_string(), v0.to_string(), social.mean.to_string(), social.std_error.to_string()];
        row.push(bundle.pollution_increment().mean.to_string());
        row.extend(curve.iter().map(|c| (c.iter().sum::<f64>() / steps as f64).to_string()));
        row.extend(start.plan.q.iter().chain(&start.plan.phi).map(|x| x.to_string()));
        summary.write_record(&row)?;
        for (k, t) in bundle.times.iter().enumerate() {
            let mut row = vec![name.to_string(), value.to_string(), t.to_string()];
            row.extend(curve.iter().map(|c| c[k].to_string()));
            efforts.write_record(&row)?;
        }
        let mean_efforts: Vec<String> = curve.iter().map(|c| format!("{:.4}", c.iter().sum::<f64>() / steps as f64)).collect();
        println!("{name} = {value}: v0 = {v0:.6e}, social cost = {:.6e}, mean efforts = [{}]", social.mean, mean_efforts.join(", "));
    }
    summary.flush()?;
    efforts.flush()?;
    Ok(())
}
