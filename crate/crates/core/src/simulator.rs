//! Monte Carlo simulation of pollution, certainty equivalents and payments.
//!
//! Paths are simulated by Euler–Maruyama under the equilibrium dynamics
//!
//! ```text
//! dL  = Σ (1−a*ʲ) pⱼ(qʲ) dt + σ dW
//! dYⁱ = fⁱ dt + zⁱ dL = (hᵢ(a*ⁱ) + cᵢ(qⁱ) + ρσ²/2 (zⁱ)²) dt + zⁱ σ dW
//! ```
//!
//! starting from `Y₀ⁱ = −(1/ρ) log(−R₀ⁱ)`; the payment is `ξⁱ = Y_Tⁱ`.
//!
//! Path `k` draws its normals from `ChaCha8Rng` seeded with the run seed on
//! stream `k` (with antithetic pairs, stream `k/2`, odd paths negated), so
//! parallel runs reproduce sequential ones exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::closed_form::{closed_policy, ExplicitSpec};
use crate::error::{input, Error, Result};
use crate::hjb::{PolicyPoint, ValueSurface};
use crate::network::{is_feasible, Plan, DEFAULT_FEASIBILITY_TOL};
use crate::producer::{cara_utility, Model};

/// Largest tolerated share of time steps spent outside the value grid.
pub const MAX_CLAMPED_SHARE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub antithetic: bool,
    /// Number of leading paths whose full trajectories are kept.
    pub stored_paths: usize,
}

impl SimConfig {
    /// Number of steps covering `horizon`; `dt` must divide it.
    pub fn steps(&self, horizon: f64) -> Result<usize> {
        if self.n_paths == 0 {
            return Err(Error::Config("need at least one path".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("time step {} must be positive", self.dt)));
        }
        let n = (horizon / self.dt).round();
        if n < 1.0 || (n * self.dt - horizon).abs() > 1e-9 * horizon {
            return Err(Error::Config(format!("time step {} does not divide the horizon {horizon}", self.dt)));
        }
        if self.antithetic && self.n_paths % 2 == 1 {
            return Err(Error::Config(format!("antithetic sampling needs an even path count, got {}", self.n_paths)));
        }
        Ok(n as usize)
    }
}

/// Where the controls come from along a path.
#[derive(Debug, Clone, Copy)]
pub enum PolicySource<'a> {
    /// Optimisers stored on a solved surface.
    Surface(&'a ValueSurface),
    /// Explicit sensitivities `z_i (s − T)` with the plan frozen.
    Closed { spec: &'a ExplicitSpec, plan: &'a Plan },
    /// Constant plan and sensitivities (zero sensitivities: no regulation).
    Constant { plan: &'a Plan, z: &'a [f64] },
}

impl PolicySource<'_> {
    fn validate(&self, model: &Model) -> Result<()> {
        let check_plan = |plan: &Plan| {
            if is_feasible(&model.network, plan, DEFAULT_FEASIBILITY_TOL) {
                Ok(())
            } else {
                input("policy plan is not feasible")
            }
        };
        match *self {
            PolicySource::Surface(s) => {
                if s.policy.is_none() {
                    return input("surface was solved without policy storage");
                }
                if (s.grid.horizon - model.market.horizon).abs() > 1e-12 * model.market.horizon {
                    return input("surface horizon differs from the model horizon");
                }
                Ok(())
            }
            PolicySource::Closed { spec, plan } => {
                if spec.producers.len() != model.n() {
                    return input("explicit data and model differ in size");
                }
                closed_policy(spec, 0.0)?;
                check_plan(plan)
            }
            PolicySource::Constant { plan, z } => {
                if z.len() != model.n() {
                    return input(format!("{} sensitivities for {} producers", z.len(), model.n()));
                }
                check_plan(plan)
            }
        }
    }

    /// Controls at `(t, ℓ)`; efforts are the producers' best responses.
    fn at(&self, model: &Model, t: f64, ell: f64) -> PolicyPoint {
        let respond = |plan: &Plan, z: &[f64]| -> Vec<f64> {
            model
                .producers
                .iter()
                .zip(plan.q.iter().zip(z))
                .map(|(p, (&q, &zi))| p.effort.best_response(p.emission(q), zi))
                .collect()
        };
        match *self {
            PolicySource::Surface(s) => s.policy_at(model, t, ell).expect("validated surface policy"),
            PolicySource::Closed { spec, plan } => {
                let (z, _) = closed_policy(spec, t.clamp(0.0, spec.horizon)).expect("validated regime");
                let effort = respond(plan, &z);
                PolicyPoint { z, plan: plan.clone(), effort }
            }
            PolicySource::Constant { plan, z } => PolicyPoint { z: z.to_vec(), plan: plan.clone(), effort: respond(plan, z) },
        }
    }

    fn outside_grid(&self, ell: f64) -> bool {
        match self {
            PolicySource::Surface(s) => ell < s.grid.ell_min || ell > s.grid.ell_max,
            _ => false,
        }
    }
}

/// How a deviating producer replaces its equilibrium effort.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffortShift {
    /// `a*ⁱ + offset`.
    Offset(f64),
    /// A fixed effort level.
    Fixed(f64),
}

/// A unilateral effort deviation by one producer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    pub producer: usize,
    pub shift: EffortShift,
    /// Time window `[start, end)` during which the shift applies.
    pub window: (f64, f64),
}

impl Deviation {
    pub fn offset(producer: usize, offset: f64, window: (f64, f64)) -> Self {
        Self { producer, shift: EffortShift::Offset(offset), window }
    }
}

/// Full record of one path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub path_id: usize,
    pub pollution: Vec<f64>,
    /// `certainty[i][n]` is `Yⁱ` at step `n`.
    pub certainty: Vec<Vec<f64>>,
    /// `effort[i][n]` applies on `[t_n, t_{n+1})`; the last entry repeats.
    pub effort: Vec<Vec<f64>>,
}

/// Per-path totals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSummary {
    pub final_pollution: f64,
    /// `ξⁱ` from the state recursion.
    pub payments: Vec<f64>,
    /// `ξⁱ = y₀ⁱ + Σ fⁱ Δt + Σ zⁱ ΔL` accumulated separately.
    pub payments_direct: Vec<f64>,
    /// `∫ Σ cᵢ(qⁱ) dt`.
    pub production_cost: f64,
    /// `∫ Λ(L − ℓ₀) dt` (trapezoidal).
    pub pollution_cost: f64,
    /// `∫ (hᵢ(aⁱ) + cᵢ(qⁱ)) dt` per producer, using the efforts actually exerted.
    pub agent_costs: Vec<f64>,
    pub clamped_steps: usize,
}

/// Outcome of a Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathBundle {
    pub times: Vec<f64>,
    pub initial_pollution: f64,
    /// Initial certainty equivalents `y₀ⁱ`.
    pub initial_certainty: Vec<f64>,
    pub rho: f64,
    /// Whether payments are part of the social cost.
    pub regulated: bool,
    /// Whether consecutive paths are antithetic pairs.
    pub antithetic: bool,
    pub summaries: Vec<PathSummary>,
    pub trajectories: Vec<Trajectory>,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.summaries.len()
    }

    /// Estimate of `E[f]`; antithetic pairs are averaged first so the
    /// standard error accounts for their dependence.
    pub fn estimate<F: Fn(&PathSummary) -> f64>(&self, f: F) -> CostEstimate {
        paired_estimate(self.antithetic, self.summaries.iter().map(f))
    }

    pub fn clamped_share(&self) -> f64 {
        let steps = (self.times.len() - 1) * self.summaries.len();
        self.summaries.iter().map(|s| s.clamped_steps).sum::<usize>() as f64 / steps.max(1) as f64
    }

    /// Mean pollution increment `L_T − L₀`.
    pub fn pollution_increment(&self) -> CostEstimate {
        self.estimate(|s| s.final_pollution - self.initial_pollution)
    }

    pub fn production_cost(&self) -> CostEstimate {
        self.estimate(|s| s.production_cost)
    }

    pub fn pollution_cost(&self) -> CostEstimate {
        self.estimate(|s| s.pollution_cost)
    }

    /// Writes `path_id, t, L, Y_1..N, a_1..N` for the stored trajectories.
    pub fn write_paths_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.initial_certainty.len();
        let mut header = vec!["path_id".to_string(), "t".into(), "L".into()];
        header.extend((1..=n).map(|i| format!("Y_{i}")));
        header.extend((1..=n).map(|i| format!("a_{i}")));
        w.write_record(&header)?;
        for tr in &self.trajectories {
            for (k, &t) in self.times.iter().enumerate() {
                let mut row = vec![tr.path_id.to_string(), t.to_string(), tr.pollution[k].to_string()];
                row.extend(tr.certainty.iter().map(|y| y[k].to_string()));
                row.extend(tr.effort.iter().map(|a| a[k].to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn paired_estimate<I: Iterator<Item = f64>>(antithetic: bool, samples: I) -> CostEstimate {
    if !antithetic {
        return CostEstimate::from_samples(samples);
    }
    let xs: Vec<f64> = samples.collect();
    let mut e = CostEstimate::from_samples(xs.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64));
    e.n_paths = xs.len();
    e
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl CostEstimate {
    pub fn from_samples<I: IntoIterator<Item = f64>>(samples: I) -> Self {
        let xs: Vec<f64> = samples.into_iter().collect();
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_error: f64::NAN, n_paths: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, n_paths: n }
    }

    /// `|mean − target| ≤ k·SE + slack`.
    pub fn agrees_with(&self, target: f64, k: f64, slack: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + slack
    }
}

struct PathInputs<'a> {
    model: &'a Model,
    policy: PolicySource<'a>,
    cfg: &'a SimConfig,
    steps: usize,
    l0: f64,
    y0: Vec<f64>,
    deviation: Option<Deviation>,
}

fn normals(cfg: &SimConfig, path: usize, steps: usize) -> Vec<f64> {
    let (stream, sign) = if cfg.antithetic { (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 }) } else { (path, 1.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream as u64);
    (0..steps).map(|_| sign * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn simulate_path(inp: &PathInputs, path: usize, keep: bool) -> Result<(PathSummary, Option<Trajectory>)> {
    let model = inp.model;
    let m = &model.market;
    let n = model.n();
    let dt = inp.cfg.dt;
    let sq = dt.sqrt();
    let premium = m.risk_premium();
    let draws = normals(inp.cfg, path, inp.steps);

    let mut ell = inp.l0;
    let mut y = inp.y0.clone();
    let mut y_direct = inp.y0.clone();
    let mut production_cost = 0.0;
    let mut pollution_cost = 0.0;
    let mut agent_costs = vec![0.0; n];
    let mut clamped_steps = 0;
    let mut traj = keep.then(|| Trajectory {
        path_id: path,
        pollution: Vec::with_capacity(inp.steps + 1),
        certainty: vec![Vec::with_capacity(inp.steps + 1); n],
        effort: vec![Vec::with_capacity(inp.steps + 1); n],
    });

    for (k, &xi) in draws.iter().enumerate() {
        let t = k as f64 * dt;
        if inp.policy.outside_grid(ell) {
            clamped_steps += 1;
        }
        let pol = inp.policy.at(model, t, ell);
        let levels: Vec<f64> = model.producers.iter().zip(&pol.plan.q).map(|(p, &q)| p.emission(q)).collect();
        let costs: Vec<f64> = model.producers.iter().zip(&pol.plan.q).map(|(p, &q)| p.production_cost(q)).collect();
        let eq_drift: f64 = levels.iter().zip(&pol.effort).map(|(l, a)| (1.0 - a) * l).sum();
        let mut exerted = pol.effort.clone();
        if let Some(d) = inp.deviation {
            if t >= d.window.0 && t < d.window.1 {
                let a = match d.shift {
                    EffortShift::Offset(o) => exerted[d.producer] + o,
                    EffortShift::Fixed(a) => a,
                };
                let a_max = model.producers[d.producer].effort.a_max();
                if !(-1e-12..=a_max + 1e-12).contains(&a) {
                    return input(format!(
                        "deviated effort {a} of producer {} leaves [0, {a_max}] at t = {t}",
                        d.producer + 1
                    ));
                }
                exerted[d.producer] = a.clamp(0.0, a_max);
            }
        }
        let drift: f64 = levels.iter().zip(&exerted).map(|(l, a)| (1.0 - a) * l).sum();
        let dw = sq * xi;
        let dl = drift * dt + m.sigma * dw;

        if let Some(tr) = traj.as_mut() {
            tr.pollution.push(ell);
            for i in 0..n {
                tr.certainty[i].push(y[i]);
                tr.effort[i].push(exerted[i]);
            }
        }
        for i in 0..n {
            let p = &model.producers[i];
            let h_eq = p.effort.cost(pol.effort[i]);
            let z = pol.z[i];
            // the contract is written on the equilibrium generator
            let f = h_eq + costs[i] - z * eq_drift + premium * z * z;
            y[i] += (h_eq + costs[i] + premium * z * z) * dt + z * (dl - eq_drift * dt);
            y_direct[i] += f * dt + z * dl;
            agent_costs[i] += (p.effort.cost(exerted[i]) + costs[i]) * dt;
        }
        production_cost += costs.iter().sum::<f64>() * dt;
        let next = ell + dl;
        pollution_cost += 0.5 * (m.social_cost.eval(ell - m.ell0) + m.social_cost.eval(next - m.ell0)) * dt;
        ell = next;
    }
    if let Some(tr) = traj.as_mut() {
        tr.pollution.push(ell);
        for ((cert, eff), &yi) in tr.certainty.iter_mut().zip(tr.effort.iter_mut()).zip(&y) {
            cert.push(yi);
            let last = *eff.last().unwrap_or(&0.0);
            eff.push(last);
        }
    }
    let summary = PathSummary {
        final_pollution: ell,
        payments: y,
        payments_direct: y_direct,
        production_cost,
        pollution_cost,
        agent_costs,
        clamped_steps,
    };
    Ok((summary, traj))
}

fn run(
    model: &Model,
    policy: PolicySource,
    cfg: &SimConfig,
    l0: f64,
    regulated: bool,
    deviation: Option<Deviation>,
) -> Result<PathBundle> {
    let steps = cfg.steps(model.market.horizon)?;
    policy.validate(model)?;
    if let Some(d) = deviation {
        if d.producer >= model.n() {
            return input(format!("no producer {}", d.producer + 1));
        }
    }
    let y0 = model.market.initial_certainty_equivalents();
    let inputs = PathInputs { model, policy, cfg, steps, l0, y0: y0.clone(), deviation };
    let results: Vec<(PathSummary, Option<Trajectory>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|k| simulate_path(&inputs, k, k < cfg.stored_paths))
        .collect::<Result<_>>()?;
    let mut summaries = Vec::with_capacity(results.len());
    let mut trajectories = Vec::new();
    for (s, t) in results {
        summaries.push(s);
        trajectories.extend(t);
    }
    let times = (0..=steps).map(|k| if k == steps { model.market.horizon } else { k as f64 * cfg.dt }).collect();
    Ok(PathBundle {
        times,
        initial_pollution: l0,
        initial_certainty: y0,
        rho: model.market.rho,
        regulated,
        antithetic: cfg.antithetic,
        summaries,
        trajectories,
    })
}

/// Simulates the regulated market under `policy`.
///
/// Fails with a validation error when more than [`MAX_CLAMPED_SHARE`] of the
/// time steps are spent outside the value grid (where the boundary policy is used).
pub fn simulate_regulated(model: &Model, policy: PolicySource, cfg: &SimConfig, l0: f64) -> Result<PathBundle> {
    let bundle = run(model, policy, cfg, l0, true, None)?;
    let share = bundle.clamped_share();
    if share > 0.0 {
        log::warn!("{:.4}% of steps fell outside the value grid and used the boundary policy", 100.0 * share);
    }
    if share > MAX_CLAMPED_SHARE {
        return Err(Error::Validation(format!(
            "{:.3}% of time steps left the value grid (limit {:.1}%)",
            100.0 * share,
            100.0 * MAX_CLAMPED_SHARE
        )));
    }
    Ok(bundle)
}

/// Simulates the unregulated market: fixed plan, zero effort, no payments.
pub fn simulate_unregulated(model: &Model, plan: &Plan, cfg: &SimConfig, l0: f64) -> Result<PathBundle> {
    let zeros = vec![0.0; model.n()];
    run(model, PolicySource::Constant { plan, z: &zeros }, cfg, l0, false, None)
}

/// Per path `∫Σcᵢ + ∫Λ(L−ℓ₀) + Σξⁱ` (payments only when regulated).
pub fn estimate_social_cost(bundle: &PathBundle) -> CostEstimate {
    bundle.estimate(|s| {
        let pay: f64 = if bundle.regulated { s.payments.iter().sum() } else { 0.0 };
        s.production_cost + s.pollution_cost + pay
    })
}

/// Utility of producer `i`: `U(ξⁱ − ∫(hᵢ + cᵢ) dt)` per path.
pub fn verify_agent_value(bundle: &PathBundle, i: usize) -> Result<CostEstimate> {
    if i >= bundle.initial_certainty.len() {
        return input(format!("no producer {}", i + 1));
    }
    let rho = bundle.rho;
    Ok(bundle.estimate(|s| cara_utility(rho, s.payments[i] - s.agent_costs[i])))
}

/// Result of a unilateral deviation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationOutcome {
    pub equilibrium: CostEstimate,
    pub deviated: CostEstimate,
    /// Paired difference `U(deviated) − U(equilibrium)`.
    pub difference: CostEstimate,
}

impl DeviationOutcome {
    /// True unless the deviation improves the producer's utility beyond `k` standard errors.
    pub fn no_improvement(&self, k: f64) -> bool {
        self.difference.mean <= k * self.difference.std_error + 1e-12 * self.equilibrium.mean.abs()
    }
}

/// Replays the equilibrium paths (same random numbers) with producer `i`
/// shifting its effort inside the window. Pollution follows the deviated
/// drift, the contract still pays `y₀ + ∫ fⁱ dt + ∫ zⁱ dL`.
pub fn deviation_test(model: &Model, policy: PolicySource, cfg: &SimConfig, l0: f64, deviation: Deviation) -> Result<DeviationOutcome> {
    let eq = run(model, policy, cfg, l0, true, None)?;
    let dev = run(model, policy, cfg, l0, true, Some(deviation))?;
    let i = deviation.producer;
    let rho = model.market.rho;
    let u = |s: &PathSummary| cara_utility(rho, s.payments[i] - s.agent_costs[i]);
    Ok(DeviationOutcome {
        equilibrium: eq.estimate(u),
        deviated: dev.estimate(u),
        difference: paired_estimate(cfg.antithetic, eq.summaries.iter().zip(&dev.summaries).map(|(a, b)| u(b) - u(a))),
    })
}

/// Writes one row per estimator: `name, mean, std_error, n_paths`.
pub fn write_summary_csv(rows: &[(String, CostEstimate)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["estimator", "mean", "std_error", "n_paths"])?;
    for (name, e) in rows {
        w.write_record([name.clone(), e.mean.to_string(), e.std_error.to_string(), e.n_paths.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
