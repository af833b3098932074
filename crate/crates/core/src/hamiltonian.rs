//! Running cost of the regulator's reduced control problem and its minimisers.
//!
//! For a value-function slope `α` the regulator picks sensitivities `z`, a
//! production plan and flows to minimise
//!
//! ```text
//! g = Σᵢ [ α (1−a*ⁱ) pᵢ(qⁱ) + hᵢ(a*ⁱ) + ρσ²/2 (zⁱ)² + 2 cᵢ(qⁱ) ]
//! ```
//!
//! where `a*ⁱ = a*(qⁱ, zⁱ)` is the producer's best response. The `z` part
//! decouples across producers once the plan is fixed.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{input, Error, Result};
use crate::network::{is_feasible, plan_grid, producer_kinks, search_plans, Plan, SearchOptions, DEFAULT_FEASIBILITY_TOL};
use crate::producer::{EffortCost, MarketParams, Model, ProducerSpec};

/// A minimiser of `g` for one slope value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerSelection {
    pub z_star: Vec<f64>,
    pub plan_star: Plan,
    pub effort_star: Vec<f64>,
    pub g_value: f64,
    /// Expected pollution rate `Σ (1−a*ⁱ) pᵢ(qⁱ)` under the selection.
    pub drift: f64,
}

/// Per-producer minimiser of `α (1−a*) P + h(a*) + ρσ²/2 z²` for emission level `P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct InnerMin {
    pub z: f64,
    pub effort: f64,
    pub value: f64,
}

pub(crate) fn inner_min_at_level(effort: &EffortCost, premium: f64, alpha: f64, level: f64) -> InnerMin {
    let at_zero = InnerMin { z: 0.0, effort: 0.0, value: alpha * level + effort.cost(0.0) };
    // a negative slope rewards pollution; paying for effort never helps then
    if alpha <= 0.0 || level <= 0.0 {
        return at_zero;
    }
    match *effort {
        EffortCost::Quadratic { h, a_max } => {
            let p2 = level * level;
            let z_free = -alpha * p2 / (2.0 * premium * h + p2);
            let z_floor = -h * a_max / level;
            if z_free >= z_floor {
                // interior branch: αP − α²P⁴ / (2h(σ²ρh + P²))
                let a = -z_free * level / h;
                let value = alpha * level - alpha * alpha * p2 * p2 / (2.0 * h * (2.0 * premium * h + p2));
                InnerMin { z: z_free, effort: a, value }
            } else {
                let value = alpha * (1.0 - a_max) * level + 0.5 * h * a_max * a_max + premium * z_floor * z_floor;
                InnerMin { z: z_floor, effort: a_max, value }
            }
        }
        EffortCost::Tabulated { .. } => {
            // each knot of the effort grid is reached first at z = −(incoming slope)/P;
            // beyond that point only the quadratic premium grows
            let (da, values) = effort.tabulated_knots().expect("tabulated");
            let mut best = at_zero;
            for k in 1..values.len() {
                let slope = (values[k] - values[k - 1]) / da;
                let z = -slope / level;
                let a = k as f64 * da;
                let value = alpha * (1.0 - a) * level + values[k] + premium * z * z;
                if value < best.value {
                    best = InnerMin { z, effort: a, value };
                }
            }
            best
        }
    }
}

/// Optimal sensitivity for one producer at production `q_i`, with its part
/// `α(1−a*)pᵢ + hᵢ(a*) + ρσ²/2 z²` of the running cost.
pub fn inner_z_min(prod: &ProducerSpec, params: &MarketParams, alpha: f64, q_i: f64) -> Result<(f64, f64)> {
    if !(q_i >= 0.0 && q_i <= prod.capacity) {
        return input(format!("production {q_i} outside [0, {}]", prod.capacity));
    }
    let m = inner_min_at_level(&prod.effort, params.risk_premium(), alpha, prod.emission(q_i));
    Ok((m.z, m.value))
}

/// `g` minimised over `z` with the plan frozen.
pub fn plan_objective(model: &Model, alpha: f64, plan: &Plan) -> Result<f64> {
    if !is_feasible(&model.network, plan, DEFAULT_FEASIBILITY_TOL) {
        return input("plan is not feasible for the network");
    }
    Ok(objective_unchecked(model, alpha, plan))
}

fn objective_unchecked(model: &Model, alpha: f64, plan: &Plan) -> f64 {
    let premium = model.market.risk_premium();
    model
        .producers
        .iter()
        .zip(&plan.q)
        .map(|(p, &q)| inner_min_at_level(&p.effort, premium, alpha, p.emission(q)).value + 2.0 * p.production_cost(q))
        .sum()
}

/// Selection with the plan frozen and `z` minimised producer by producer.
pub fn select_for_plan(model: &Model, alpha: f64, plan: &Plan) -> OptimizerSelection {
    let premium = model.market.risk_premium();
    let n = model.n();
    let mut z_star = Vec::with_capacity(n);
    let mut effort_star = Vec::with_capacity(n);
    let mut g_value = 0.0;
    let mut drift = 0.0;
    for (p, &q) in model.producers.iter().zip(&plan.q) {
        let level = p.emission(q);
        let m = inner_min_at_level(&p.effort, premium, alpha, level);
        z_star.push(m.z);
        effort_star.push(m.effort);
        g_value += m.value + 2.0 * p.production_cost(q);
        drift += (1.0 - m.effort) * level;
    }
    OptimizerSelection { z_star, plan_star: plan.clone(), effort_star, g_value, drift }
}

/// Minimises `g` over feasible plans for fixed slopes, reusing one search grid.
#[derive(Debug, Clone)]
pub struct PlanSearch<'m> {
    model: &'m Model,
    options: SearchOptions,
    grid: Vec<Plan>,
    kinks: Vec<Vec<f64>>,
}

impl<'m> PlanSearch<'m> {
    pub fn new(model: &'m Model, options: SearchOptions) -> Result<Self> {
        let grid = plan_grid(&model.network, options.resolution);
        if grid.is_empty() {
            return Err(Error::Infeasible("no feasible plan on the search grid".into()));
        }
        Ok(Self { model, options, grid, kinks: producer_kinks(&model.producers) })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn minimize(&self, alpha: f64) -> Result<OptimizerSelection> {
        let out = search_plans(&self.model.network, &self.grid, &self.options, &self.kinks, |plan| {
            objective_unchecked(self.model, alpha, plan)
        })?;
        Ok(select_for_plan(self.model, alpha, &out.plan))
    }
}

/// Minimiser of `g` over plans (grid plus local refinement) and sensitivities.
pub fn minimize_g(model: &Model, alpha: f64, options: &SearchOptions) -> Result<OptimizerSelection> {
    PlanSearch::new(model, *options)?.minimize(alpha)
}

/// `G(ℓ, α, γ) = min g + ½ γ σ² + Λ(ℓ − ℓ₀)`.
pub fn hamiltonian_g(model: &Model, ell: f64, alpha: f64, gamma: f64, options: &SearchOptions) -> Result<f64> {
    let sel = minimize_g(model, alpha, options)?;
    Ok(sel.g_value + diffusion_and_penalty(&model.market, ell, gamma))
}

pub(crate) fn diffusion_and_penalty(market: &MarketParams, ell: f64, gamma: f64) -> f64 {
    0.5 * gamma * market.sigma * market.sigma + market.social_cost.eval(ell - market.ell0)
}

/// Preferred of two selections: lower value, then smaller flows, then smaller `|z|`.
fn prefer(a: OptimizerSelection, b: OptimizerSelection) -> OptimizerSelection {
    use std::cmp::Ordering;
    let ord = a
        .g_value
        .total_cmp(&b.g_value)
        .then_with(|| {
            a.plan_star
                .phi
                .iter()
                .zip(&b.plan_star.phi)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| {
            let na: f64 = a.z_star.iter().map(|z| z.abs()).sum();
            let nb: f64 = b.z_star.iter().map(|z| z.abs()).sum();
            na.total_cmp(&nb)
        });
    if ord == Ordering::Greater {
        b
    } else {
        a
    }
}

/// Memoised plan minimisers on a lattice of slope values.
///
/// A query at `α` re-evaluates, exactly at `α`, the plans found at the two
/// lattice points bracketing it and keeps the better one. Missing lattice
/// points are filled in bulk by [`SelectionCache::prefill`] so the lookups of a
/// whole time slice can then run concurrently on a shared reference.
#[derive(Debug)]
pub struct SelectionCache<'m> {
    search: PlanSearch<'m>,
    step: f64,
    plans: HashMap<i64, Plan>,
}

impl<'m> SelectionCache<'m> {
    pub fn new(search: PlanSearch<'m>, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Config(format!("slope lattice step {step} must be positive")));
        }
        Ok(Self { search, step, plans: HashMap::new() })
    }

    /// Lattice step `λT / 2048`, or 1 when the social cost is flat.
    pub fn default_step(model: &Model) -> f64 {
        let s = model.market.social_cost.lipschitz() * model.market.horizon / 2048.0;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    fn bracket(&self, alpha: f64) -> (i64, i64) {
        let k = (alpha / self.step).floor() as i64;
        (k, k + 1)
    }

    /// Computes the lattice points needed to answer queries at `alphas`.
    pub fn prefill(&mut self, alphas: &[f64]) -> Result<()> {
        let mut missing: Vec<i64> = alphas
            .iter()
            .flat_map(|&a| {
                let (lo, hi) = self.bracket(a);
                [lo, hi]
            })
            .filter(|k| !self.plans.contains_key(k))
            .collect();
        missing.sort_unstable();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        let search = &self.search;
        let step = self.step;
        let found: Vec<(i64, Plan)> = missing
            .par_iter()
            .map(|&k| search.minimize(k as f64 * step).map(|s| (k, s.plan_star)))
            .collect::<Result<_>>()?;
        self.plans.extend(found);
        Ok(())
    }

    /// Selection at `alpha`; the bracketing lattice points must be present.
    pub fn lookup(&self, alpha: f64) -> OptimizerSelection {
        let (lo, hi) = self.bracket(alpha);
        let model = self.search.model();
        let a = select_for_plan(model, alpha, &self.plans[&lo]);
        let b = select_for_plan(model, alpha, &self.plans[&hi]);
        prefer(a, b)
    }

    /// Prefills and looks up a single slope.
    pub fn get(&mut self, alpha: f64) -> Result<OptimizerSelection> {
        self.prefill(&[alpha])?;
        Ok(self.lookup(alpha))
    }
}
