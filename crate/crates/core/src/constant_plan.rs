//! Regulation restricted to plans held constant over the whole horizon.
//!
//! Each candidate plan is scored by the frozen-plan value at `(0, L₀)`. The
//! sweep and the local refinement run on a grid four times coarser in both
//! axes; the best candidates are then re-scored on the full grid.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hjb::{solve_fixed_plan, value_at, Grid};
use crate::network::{plan_grid, producer_kinks, refine_flows, Plan};
use crate::producer::Model;

/// Frozen-plan value `v^{q,φ}(0, L₀)`.
pub fn evaluate_vd(model: &Model, plan: &Plan, grid: Grid, l0: f64) -> Result<f64> {
    let surface = solve_fixed_plan(model, plan, grid, false)?;
    Ok(value_at(&surface, 0.0, l0)?.0)
}

/// Additive term `−Σ (1/ρ) log(−R₀ⁱ)` relating the reduced value to the
/// regulator's cost including the producers' reservation levels.
pub fn reservation_offset(model: &Model) -> f64 {
    model.market.initial_certainty_equivalents().iter().sum()
}

/// Grid with 4× fewer pollution nodes and time steps.
pub fn coarsen(grid: &Grid) -> Result<Grid> {
    let n_ell = ((grid.n_ell - 1) / 4).max(2) + 1;
    Grid::new(grid.ell_min, grid.ell_max, n_ell, grid.n_t.div_ceil(4).max(1), grid.horizon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    /// Grid points per edge in the sweep.
    pub resolution: usize,
    pub refine_starts: usize,
    pub finalists: usize,
    /// Refinement stops below this fraction of each edge width.
    pub min_rel_step: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self { resolution: 13, refine_starts: 2, finalists: 4, min_rel_step: 1e-5 }
    }
}

/// One scored plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub plan: Plan,
    pub coarse_value: f64,
    /// Value on the full grid, for finalists.
    pub fine_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPlanResult {
    pub plan: Plan,
    pub value: f64,
    /// Every plan evaluated, sweep first, then refinement moves.
    pub candidates: Vec<Candidate>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Minimises the frozen-plan value over feasible plans.
pub fn optimize_vd(model: &Model, grid: Grid, l0: f64, options: &OptimizeOptions) -> Result<ConstantPlanResult> {
    let coarse = coarsen(&grid)?;
    coarse.check_stability(model.max_drift(), model.market.sigma)?;
    let sweep = plan_grid(&model.network, options.resolution);
    if sweep.is_empty() {
        return Err(Error::Infeasible("no feasible plan on the sweep grid".into()));
    }
    let values: Vec<f64> = sweep
        .par_iter()
        .map(|p| evaluate_vd(model, p, coarse, l0))
        .collect::<Result<_>>()?;
    let mut candidates: Vec<Candidate> = sweep
        .iter()
        .zip(&values)
        .map(|(p, &v)| Candidate { plan: p.clone(), coarse_value: v, fine_value: None })
        .collect();
    let mut order: Vec<usize> = (0..sweep.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let initial_step = 1.0 / (options.resolution.max(2) - 1) as f64;
    let kinks = producer_kinks(&model.producers);
    let mut refined = Vec::new();
    let mut failure = None;
    for &k in order.iter().take(options.refine_starts.max(1)) {
        let mut objective = |p: &Plan| match evaluate_vd(model, p, coarse, l0) {
            Ok(v) => {
                candidates.push(Candidate { plan: p.clone(), coarse_value: v, fine_value: None });
                v
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        };
        let out = refine_flows(&model.network, &sweep[k], values[k], initial_step, options.min_rel_step, &kinks, &mut objective);
        refined.push((out.plan, out.value));
    }
    if let Some(e) = failure {
        return Err(e);
    }

    // finalists: refined optima plus the best sweep points, distinct
    let mut finalists: Vec<Plan> = refined.iter().map(|(p, _)| p.clone()).collect();
    for &k in &order {
        if finalists.len() >= options.finalists.max(refined.len()) {
            break;
        }
        if !finalists.contains(&sweep[k]) {
            finalists.push(sweep[k].clone());
        }
    }
    let scored: Vec<(Plan, f64)> = finalists
        .into_par_iter()
        .map(|p| evaluate_vd(model, &p, grid, l0).map(|v| (p, v)))
        .collect::<Result<_>>()?;
    for (p, v) in &scored {
        if let Some(c) = candidates.iter_mut().find(|c| &c.plan == p) {
            c.fine_value = Some(*v);
        }
    }
    let (plan, value) = scored
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| lex_cmp(&a.0.phi, &b.0.phi)))
        .expect("at least one finalist");
    Ok(ConstantPlanResult { plan, value, candidates })
}

/// Writes `q_*, phi_*, coarse_value, fine_value` per candidate.
pub fn write_candidates_csv(result: &ConstantPlanResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let Some(first) = result.candidates.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header: Vec<String> = (1..=first.plan.q.len()).map(|i| format!("q_{i}")).collect();
    header.extend((1..=first.plan.phi.len()).map(|e| format!("phi_{e}")));
    header.extend(["coarse_value".to_string(), "fine_value".to_string()]);
    w.write_record(&header)?;
    for c in &result.candidates {
        let mut row: Vec<String> = c.plan.q.iter().chain(&c.plan.phi).map(|x| x.to_string()).collect();
        row.push(c.coarse_value.to_string());
        row.push(c.fine_value.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
