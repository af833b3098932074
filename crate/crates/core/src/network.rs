//! Transmission network with quadratic line losses.
//!
//! Every node hosts one producer. A plan assigns a production level to each
//! node and a nonnegative flow to each oriented edge; it is feasible when
//! every node balances
//!
//! ```text
//! q_i + Σ_{e∈K_i} sgn(e,i) φ_e = D_i + ½ Σ_{e∈K_i} r_e φ_e²
//! ```
//!
//! (losses split evenly between the two endpoints), productions sit in
//! `[0, Q_i]` and flows in `[φ_min, φ_max]`. Since the balance identity can
//! always be solved for `q`, flows are the only free variables: every search
//! in this crate runs over the flow box and recovers productions with
//! [`induced_production`].

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::producer::ProducerSpec;

/// Default tolerance on nodal balance residuals (MWh per hour).
pub const DEFAULT_FEASIBILITY_TOL: f64 = 1e-6;

/// Default number of grid points per edge for plan searches.
pub const DEFAULT_RESOLUTION: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    /// 1-based node index.
    pub id: usize,
    /// Power demand `D_i`.
    pub demand: f64,
    /// Production capacity `Q_i`.
    pub capacity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    /// 1-based tail node.
    pub from: usize,
    /// 1-based head node.
    pub to: usize,
    /// Loss coefficient `r_e`; the line loses `r_e φ²`.
    pub resistance: f64,
    pub flow_min: f64,
    pub flow_max: f64,
}

impl EdgeSpec {
    fn width(&self) -> f64 {
        self.flow_max - self.flow_min
    }

    /// `sgn(e, i)`: +1 when the edge enters node `i`, -1 when it leaves, 0 otherwise.
    /// `node` is 0-based.
    pub fn sign_at(&self, node: usize) -> f64 {
        if self.to == node + 1 {
            1.0
        } else if self.from == node + 1 {
            -1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
}

/// A production vector `q` (one entry per node) and flow vector `phi` (one per edge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub q: Vec<f64>,
    pub phi: Vec<f64>,
}

impl NetworkSpec {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Checks the structural invariants. Nodes must be listed with ids `1..=N` in order.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Config("network has no nodes".into()));
        }
        for (k, node) in self.nodes.iter().enumerate() {
            if node.id != k + 1 {
                return Err(Error::Config(format!(
                    "node ids must be 1..N in order; position {} has id {}",
                    k + 1,
                    node.id
                )));
            }
            if !(node.demand >= 0.0) || !(node.capacity >= 0.0) {
                return Err(Error::Config(format!(
                    "node {}: demand and capacity must be nonnegative",
                    node.id
                )));
            }
        }
        let n = self.nodes.len();
        for (k, e) in self.edges.iter().enumerate() {
            if e.from == 0 || e.from > n || e.to == 0 || e.to > n {
                return Err(Error::Config(format!("edge {}: endpoint outside 1..{n}", k + 1)));
            }
            if e.from == e.to {
                return Err(Error::Config(format!("edge {}: self loop at node {}", k + 1, e.from)));
            }
            if !(e.resistance >= 0.0) {
                return Err(Error::Config(format!("edge {}: negative resistance", k + 1)));
            }
            if !(e.flow_min >= 0.0 && e.flow_min <= e.flow_max) {
                return Err(Error::Config(format!(
                    "edge {}: flow bounds must satisfy 0 <= flow_min <= flow_max",
                    k + 1
                )));
            }
        }
        Ok(())
    }

    fn check_flows(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.edges.len() {
            return input(format!(
                "flow vector has length {}, network has {} edges",
                phi.len(),
                self.edges.len()
            ));
        }
        Ok(())
    }

    fn check_plan(&self, plan: &Plan) -> Result<()> {
        self.check_flows(&plan.phi)?;
        if plan.q.len() != self.nodes.len() {
            return input(format!(
                "production vector has length {}, network has {} nodes",
                plan.q.len(),
                self.nodes.len()
            ));
        }
        Ok(())
    }

    /// Total demand `Σ D_i`.
    pub fn total_demand(&self) -> f64 {
        self.nodes.iter().map(|n| n.demand).sum()
    }
}

/// Solves the balance identity for the productions induced by a flow vector.
///
/// The result may violate the capacity box; callers check with [`is_feasible`].
pub fn induced_production(net: &NetworkSpec, phi: &[f64]) -> Result<Vec<f64>> {
    net.check_flows(phi)?;
    Ok(induced_unchecked(net, phi))
}

fn induced_unchecked(net: &NetworkSpec, phi: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = net.nodes.iter().map(|n| n.demand).collect();
    for (e, &f) in net.edges.iter().zip(phi) {
        let half_loss = 0.5 * e.resistance * f * f;
        let (tail, head) = (e.from - 1, e.to - 1);
        // leaving the tail: sgn = -1, so q grows by φ
        q[tail] += half_loss + f;
        q[head] += half_loss - f;
    }
    q
}

/// Per-node residual `q_i + Σ sgn(e,i) φ_e − ½ Σ r_e φ_e² − D_i`.
pub fn balance_residual(net: &NetworkSpec, plan: &Plan) -> Result<Vec<f64>> {
    net.check_plan(plan)?;
    let mut res: Vec<f64> = plan
        .q
        .iter()
        .zip(&net.nodes)
        .map(|(q, n)| q - n.demand)
        .collect();
    for (e, &f) in net.edges.iter().zip(&plan.phi) {
        let half_loss = 0.5 * e.resistance * f * f;
        res[e.from - 1] -= f + half_loss;
        res[e.to - 1] += f - half_loss;
    }
    Ok(res)
}

/// True iff the balance residuals are within `tol` and the plan respects the
/// production and flow boxes. Never errors: malformed plans are infeasible.
pub fn is_feasible(net: &NetworkSpec, plan: &Plan, tol: f64) -> bool {
    let Ok(res) = balance_residual(net, plan) else {
        return false;
    };
    if res.iter().any(|r| !(r.abs() <= tol)) {
        return false;
    }
    let q_ok = plan
        .q
        .iter()
        .zip(&net.nodes)
        .all(|(&q, n)| (0.0..=n.capacity).contains(&q));
    let phi_ok = plan
        .phi
        .iter()
        .zip(&net.edges)
        .all(|(&f, e)| f >= e.flow_min && f <= e.flow_max);
    q_ok && phi_ok
}

/// Box check for an induced plan (the balance holds by construction).
fn within_boxes(net: &NetworkSpec, plan: &Plan) -> bool {
    plan.q
        .iter()
        .zip(&net.nodes)
        .all(|(&q, n)| q >= 0.0 && q <= n.capacity)
}

fn axis(e: &EdgeSpec, resolution: usize) -> Vec<f64> {
    if e.width() == 0.0 || resolution < 2 {
        return vec![e.flow_min];
    }
    let step = e.width() / (resolution - 1) as f64;
    (0..resolution)
        .map(|k| {
            if k == resolution - 1 {
                e.flow_max
            } else {
                e.flow_min + step * k as f64
            }
        })
        .collect()
}

/// All flow vectors on the box grid, in lexicographic order.
fn grid_flows(net: &NetworkSpec, resolution: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = net.edges.iter().map(|e| axis(e, resolution)).collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&axes).map(|(&i, a)| a[i]).collect());
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Enumerates the flow box with `resolution` points per edge and keeps the
/// feasible induced plans, in lexicographic flow order.
pub fn plan_grid(net: &NetworkSpec, resolution: usize) -> Vec<Plan> {
    grid_flows(net, resolution.max(2))
        .into_iter()
        .filter_map(|phi| {
            let q = induced_unchecked(net, &phi);
            let plan = Plan { q, phi };
            within_boxes(net, &plan).then_some(plan)
        })
        .collect()
}

/// Settings of the grid-then-refine plan search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Grid points per edge for the coarse sweep.
    pub resolution: usize,
    /// Refinement stops once every pattern step is below this fraction of the edge width.
    pub min_rel_step: f64,
    /// Number of best grid points used as refinement starts.
    pub starts: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            min_rel_step: 1e-6,
            starts: 2,
        }
    }
}

/// Result of a plan search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub plan: Plan,
    pub value: f64,
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Pattern search over the flow box starting at `start`.
///
/// Each round tries, in order, the coordinate moves, the diagonal moves of
/// `{-1,0,1}^E` and the kink-preserving moves (see [`kink_moves`]), taking the
/// first family that improves; the step halves when none does. Moves must stay
/// feasible. Improvements are strict, so ties keep the incumbent.
///
/// `kinks[i]` lists the production levels where node `i`'s objective bends;
/// pass an empty slice when unknown.
pub fn refine_flows<F>(
    net: &NetworkSpec,
    start: &Plan,
    start_value: f64,
    initial_step: f64,
    min_rel_step: f64,
    kinks: &[Vec<f64>],
    objective: &mut F,
) -> SearchOutcome
where
    F: FnMut(&Plan) -> f64,
{
    let active: Vec<usize> = (0..net.n_edges()).filter(|&k| net.edges[k].width() > 0.0).collect();
    let mut best = start.clone();
    let mut best_value = start_value;
    if active.is_empty() {
        return SearchOutcome { plan: best, value: best_value };
    }
    let widths: Vec<f64> = active.iter().map(|&k| net.edges[k].width()).collect();
    let mut steps: Vec<f64> = widths.iter().map(|w| w * initial_step).collect();

    let dims = active.len();
    let coordinate: Vec<Vec<i8>> = (0..dims)
        .flat_map(|d| {
            [-1i8, 1].into_iter().map(move |s| {
                let mut v = vec![0i8; dims];
                v[d] = s;
                v
            })
        })
        .collect();
    let diagonal: Vec<Vec<i8>> = if dims <= 6 {
        let total = 3usize.pow(dims as u32);
        (0..total)
            .map(|mut code| {
                (0..dims)
                    .map(|_| {
                        let digit = (code % 3) as i8 - 1;
                        code /= 3;
                        digit
                    })
                    .collect::<Vec<i8>>()
            })
            .filter(|d| d.iter().filter(|&&x| x != 0).count() >= 2)
            .collect()
    } else {
        Vec::new()
    };

    let mut iterations = 0usize;
    loop {
        iterations += 1;
        if iterations > 100_000 {
            log::warn!("flow refinement hit the iteration cap");
            break;
        }
        let pattern = |dirs: &[Vec<i8>]| pattern_moves(net, &active, dirs, &best.phi, &steps);
        let improved = best_candidate(net, pattern(&coordinate), best_value, objective)
            .or_else(|| best_candidate(net, pattern(&diagonal), best_value, objective))
            .or_else(|| {
                let moves = kink_moves(net, kinks, &active, &best, &steps);
                best_candidate(net, moves, best_value, objective)
            });
        match improved {
            Some((plan, v)) => {
                best = plan;
                best_value = v;
            }
            None => {
                let done = steps.iter().zip(&widths).all(|(s, w)| *s <= w * min_rel_step);
                if done {
                    break;
                }
                for s in &mut steps {
                    *s *= 0.5;
                }
            }
        }
    }
    SearchOutcome { plan: best, value: best_value }
}

fn pattern_moves(net: &NetworkSpec, active: &[usize], dirs: &[Vec<i8>], phi: &[f64], steps: &[f64]) -> Vec<Vec<f64>> {
    dirs.iter()
        .filter_map(|dir| {
            let mut out = phi.to_vec();
            let mut moved = false;
            for (j, &k) in active.iter().enumerate() {
                if dir[j] == 0 {
                    continue;
                }
                let e = &net.edges[k];
                let v = (out[k] + dir[j] as f64 * steps[j]).clamp(e.flow_min, e.flow_max);
                moved |= v != out[k];
                out[k] = v;
            }
            moved.then_some(out)
        })
        .collect()
}

fn best_candidate<F>(net: &NetworkSpec, candidates: Vec<Vec<f64>>, best_value: f64, objective: &mut F) -> Option<(Plan, f64)>
where
    F: FnMut(&Plan) -> f64,
{
    let mut found: Option<(Plan, f64)> = None;
    let mut bound = best_value;
    for phi in candidates {
        let q = induced_unchecked(net, &phi);
        let cand = Plan { q, phi };
        if !within_boxes(net, &cand) {
            continue;
        }
        let v = objective(&cand);
        if v < bound {
            bound = v;
            found = Some((cand, v));
        }
    }
    found
}

/// `∂q_i/∂φ_e`.
fn production_jacobian(net: &NetworkSpec, phi: &[f64], nodes: &[usize], edges: &[usize]) -> Vec<Vec<f64>> {
    nodes
        .iter()
        .map(|&i| {
            edges
                .iter()
                .map(|&k| {
                    let e = &net.edges[k];
                    let s = e.sign_at(i);
                    if s == 0.0 {
                        0.0
                    } else {
                        e.resistance * phi[k] - s
                    }
                })
                .collect()
        })
        .collect()
}

/// Solves the small dense system `a x = b` by Gaussian elimination with
/// partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))?;
        if a[p][c].abs() < 1e-14 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            let (top, bottom) = a.split_at_mut(r);
            for (x, &pivot) in bottom[0][c..].iter_mut().zip(&top[c][c..]) {
                *x -= f * pivot;
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Minimum-norm `Jᵀ (J Jᵀ)⁻¹ r`.
fn min_norm_step(jac: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let s = jac.len();
    let gram: Vec<Vec<f64>> = (0..s)
        .map(|a| (0..s).map(|b| jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum()).collect())
        .collect();
    let y = solve_dense(gram, rhs.to_vec())?;
    let m = jac.first().map_or(0, Vec::len);
    Some((0..m).map(|k| (0..s).map(|a| jac[a][k] * y[a]).sum()).collect())
}

/// Newton projection of `phi` (moving only `free` edges) onto `q_i = level` for every pin.
fn project_onto_pins(net: &NetworkSpec, phi: &mut [f64], pins: &[(usize, f64)], free: &[usize]) -> bool {
    let nodes: Vec<usize> = pins.iter().map(|p| p.0).collect();
    for _ in 0..10 {
        let q = induced_unchecked(net, phi);
        let res: Vec<f64> = pins.iter().map(|&(i, level)| level - q[i]).collect();
        if res.iter().zip(pins).all(|(r, (_, l))| r.abs() <= 1e-11 * (1.0 + l.abs())) {
            return true;
        }
        let jac = production_jacobian(net, phi, &nodes, free);
        let Some(delta) = min_norm_step(&jac, &res) else {
            return false;
        };
        for (&k, d) in free.iter().zip(delta) {
            phi[k] += d;
        }
    }
    false
}

/// Moves that keep every production sitting on a kink pinned to it.
///
/// Nodes whose production lies within two steps of one of its kinks are
/// pinned to that kink. Candidates are the current point snapped onto the
/// pins and, for each free edge, the coordinate move projected onto the
/// tangent space of the pin constraints and then pulled back onto them.
/// Edges at a bound stay fixed.
fn kink_moves(net: &NetworkSpec, kinks: &[Vec<f64>], active: &[usize], best: &Plan, steps: &[f64]) -> Vec<Vec<f64>> {
    if kinks.is_empty() {
        return Vec::new();
    }
    let reach = 2.0 * steps.iter().copied().fold(0.0, f64::max) * (1.0 + 1e-6);
    let pins: Vec<(usize, f64)> = kinks
        .iter()
        .enumerate()
        .filter_map(|(i, ks)| {
            ks.iter()
                .map(|&b| (b, (best.q[i] - b).abs()))
                .filter(|&(_, d)| d <= reach)
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(b, _)| (i, b))
        })
        .collect();
    if pins.is_empty() {
        return Vec::new();
    }
    let free: Vec<(usize, f64)> = active
        .iter()
        .zip(steps)
        .filter(|(&k, _)| {
            let e = &net.edges[k];
            best.phi[k] > e.flow_min && best.phi[k] < e.flow_max
        })
        .map(|(&k, &s)| (k, s))
        .collect();
    let free_edges: Vec<usize> = free.iter().map(|f| f.0).collect();
    let mut out = Vec::new();
    let mut snapped = best.phi.clone();
    if project_onto_pins(net, &mut snapped, &pins, &free_edges) && snapped != best.phi {
        out.push(snapped);
    }
    if pins.len() >= free.len() {
        return out;
    }
    let nodes: Vec<usize> = pins.iter().map(|p| p.0).collect();
    let jac = production_jacobian(net, &best.phi, &nodes, &free_edges);
    for (j, &(_, step)) in free.iter().enumerate() {
        // tangent component of the unit move along edge j
        let col: Vec<f64> = jac.iter().map(|row| row[j]).collect();
        let Some(corr) = min_norm_step(&jac, &col) else {
            continue;
        };
        let mut dir: Vec<f64> = corr.iter().map(|c| -c).collect();
        dir[j] += 1.0;
        let norm = dir.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if norm < 1e-9 {
            continue;
        }
        for sign in [-1.0, 1.0] {
            let mut phi = best.phi.clone();
            for (&(k, _), d) in free.iter().zip(&dir) {
                phi[k] += sign * step * d / norm;
            }
            if project_onto_pins(net, &mut phi, &pins, &free_edges)
                && free.iter().all(|&(k, _)| phi[k] >= net.edges[k].flow_min && phi[k] <= net.edges[k].flow_max)
            {
                out.push(phi);
            }
        }
    }
    out
}

/// Kink locations of `Σ` per-node piecewise-linear terms: the positive
/// breakpoints of each producer's cost and pollution functions.
pub fn producer_kinks(producers: &[ProducerSpec]) -> Vec<Vec<f64>> {
    producers
        .iter()
        .map(|p| {
            let mut ks: Vec<f64> = p
                .cost
                .breakpoints
                .iter()
                .chain(&p.pollution.breakpoints)
                .copied()
                .filter(|&b| b > 0.0)
                .collect();
            ks.sort_by(f64::total_cmp);
            ks.dedup();
            ks
        })
        .collect()
}

/// Minimises `objective` over the feasible set: exhaustive evaluation of
/// `grid` followed by pattern refinement from the best `starts` grid points.
///
/// `grid` must be lexicographically ordered (as returned by [`plan_grid`]).
/// Among equal values the lexicographically smallest flow vector wins.
pub fn search_plans<F>(
    net: &NetworkSpec,
    grid: &[Plan],
    options: &SearchOptions,
    kinks: &[Vec<f64>],
    mut objective: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&Plan) -> f64,
{
    if grid.is_empty() {
        return Err(Error::Infeasible(
            "no feasible flow vector on the search grid".into(),
        ));
    }
    let values: Vec<f64> = grid.iter().map(&mut objective).collect();
    let mut order: Vec<usize> = (0..grid.len()).collect();
    // stable sort keeps lexicographic order among ties
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let initial_step = 1.0 / (options.resolution.max(2) - 1) as f64;

    let mut best: Option<SearchOutcome> = None;
    for &k in order.iter().take(options.starts.max(1)) {
        let out = refine_flows(net, &grid[k], values[k], initial_step, options.min_rel_step, kinks, &mut objective);
        let better = match &best {
            None => true,
            Some(b) => out.value < b.value || (out.value == b.value && lex_less(&out.plan.phi, &b.plan.phi)),
        };
        if better {
            best = Some(out);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Total production cost `Σ c_i(q_i)` per unit time.
pub fn production_cost(producers: &[ProducerSpec], q: &[f64]) -> f64 {
    producers.iter().zip(q).map(|(p, &qi)| p.cost.eval_unchecked(qi)).sum()
}

/// Minimum-cost dispatch: minimises `Σ c_i(q_i)` over the feasible plans,
/// ignoring pollution (the no-regulation benchmark).
pub fn min_cost_dispatch(
    net: &NetworkSpec,
    producers: &[ProducerSpec],
    tol: f64,
) -> Result<Plan> {
    min_cost_dispatch_with(net, producers, tol, &SearchOptions::default())
}

pub fn min_cost_dispatch_with(
    net: &NetworkSpec,
    producers: &[ProducerSpec],
    tol: f64,
    options: &SearchOptions,
) -> Result<Plan> {
    net.validate()?;
    if producers.len() != net.n_nodes() {
        return input(format!(
            "{} producers for {} nodes",
            producers.len(),
            net.n_nodes()
        ));
    }
    let grid = plan_grid(net, options.resolution);
    let kinks = producer_kinks(producers);
    let out = search_plans(net, &grid, options, &kinks, |plan| production_cost(producers, &plan.q))?;
    if !is_feasible(net, &out.plan, tol) {
        return Err(Error::Infeasible(format!(
            "dispatch search ended on a plan violating the balance tolerance {tol:e}"
        )));
    }
    Ok(out.plan)
}
