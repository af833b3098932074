//! Explicit finite-difference solver for the regulator's value function.
//!
//! Backward Euler in time from `v(T, ·) = 0`, upwind forward differences for
//! the (nonnegative) pollution drift and central second differences. At the
//! two ends of the pollution axis ghost values are extrapolated linearly, so
//! the second derivative vanishes there. The scheme is monotone under
//! `Δt ≤ Δℓ² / (σ² + Δℓ·N·p̄)`, which [`Grid::check_stability`] enforces.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{input, Error, Result};
use crate::hamiltonian::{inner_min_at_level, select_for_plan, OptimizerSelection, PlanSearch, SelectionCache};
use crate::network::{is_feasible, Plan, SearchOptions, DEFAULT_FEASIBILITY_TOL};
use crate::producer::Model;

/// Default number of pollution nodes.
pub const DEFAULT_N_ELL: usize = 600;

/// Uniform time–pollution grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub ell_min: f64,
    pub ell_max: f64,
    pub n_ell: usize,
    /// Number of time steps; slices are `0..=n_t`.
    pub n_t: usize,
    pub horizon: f64,
}

impl Grid {
    pub fn new(ell_min: f64, ell_max: f64, n_ell: usize, n_t: usize, horizon: f64) -> Result<Self> {
        if !(ell_min < ell_max) || !ell_min.is_finite() || !ell_max.is_finite() {
            return Err(Error::Config(format!("pollution range [{ell_min}, {ell_max}] is empty")));
        }
        if n_ell < 3 {
            return Err(Error::Config(format!("need at least 3 pollution nodes, got {n_ell}")));
        }
        if n_t < 1 {
            return Err(Error::Config("need at least one time step".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::Config(format!("horizon {horizon} must be positive")));
        }
        Ok(Self { ell_min, ell_max, n_ell, n_t, horizon })
    }

    /// Pollution range `[max(0, L₀ − 4σ√T), L₀ + N p̄ T + 4σ√T]` with the
    /// fewest time steps allowed by the stability bound.
    pub fn for_model(model: &Model, l0: f64, n_ell: usize) -> Result<Self> {
        let m = &model.market;
        let spread = 4.0 * m.sigma * m.horizon.sqrt();
        let ell_min = (l0 - spread).max(0.0);
        let ell_max = l0 + model.max_drift() * m.horizon + spread;
        let mut grid = Self::new(ell_min, ell_max, n_ell, 1, m.horizon)?;
        let bound = grid.stability_bound(model.max_drift(), m.sigma);
        grid.n_t = if bound.is_finite() { (m.horizon / bound).ceil().max(1.0) as usize } else { 1 };
        Ok(grid)
    }

    pub fn d_ell(&self) -> f64 {
        (self.ell_max - self.ell_min) / (self.n_ell - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    pub fn ell(&self, j: usize) -> f64 {
        self.ell_min + j as f64 * self.d_ell()
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.n_t {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Largest stable time step for the given drift bound and volatility.
    pub fn stability_bound(&self, max_drift: f64, sigma: f64) -> f64 {
        let dl = self.d_ell();
        dl * dl / (sigma * sigma + dl * max_drift)
    }

    pub fn check_stability(&self, max_drift: f64, sigma: f64) -> Result<()> {
        let bound = self.stability_bound(max_drift, sigma);
        let dt = self.dt();
        if dt > bound * (1.0 + 1e-12) {
            return Err(Error::Stability { dt, bound });
        }
        Ok(())
    }

    pub fn contains(&self, t: f64, ell: f64) -> bool {
        (0.0..=self.horizon).contains(&t) && (self.ell_min..=self.ell_max).contains(&ell)
    }
}

/// Optimiser fields stored at every grid node, flattened as `[slice][node][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFields {
    pub n_producers: usize,
    pub n_edges: usize,
    pub z: Vec<f64>,
    pub q: Vec<f64>,
    pub phi: Vec<f64>,
    pub a: Vec<f64>,
}

impl PolicyFields {
    fn with_capacity(nodes: usize, n: usize, e: usize) -> Self {
        Self {
            n_producers: n,
            n_edges: e,
            z: Vec::with_capacity(nodes * n),
            q: Vec::with_capacity(nodes * n),
            phi: Vec::with_capacity(nodes * e),
            a: Vec::with_capacity(nodes * n),
        }
    }

    fn push(&mut self, sel: &OptimizerSelection) {
        self.z.extend_from_slice(&sel.z_star);
        self.q.extend_from_slice(&sel.plan_star.q);
        self.phi.extend_from_slice(&sel.plan_star.phi);
        self.a.extend_from_slice(&sel.effort_star);
    }

    fn z_at(&self, node: usize) -> &[f64] {
        &self.z[node * self.n_producers..(node + 1) * self.n_producers]
    }

    fn q_at(&self, node: usize) -> &[f64] {
        &self.q[node * self.n_producers..(node + 1) * self.n_producers]
    }

    fn phi_at(&self, node: usize) -> &[f64] {
        &self.phi[node * self.n_edges..(node + 1) * self.n_edges]
    }

    fn a_at(&self, node: usize) -> &[f64] {
        &self.a[node * self.n_producers..(node + 1) * self.n_producers]
    }
}

/// Policy looked up from a surface at one `(t, ℓ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPoint {
    pub z: Vec<f64>,
    pub plan: Plan,
    pub effort: Vec<f64>,
}

/// Solution of the value equation on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurface {
    pub grid: Grid,
    /// Values, `(n_t+1) × n_ell`, row-major in time.
    pub v: Vec<f64>,
    /// Spatial derivative (central differences, one-sided at the ends).
    pub v_ell: Vec<f64>,
    /// Optimisers at every node of slices `0..=n_t`, when requested.
    pub policy: Option<PolicyFields>,
}

impl ValueSurface {
    fn idx(&self, k: usize, j: usize) -> usize {
        k * self.grid.n_ell + j
    }

    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.v[self.idx(k, j)]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.v[k * self.grid.n_ell..(k + 1) * self.grid.n_ell]
    }

    fn locate(&self, t: f64, ell: f64) -> (usize, f64, usize, f64) {
        let g = &self.grid;
        let x = ((ell - g.ell_min) / g.d_ell()).clamp(0.0, (g.n_ell - 1) as f64);
        let j = (x.floor() as usize).min(g.n_ell - 2);
        let s = ((t / g.dt()).clamp(0.0, g.n_t as f64)).min(g.n_t as f64);
        let k = (s.floor() as usize).min(g.n_t - 1);
        (k, s - k as f64, j, x - j as f64)
    }

    /// Policy at `(t, ℓ)`: the plan of the nearest pollution node in the time
    /// slice containing `t`; sensitivities interpolated linearly in `ℓ` when
    /// both neighbours share that plan. Efforts are the best responses.
    pub fn policy_at(&self, model: &Model, t: f64, ell: f64) -> Result<PolicyPoint> {
        let Some(pol) = &self.policy else {
            return input("surface was solved without policy storage");
        };
        let (k, _, j, wj) = self.locate(t, ell);
        let lo = self.idx(k, j);
        let hi = lo + 1;
        let near = if wj < 0.5 { lo } else { hi };
        let q = pol.q_at(near).to_vec();
        let phi = pol.phi_at(near).to_vec();
        let same = pol.q_at(lo) == pol.q_at(hi) && pol.phi_at(lo) == pol.phi_at(hi);
        let z: Vec<f64> = if same {
            pol.z_at(lo).iter().zip(pol.z_at(hi)).map(|(a, b)| a * (1.0 - wj) + b * wj).collect()
        } else {
            pol.z_at(near).to_vec()
        };
        let effort = model
            .producers
            .iter()
            .zip(q.iter().zip(&z))
            .map(|(p, (&qi, &zi))| p.effort.best_response(p.emission(qi), zi))
            .collect();
        Ok(PolicyPoint { z, plan: Plan { q, phi }, effort })
    }

    /// Writes the surface (every `t_stride`-th slice, every `ell_stride`-th node) as CSV.
    pub fn write_csv(&self, path: &Path, t_stride: usize, ell_stride: usize) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let (n, e) = self.policy.as_ref().map_or((0, 0), |p| (p.n_producers, p.n_edges));
        let mut header = vec!["t".to_string(), "ell".into(), "v".into(), "v_ell".into()];
        header.extend((1..=n).map(|i| format!("z_star_{i}")));
        header.extend((1..=n).map(|i| format!("q_star_{i}")));
        header.extend((1..=e).map(|i| format!("phi_star_{i}")));
        header.extend((1..=n).map(|i| format!("a_star_{i}")));
        w.write_record(&header)?;
        let g = &self.grid;
        let mut ks: Vec<usize> = (0..=g.n_t).step_by(t_stride.max(1)).collect();
        if ks.last() != Some(&g.n_t) {
            ks.push(g.n_t);
        }
        for k in ks {
            for j in (0..g.n_ell).step_by(ell_stride.max(1)) {
                let node = self.idx(k, j);
                let mut row = vec![g.t(k), g.ell(j), self.v[node], self.v_ell[node]];
                if let Some(p) = &self.policy {
                    row.extend_from_slice(p.z_at(node));
                    row.extend_from_slice(p.q_at(node));
                    row.extend_from_slice(p.phi_at(node));
                    row.extend_from_slice(p.a_at(node));
                }
                w.write_record(row.iter().map(|x| x.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Bilinear interpolation of the value and its stored slope.
pub fn value_at(surface: &ValueSurface, t: f64, ell: f64) -> Result<(f64, f64)> {
    let g = &surface.grid;
    let tol = 1e-9 * (g.ell_max - g.ell_min).abs().max(1.0);
    if !(t >= -1e-12 * g.horizon && t <= g.horizon * (1.0 + 1e-12)) || !(ell >= g.ell_min - tol && ell <= g.ell_max + tol) {
        return input(format!("query ({t}, {ell}) outside the solution grid"));
    }
    let (k, wk, j, wj) = surface.locate(t, ell);
    let interp = |f: &[f64]| {
        let at = |kk: usize, jj: usize| f[kk * g.n_ell + jj];
        let lo = at(k, j) * (1.0 - wj) + at(k, j + 1) * wj;
        let hi = at(k + 1, j) * (1.0 - wj) + at(k + 1, j + 1) * wj;
        lo * (1.0 - wk) + hi * wk
    };
    Ok((interp(&surface.v), interp(&surface.v_ell)))
}

/// Settings of the general solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub search: SearchOptions,
    /// Spacing of the slope lattice used to memoise plan searches; `None` uses
    /// [`SelectionCache::default_step`].
    pub alpha_step: Option<f64>,
    pub store_policy: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { search: SearchOptions::default(), alpha_step: None, store_policy: true }
    }
}

/// Upwind slopes and second differences with linear extrapolation at the ends.
fn differences(v: &[f64], dl: f64) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut alpha = Vec::with_capacity(n);
    let mut gamma = Vec::with_capacity(n);
    for j in 0..n {
        let a = if j + 1 < n { (v[j + 1] - v[j]) / dl } else { (v[j] - v[j - 1]) / dl };
        let c = if j == 0 || j + 1 == n { 0.0 } else { (v[j + 1] - 2.0 * v[j] + v[j - 1]) / (dl * dl) };
        alpha.push(a);
        gamma.push(c);
    }
    (alpha, gamma)
}

fn central_slopes(v: &[f64], dl: f64) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|j| {
            if j == 0 {
                (v[1] - v[0]) / dl
            } else if j + 1 == n {
                (v[j] - v[j - 1]) / dl
            } else {
                (v[j + 1] - v[j - 1]) / (2.0 * dl)
            }
        })
        .collect()
}

fn finish(grid: Grid, v: Vec<f64>, policy: Option<PolicyFields>) -> ValueSurface {
    let dl = grid.d_ell();
    let v_ell = v.chunks(grid.n_ell).flat_map(|row| central_slopes(row, dl)).collect();
    ValueSurface { grid, v, v_ell, policy }
}

/// Solves the value equation with the plan optimised at every node.
pub fn solve_general(model: &Model, grid: Grid, options: &SolveOptions) -> Result<ValueSurface> {
    let m = &model.market;
    grid.check_stability(model.max_drift(), m.sigma)?;
    let search = PlanSearch::new(model, options.search)?;
    let step = options.alpha_step.unwrap_or_else(|| SelectionCache::default_step(model));
    let mut cache = SelectionCache::new(search, step)?;
    let n_ell = grid.n_ell;
    let dt = grid.dt();
    let dl = grid.d_ell();
    let penalty: Vec<f64> = (0..n_ell).map(|j| m.social_cost.eval(grid.ell(j) - m.ell0)).collect();
    let half_var = 0.5 * m.sigma * m.sigma;

    let mut v = vec![0.0; (grid.n_t + 1) * n_ell];
    let mut slices: Vec<Vec<OptimizerSelection>> = Vec::new();
    if options.store_policy {
        slices.reserve(grid.n_t + 1);
    }
    let mut terminal_policy = None;
    for k in (0..grid.n_t).rev() {
        let (next, rest) = v.split_at_mut((k + 1) * n_ell);
        let next_row = &rest[..n_ell];
        let row = &mut next[k * n_ell..];
        let (alpha, gamma) = differences(next_row, dl);
        cache.prefill(&alpha)?;
        let sels: Vec<OptimizerSelection> = alpha.par_iter().map(|&a| cache.lookup(a)).collect();
        for j in 0..n_ell {
            row[j] = next_row[j] + dt * (sels[j].g_value + half_var * gamma[j] + penalty[j]);
        }
        if options.store_policy {
            if k + 1 == grid.n_t {
                terminal_policy = Some(sels.clone());
            }
            slices.push(sels);
        }
        if k % 100 == 0 {
            log::debug!("slice {k}: v(ℓ_min) = {:.6e}, lattice size {}", row[0], cache.len());
        }
    }
    let policy = if options.store_policy {
        // slice n_t reuses the zero-slope selection of the last step
        slices.reverse();
        slices.push(terminal_policy.expect("at least one step"));
        let mut fields = PolicyFields::with_capacity((grid.n_t + 1) * n_ell, model.n(), model.network.n_edges());
        for sel in slices.iter().flatten() {
            fields.push(sel);
        }
        Some(fields)
    } else {
        None
    };
    Ok(finish(grid, v, policy))
}

/// Precomputed per-producer data for a frozen plan.
struct FrozenPlan<'a> {
    model: &'a Model,
    levels: Vec<f64>,
    cost2: f64,
    premium: f64,
}

impl<'a> FrozenPlan<'a> {
    fn new(model: &'a Model, plan: &Plan) -> Self {
        let levels = model.producers.iter().zip(&plan.q).map(|(p, &q)| p.emission(q)).collect();
        let cost2 = 2.0 * model.producers.iter().zip(&plan.q).map(|(p, &q)| p.production_cost(q)).sum::<f64>();
        Self { model, levels, cost2, premium: model.market.risk_premium() }
    }

    fn g(&self, alpha: f64) -> f64 {
        self.model
            .producers
            .iter()
            .zip(&self.levels)
            .map(|(p, &l)| inner_min_at_level(&p.effort, self.premium, alpha, l).value)
            .sum::<f64>()
            + self.cost2
    }
}

/// Solves the value equation with the plan held at `plan`; only the
/// sensitivities are optimised.
pub fn solve_fixed_plan(model: &Model, plan: &Plan, grid: Grid, store_policy: bool) -> Result<ValueSurface> {
    if !is_feasible(&model.network, plan, DEFAULT_FEASIBILITY_TOL) {
        return input("fixed plan is not feasible");
    }
    let m = &model.market;
    grid.check_stability(model.max_drift(), m.sigma)?;
    let frozen = FrozenPlan::new(model, plan);
    let n_ell = grid.n_ell;
    let dt = grid.dt();
    let dl = grid.d_ell();
    let penalty: Vec<f64> = (0..n_ell).map(|j| m.social_cost.eval(grid.ell(j) - m.ell0)).collect();
    let half_var = 0.5 * m.sigma * m.sigma;

    let mut v = vec![0.0; (grid.n_t + 1) * n_ell];
    let mut fields = store_policy
        .then(|| PolicyFields::with_capacity((grid.n_t + 1) * n_ell, model.n(), model.network.n_edges()));
    let mut alphas_by_slice: Vec<Vec<f64>> = Vec::new();
    for k in (0..grid.n_t).rev() {
        let (next, rest) = v.split_at_mut((k + 1) * n_ell);
        let next_row = &rest[..n_ell];
        let row = &mut next[k * n_ell..];
        let (alpha, gamma) = differences(next_row, dl);
        for j in 0..n_ell {
            row[j] = next_row[j] + dt * (frozen.g(alpha[j]) + half_var * gamma[j] + penalty[j]);
        }
        if store_policy {
            alphas_by_slice.push(alpha);
        }
    }
    if let Some(f) = fields.as_mut() {
        alphas_by_slice.reverse();
        let last = alphas_by_slice.last().cloned().expect("at least one step");
        alphas_by_slice.push(last);
        for alpha in &alphas_by_slice {
            for &a in alpha {
                f.push(&select_for_plan(model, a, plan));
            }
        }
    }
    Ok(finish(grid, v, fields))
}

/// One explicit step of the frozen-plan scheme, mapping slice `k+1` to slice `k`.
pub fn fixed_plan_step(model: &Model, plan: &Plan, grid: &Grid, next: &[f64]) -> Vec<f64> {
    let frozen = FrozenPlan::new(model, plan);
    let m = &model.market;
    let (alpha, gamma) = differences(next, grid.d_ell());
    let half_var = 0.5 * m.sigma * m.sigma;
    (0..next.len())
        .map(|j| {
            next[j]
                + grid.dt() * (frozen.g(alpha[j]) + half_var * gamma[j] + m.social_cost.eval(grid.ell(j) - m.ell0))
        })
        .collect()
}
