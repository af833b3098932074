//! JSON scenario files.
//!
//! ```json
//! {
//!   "name": "two-node",
//!   "nodes": [{"id": 1, "demand": 5, "capacity": 20}, ...],
//!   "edges": [{"from": 1, "to": 2, "resistance": 0.01, "flow_min": 0, "flow_max": 10}],
//!   "producers": [{
//!     "cost_breakpoints": [0, 10], "cost_slopes": [1, 2],
//!     "pollution_breakpoints": [0], "pollution_slopes": [1],
//!     "effort": {"kind": "quadratic", "h": 1, "a_max": 0.5}
//!   }, ...],
//!   "market": {"rho": 1, "sigma": 1, "lambda": 1, "social_cost": "linear",
//!              "ell0": 0, "horizon": 1, "reservations": [-1, -1]},
//!   "initial_pollution": 0,
//!   "solver": {"n_ell": 600, "resolution": 25},
//!   "simulation": {"n_paths": 2000, "dt": 0.001, "seed": 7}
//! }
//! ```
//!
//! Omitted `solver`, `simulation` and `constant_plan` sections take their
//! defaults; omitted reservations default to `-1` for every producer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{EdgeSpec, NetworkSpec, NodeSpec, SearchOptions, DEFAULT_RESOLUTION};
use crate::producer::{EffortCost, MarketParams, Model, PiecewiseLinearFn, ProducerSpec, SocialCost};

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawProducer {
    cost_breakpoints: Vec<f64>,
    cost_slopes: Vec<f64>,
    pollution_breakpoints: Vec<f64>,
    pollution_slopes: Vec<f64>,
    effort: EffortCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
enum SocialCostKind {
    Linear,
    Rectified,
    Zero,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawMarket {
    rho: f64,
    sigma: f64,
    #[serde(default)]
    lambda: f64,
    social_cost: SocialCostKind,
    #[serde(default)]
    ell0: f64,
    horizon: f64,
    #[serde(default)]
    reservations: Option<Vec<f64>>,
}

/// Numerical settings of the value-function solver.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub n_ell: usize,
    /// Grid points per edge of the plan search.
    pub resolution: usize,
    /// Number of best grid plans refined locally.
    pub refine_starts: usize,
    /// Slope lattice cells per `λT`.
    pub alpha_cells: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { n_ell: crate::hjb::DEFAULT_N_ELL, resolution: DEFAULT_RESOLUTION, refine_starts: 2, alpha_cells: 2048 }
    }
}

impl SolverSettings {
    pub fn search_options(&self) -> SearchOptions {
        SearchOptions { resolution: self.resolution, starts: self.refine_starts, ..SearchOptions::default() }
    }
}

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    pub n_paths: usize,
    /// Time step; `None` means `T / 1000`.
    pub dt: Option<f64>,
    pub seed: u64,
    pub antithetic: bool,
    /// Number of paths whose full trajectories are kept.
    pub stored_paths: usize,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self { n_paths: 2000, dt: None, seed: 20240601, antithetic: false, stored_paths: 20 }
    }
}

/// Settings of the constant-plan optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantPlanSettings {
    /// Grid points per edge of the candidate sweep.
    pub resolution: usize,
    /// Best sweep candidates refined locally.
    pub refine_starts: usize,
    /// Candidates re-scored on the full grid.
    pub finalists: usize,
}

impl Default for ConstantPlanSettings {
    fn default() -> Self {
        Self { resolution: 13, refine_starts: 2, finalists: 4 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    name: String,
    #[serde(default)]
    description: String,
    nodes: Vec<NodeSpec>,
    #[serde(default)]
    edges: Vec<EdgeSpec>,
    producers: Vec<RawProducer>,
    market: RawMarket,
    initial_pollution: f64,
    #[serde(default)]
    solver: SolverSettings,
    #[serde(default)]
    simulation: SimulationSettings,
    #[serde(default)]
    constant_plan: ConstantPlanSettings,
}

/// A validated model plus run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub model: Model,
    /// Pollution level `L₀` at time zero.
    pub initial_pollution: f64,
    pub solver: SolverSettings,
    pub simulation: SimulationSettings,
    pub constant_plan: ConstantPlanSettings,
}

impl Scenario {
    /// Parses a scenario; syntax errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawScenario = serde_json::from_str(text)?;
        Self::from_raw(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn from_raw(raw: RawScenario) -> Result<Self> {
        let network = NetworkSpec { nodes: raw.nodes, edges: raw.edges };
        let producers = raw
            .producers
            .into_iter()
            .map(|p| {
                Ok(ProducerSpec {
                    cost: PiecewiseLinearFn::new(p.cost_breakpoints, p.cost_slopes)?,
                    pollution: PiecewiseLinearFn::new(p.pollution_breakpoints, p.pollution_slopes)?,
                    effort: p.effort,
                    capacity: f64::INFINITY,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = raw.market;
        let social_cost = match m.social_cost {
            SocialCostKind::Linear => SocialCost::Linear { lambda: m.lambda },
            SocialCostKind::Rectified => SocialCost::Rectified { lambda: m.lambda },
            SocialCostKind::Zero => SocialCost::Zero,
        };
        let reservations = m.reservations.unwrap_or_else(|| vec![-1.0; producers.len()]);
        let market = MarketParams { rho: m.rho, sigma: m.sigma, social_cost, ell0: m.ell0, horizon: m.horizon, reservations };
        let model = Model::new(network, producers, market)?;
        if !raw.initial_pollution.is_finite() {
            return Err(Error::Config("initial_pollution must be finite".into()));
        }
        if raw.simulation.n_paths == 0 {
            return Err(Error::Config("simulation.n_paths must be at least 1".into()));
        }
        if raw.solver.alpha_cells == 0 || raw.solver.resolution < 2 {
            return Err(Error::Config("solver.alpha_cells must be positive and solver.resolution at least 2".into()));
        }
        Ok(Self {
            name: raw.name,
            description: raw.description,
            model,
            initial_pollution: raw.initial_pollution,
            solver: raw.solver,
            simulation: raw.simulation,
            constant_plan: raw.constant_plan,
        })
    }

    /// Slope lattice spacing for the general solve.
    pub fn alpha_step(&self) -> f64 {
        let span = self.model.market.social_cost.lipschitz() * self.model.market.horizon;
        if span > 0.0 {
            span / self.solver.alpha_cells as f64
        } else {
            1.0
        }
    }

    /// Simulation time step.
    pub fn sim_dt(&self) -> f64 {
        self.simulation.dt.unwrap_or(self.model.market.horizon / 1000.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_NODE: &str = r#"{
        "name": "two",
        "nodes": [{"id": 1, "demand": 5, "capacity": 20}, {"id": 2, "demand": 10, "capacity": 20}],
        "edges": [{"from": 1, "to": 2, "resistance": 0.01, "flow_min": 0, "flow_max": 8}],
        "producers": [
            {"cost_breakpoints": [0], "cost_slopes": [1], "pollution_breakpoints": [0], "pollution_slopes": [1],
             "effort": {"kind": "quadratic", "h": 1, "a_max": 0.5}},
            {"cost_breakpoints": [0, 4], "cost_slopes": [0, 3], "pollution_breakpoints": [0], "pollution_slopes": [0.2],
             "effort": {"kind": "quadratic", "h": 2, "a_max": 0.5}}
        ],
        "market": {"rho": 1, "sigma": 0.5, "lambda": 2, "social_cost": "rectified", "ell0": 3, "horizon": 1},
        "initial_pollution": 0
    }"#;

    #[test]
    fn parses_and_fills_defaults() {
        let s = Scenario::from_json(TWO_NODE).unwrap();
        assert_eq!(s.model.market.reservations, vec![-1.0, -1.0]);
        assert_eq!(s.model.producers[1].capacity, 20.0);
        assert_eq!(s.solver, SolverSettings::default());
        assert_eq!(s.model.market.social_cost, SocialCost::Rectified { lambda: 2.0 });
        assert_eq!(s.alpha_step(), 2.0 / 2048.0);
    }

    #[test]
    fn syntax_errors_carry_position() {
        let broken = TWO_NODE.replace("\"capacity\": 20}, {", "\"capacity\": 20} {");
        let err = Scenario::from_json(&broken).unwrap_err().to_string();
        assert!(err.contains("line 3 column 58"), "{err}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let bad = TWO_NODE.replace("\"a_max\": 0.5}},", "\"a_max\": 1.5}},");
        assert!(matches!(Scenario::from_json(&bad), Err(Error::Config(_))));
        let typo = TWO_NODE.replace("\"rho\"", "\"rhoo\"");
        assert!(Scenario::from_json(&typo).is_err());
    }
}
