//! Producers: production cost, pollution and effort cost; the market.
//!
//! A producer asked for `q` MWh per hour pays `c(q)` and emits `p(q)` tons of
//! CO₂ per hour before abatement. Effort `a ∈ [0, Ā]` removes the fraction
//! `a` of its emissions at cost `h(a)`. Given a contract sensitivity `z` to
//! the pollution level, its best response minimises `h(a) − z (1−a) p(q)`.

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::network::NetworkSpec;

/// Continuous piecewise-linear function on `[0, ∞)` vanishing at zero.
///
/// `breakpoints[k]` is where segment `k` starts; the last slope extends to
/// infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearFn {
    pub breakpoints: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Cumulative values at the breakpoints.
    #[serde(skip)]
    knot_values: Vec<f64>,
}

impl PiecewiseLinearFn {
    pub fn new(breakpoints: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        let mut f = Self { breakpoints, slopes, knot_values: Vec::new() };
        f.prepare()?;
        Ok(f)
    }

    /// Single-segment function `x ↦ slope·x`.
    pub fn linear(slope: f64) -> Self {
        Self::new(vec![0.0], vec![slope]).expect("valid linear function")
    }

    /// Validates and caches the knot values. Called by the constructors and by
    /// the config loader after deserialisation.
    pub fn prepare(&mut self) -> Result<()> {
        if self.breakpoints.is_empty() || self.breakpoints.len() != self.slopes.len() {
            return Err(Error::Config(
                "piecewise-linear function needs one slope per breakpoint".into(),
            ));
        }
        if self.breakpoints[0] != 0.0 {
            return Err(Error::Config("first breakpoint must be 0".into()));
        }
        if self.breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("breakpoints must be strictly increasing".into()));
        }
        if self.slopes.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("slopes must be finite".into()));
        }
        let mut values = Vec::with_capacity(self.breakpoints.len());
        let mut acc = 0.0;
        values.push(0.0);
        for k in 1..self.breakpoints.len() {
            acc += self.slopes[k - 1] * (self.breakpoints[k] - self.breakpoints[k - 1]);
            values.push(acc);
        }
        self.knot_values = values;
        Ok(())
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.slopes.iter().all(|&s| s >= 0.0)
    }

    /// Evaluates at `x ≥ 0`.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return input(format!("piecewise-linear function evaluated at {x} < 0"));
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> f64 {
        let k = self.breakpoints.partition_point(|&b| b <= x).saturating_sub(1);
        self.knot_values[k] + self.slopes[k] * (x - self.breakpoints[k])
    }

    /// `sup_{[0, upper]} f`.
    pub fn sup_on(&self, upper: f64) -> f64 {
        self.breakpoints
            .iter()
            .copied()
            .filter(|&b| b <= upper)
            .chain(std::iter::once(upper))
            .map(|x| self.eval_unchecked(x))
            .fold(0.0, f64::max)
    }
}

/// Effort cost `h` on the interval `[0, a_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffortCost {
    /// `h(a) = h a² / 2`.
    Quadratic { h: f64, a_max: f64 },
    /// Convex function sampled at equally spaced efforts `0, a_max/(n-1), …, a_max`,
    /// linearly interpolated.
    Tabulated { a_max: f64, values: Vec<f64> },
}

impl EffortCost {
    pub fn a_max(&self) -> f64 {
        match *self {
            EffortCost::Quadratic { a_max, .. } | EffortCost::Tabulated { a_max, .. } => a_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a_max = self.a_max();
        if !(a_max > 0.0 && a_max <= 1.0) {
            return Err(Error::Config(format!("effort bound a_max = {a_max} must lie in (0, 1]")));
        }
        match self {
            EffortCost::Quadratic { h, .. } => {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(Error::Config(format!("quadratic effort curvature h = {h} must be positive")));
                }
            }
            EffortCost::Tabulated { values, .. } => {
                if values.len() < 3 {
                    return Err(Error::Config("tabulated effort cost needs at least 3 samples".into()));
                }
                if values.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::Config("tabulated effort cost must be increasing".into()));
                }
                if values.windows(3).any(|w| !(w[2] - 2.0 * w[1] + w[0] > 0.0)) {
                    return Err(Error::Config("tabulated effort cost must be strictly convex".into()));
                }
            }
        }
        Ok(())
    }

    /// `h(a)` for `a ∈ [0, a_max]` (clamped outside).
    pub fn cost(&self, a: f64) -> f64 {
        match self {
            EffortCost::Quadratic { h, a_max } => {
                let a = a.clamp(0.0, *a_max);
                0.5 * h * a * a
            }
            EffortCost::Tabulated { a_max, values } => {
                let n = values.len() - 1;
                let x = (a.clamp(0.0, *a_max) / a_max) * n as f64;
                let k = (x.floor() as usize).min(n - 1);
                let w = x - k as f64;
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        }
    }

    /// Largest effort cost `h(a_max)`.
    pub fn sup(&self) -> f64 {
        self.cost(self.a_max())
    }

    /// Minimiser over `[0, a_max]` of `h(a) − z (1−a) level`, where `level` is
    /// the unabated emission rate.
    pub fn best_response(&self, level: f64, z: f64) -> f64 {
        match *self {
            EffortCost::Quadratic { h, a_max } => (-z * level / h).clamp(0.0, a_max),
            EffortCost::Tabulated { a_max, ref values } => {
                // the interpolant is minimised at a knot: the last one whose
                // incoming slope is at most −z·level (ties go to more effort)
                let target = -z * level;
                let da = a_max / (values.len() - 1) as f64;
                let k = values.windows(2).take_while(|w| (w[1] - w[0]) / da <= target).count();
                k as f64 * da
            }
        }
    }

    /// Knot spacing and sampled values of a tabulated cost.
    pub(crate) fn tabulated_knots(&self) -> Option<(f64, &[f64])> {
        match self {
            EffortCost::Tabulated { a_max, values } => Some((a_max / (values.len() - 1) as f64, values)),
            EffortCost::Quadratic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerSpec {
    /// Production cost `c_i` in dollars per hour.
    pub cost: PiecewiseLinearFn,
    /// Unabated emissions `p_i` in tons per hour.
    pub pollution: PiecewiseLinearFn,
    pub effort: EffortCost,
    /// Production capacity `Q_i`, copied from the network node.
    #[serde(default = "infinite")]
    pub capacity: f64,
}

fn infinite() -> f64 {
    f64::INFINITY
}

impl ProducerSpec {
    pub fn validate(&self) -> Result<()> {
        self.effort.validate()?;
        if !self.cost.is_nondecreasing() || !self.pollution.is_nondecreasing() {
            return Err(Error::Config("cost and pollution functions must be nondecreasing".into()));
        }
        Ok(())
    }

    fn check_production(&self, q: f64) -> Result<()> {
        if !(q >= 0.0 && q <= self.capacity) {
            return input(format!("production {q} outside [0, {}]", self.capacity));
        }
        Ok(())
    }

    /// Emission rate before abatement at production `q`.
    pub fn emission(&self, q: f64) -> f64 {
        self.pollution.eval_unchecked(q)
    }

    pub fn production_cost(&self, q: f64) -> f64 {
        self.cost.eval_unchecked(q)
    }
}

/// Social cost of pollution `Λ` applied to `L − ℓ₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SocialCost {
    /// `Λ(x) = λ x`.
    Linear { lambda: f64 },
    /// `Λ(x) = λ max(x, 0)`. Not differentiable at 0; its derivative there is taken as 0.
    Rectified { lambda: f64 },
    /// `Λ ≡ 0`.
    Zero,
}

impl SocialCost {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            SocialCost::Linear { lambda } => lambda * x,
            SocialCost::Rectified { lambda } => lambda * x.max(0.0),
            SocialCost::Zero => 0.0,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            SocialCost::Linear { lambda } => lambda,
            SocialCost::Rectified { lambda } => {
                if x > 0.0 {
                    lambda
                } else {
                    0.0
                }
            }
            SocialCost::Zero => 0.0,
        }
    }

    /// Lipschitz constant, which bounds `|v_ℓ|` by `lipschitz · (T − t)`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            SocialCost::Linear { lambda } | SocialCost::Rectified { lambda } => lambda.abs(),
            SocialCost::Zero => 0.0,
        }
    }

    pub fn is_nondecreasing(&self) -> bool {
        match *self {
            SocialCost::Linear { lambda } | SocialCost::Rectified { lambda } => lambda >= 0.0,
            SocialCost::Zero => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// CARA risk aversion `ρ` of the producers.
    pub rho: f64,
    /// Pollution volatility `σ` (tons per √hour). Zero gives the deterministic limit.
    pub sigma: f64,
    pub social_cost: SocialCost,
    /// Pollution target `ℓ₀`.
    pub ell0: f64,
    /// Contract horizon `T` (hours).
    pub horizon: f64,
    /// Reservation utilities `R₀ⁱ < 0`, one per producer.
    pub reservations: Vec<f64>,
}

impl MarketParams {
    pub fn validate(&self, n_producers: usize) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("risk aversion rho = {} must be positive", self.rho)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("volatility sigma = {} must be nonnegative", self.sigma)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon T = {} must be positive", self.horizon)));
        }
        if self.reservations.len() != n_producers {
            return Err(Error::Config(format!(
                "{} reservation utilities for {} producers",
                self.reservations.len(),
                n_producers
            )));
        }
        if self.reservations.iter().any(|&r| !(r < 0.0)) {
            return Err(Error::Config("reservation utilities must be negative".into()));
        }
        Ok(())
    }

    /// Initial certainty equivalents `yⁱ = −(1/ρ) log(−R₀ⁱ)`.
    pub fn initial_certainty_equivalents(&self) -> Vec<f64> {
        self.reservations
            .iter()
            .map(|&r| certainty_equivalent(self.rho, r).expect("validated reservation"))
            .collect()
    }

    /// `ρσ²/2`, the price of exposing a producer to the pollution noise.
    pub fn risk_premium(&self) -> f64 {
        0.5 * self.rho * self.sigma * self.sigma
    }
}

/// Network, producers (one per node, same order) and market parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub network: NetworkSpec,
    pub producers: Vec<ProducerSpec>,
    pub market: MarketParams,
}

impl Model {
    /// Validates and copies node capacities onto the producers.
    pub fn new(network: NetworkSpec, mut producers: Vec<ProducerSpec>, market: MarketParams) -> Result<Self> {
        network.validate()?;
        if producers.len() != network.n_nodes() {
            return Err(Error::Config(format!(
                "{} producers for {} nodes",
                producers.len(),
                network.n_nodes()
            )));
        }
        for (p, node) in producers.iter_mut().zip(&network.nodes) {
            p.capacity = node.capacity;
            p.validate()?;
        }
        market.validate(producers.len())?;
        Ok(Self { network, producers, market })
    }

    pub fn n(&self) -> usize {
        self.producers.len()
    }

    /// `p̄`: largest emission rate any producer can reach within capacity.
    pub fn p_bar(&self) -> f64 {
        self.producers.iter().map(|p| p.pollution.sup_on(p.capacity)).fold(0.0, f64::max)
    }

    /// `c̄`: largest production cost within capacity.
    pub fn c_bar(&self) -> f64 {
        self.producers.iter().map(|p| p.cost.sup_on(p.capacity)).fold(0.0, f64::max)
    }

    /// `h̄`: largest effort cost.
    pub fn h_bar(&self) -> f64 {
        self.producers.iter().map(|p| p.effort.sup()).fold(0.0, f64::max)
    }

    /// Largest possible pollution drift `N p̄`.
    pub fn max_drift(&self) -> f64 {
        self.n() as f64 * self.p_bar()
    }
}

/// Nash best-response effort `a*(q_i, z_i)` of one producer.
pub fn best_effort(prod: &ProducerSpec, q: f64, z: f64) -> Result<f64> {
    prod.check_production(q)?;
    Ok(prod.effort.best_response(prod.emission(q), z))
}

/// Drift of the certainty equivalents,
/// `fⁱ = hᵢ(a*ⁱ) + cᵢ(qⁱ) − zⁱ Σⱼ (1−a*ʲ) pⱼ(qʲ) + ρσ²/2 (zⁱ)²`.
pub fn generator_f(producers: &[ProducerSpec], params: &MarketParams, q: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    if q.len() != producers.len() || z.len() != producers.len() {
        return input(format!(
            "generator needs {} productions and sensitivities, got {} and {}",
            producers.len(),
            q.len(),
            z.len()
        ));
    }
    let efforts = producers
        .iter()
        .zip(q.iter().zip(z))
        .map(|(p, (&qi, &zi))| best_effort(p, qi, zi))
        .collect::<Result<Vec<f64>>>()?;
    let drift: f64 = producers
        .iter()
        .zip(q.iter().zip(&efforts))
        .map(|(p, (&qi, &a))| (1.0 - a) * p.emission(qi))
        .sum();
    let premium = params.risk_premium();
    Ok(producers
        .iter()
        .enumerate()
        .map(|(i, p)| p.effort.cost(efforts[i]) + p.production_cost(q[i]) - z[i] * drift + premium * z[i] * z[i])
        .collect())
}

/// CARA utility `U(x) = −exp(−ρx)`.
pub fn cara_utility(rho: f64, x: f64) -> f64 {
    -(-rho * x).exp()
}

/// Inverse of [`cara_utility`]: the amount whose utility is `u < 0`.
pub fn certainty_equivalent(rho: f64, u: f64) -> Result<f64> {
    if !(u < 0.0) {
        return input(format!("CARA utilities are negative, got {u}"));
    }
    if !(rho > 0.0) {
        return input(format!("risk aversion must be positive, got {rho}"));
    }
    Ok(0.0 - (-u).ln() / rho)
}
