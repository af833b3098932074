//! Explicit solution for linear social cost, linear pollution, quadratic
//! effort costs and a frozen plan.
//!
//! When every producer satisfies `M_i ≥ λT` the optimal sensitivities never
//! hit the effort bound, the value is a cubic polynomial in `T − t` and affine
//! in `ℓ`. Used as an oracle for the solver and the simulator.

use crate::error::{input, Error, Result};
use crate::producer::{EffortCost, Model, SocialCost};

/// Parameters of one producer in the explicit regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplicitProducer {
    /// Pollution per unit of production `p_i`.
    pub pollution_rate: f64,
    /// Production level `q_i`.
    pub production: f64,
    /// Effort curvature `h_i`.
    pub h: f64,
    pub a_max: f64,
    /// Production cost `c_i(q_i)` per unit time.
    pub production_cost: f64,
}

impl ExplicitProducer {
    /// Emission rate `p_i q_i`.
    pub fn level(&self) -> f64 {
        self.pollution_rate * self.production
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitSpec {
    pub producers: Vec<ExplicitProducer>,
    pub lambda: f64,
    pub sigma: f64,
    pub rho: f64,
    pub horizon: f64,
    pub ell0: f64,
}

/// Outcome of [`check_regime`].
#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    /// `M_i` per producer.
    pub m: Vec<f64>,
    pub valid: bool,
}

impl ExplicitSpec {
    /// Extracts the explicit data from a model whose plan is frozen at `q`.
    ///
    /// Requires a linear social cost, single-slope pollution functions and
    /// quadratic effort costs.
    pub fn from_model(model: &Model, q: &[f64]) -> Result<Self> {
        let lambda = match model.market.social_cost {
            SocialCost::Linear { lambda } => lambda,
            _ => return input("explicit solution needs a linear social cost"),
        };
        if q.len() != model.n() {
            return input(format!("{} productions for {} producers", q.len(), model.n()));
        }
        let producers = model
            .producers
            .iter()
            .zip(q)
            .map(|(p, &qi)| {
                if p.pollution.slopes.len() != 1 {
                    return input("explicit solution needs linear pollution functions");
                }
                let EffortCost::Quadratic { h, a_max } = p.effort else {
                    return input("explicit solution needs quadratic effort costs");
                };
                Ok(ExplicitProducer {
                    pollution_rate: p.pollution.slopes[0],
                    production: qi,
                    h,
                    a_max,
                    production_cost: p.production_cost(qi),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            producers,
            lambda,
            sigma: model.market.sigma,
            rho: model.market.rho,
            horizon: model.market.horizon,
            ell0: model.market.ell0,
        })
    }

    fn validate(&self) -> Result<()> {
        let shared = [self.lambda, self.sigma, self.rho, self.horizon];
        if shared.iter().any(|&x| !(x > 0.0)) {
            return input("lambda, sigma, rho and T must be positive");
        }
        for p in &self.producers {
            if [p.pollution_rate, p.production, p.h, p.a_max].iter().any(|&x| !(x > 0.0)) {
                return input("explicit producer parameters must be positive");
            }
        }
        Ok(())
    }

    fn risk_scale(&self, p: &ExplicitProducer) -> f64 {
        self.sigma * self.sigma * self.rho * p.h
    }

    /// `z_i = λ(p_iq_i)² / (σ²ρh_i + (p_iq_i)²)`.
    pub fn z(&self, p: &ExplicitProducer) -> f64 {
        let l2 = p.level() * p.level();
        self.lambda * l2 / (self.risk_scale(p) + l2)
    }

    /// `μ = Σ p_i q_i`.
    pub fn mu(&self) -> f64 {
        self.producers.iter().map(ExplicitProducer::level).sum()
    }

    /// `C = Σ (p_iq_i)⁴ / (2h_i(σ²ρh_i + (p_iq_i)²))`.
    pub fn c_coef(&self) -> f64 {
        self.producers
            .iter()
            .map(|p| {
                let l2 = p.level() * p.level();
                l2 * l2 / (2.0 * p.h * (self.risk_scale(p) + l2))
            })
            .sum()
    }

    /// `D = 2 Σ c_i(q_i)`.
    pub fn d_coef(&self) -> f64 {
        2.0 * self.producers.iter().map(|p| p.production_cost).sum::<f64>()
    }

    fn require_regime(&self) -> Result<()> {
        let r = check_regime(self)?;
        if !r.valid {
            let worst = r.m.iter().copied().fold(f64::INFINITY, f64::min);
            return Err(Error::Regime(format!(
                "min M_i = {worst} is below lambda*T = {}",
                self.lambda * self.horizon
            )));
        }
        Ok(())
    }
}

/// `M_i = Ā_i h_i (σ²ρh_i + (p_iq_i)²) / (p_iq_i)³` and whether all `M_i ≥ λT`.
pub fn check_regime(spec: &ExplicitSpec) -> Result<Regime> {
    spec.validate()?;
    let m: Vec<f64> = spec
        .producers
        .iter()
        .map(|p| {
            let l = p.level();
            p.a_max * p.h * (spec.risk_scale(p) + l * l) / (l * l * l)
        })
        .collect();
    let valid = m.iter().all(|&mi| mi >= spec.lambda * spec.horizon);
    Ok(Regime { m, valid })
}

/// Optimal sensitivities `Z_s = z_i (s − T)` and efforts `a_s = (T−s) z_i p_i q_i / h_i`.
pub fn closed_policy(spec: &ExplicitSpec, s: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=spec.horizon).contains(&s) {
        return input(format!("time {s} outside [0, {}]", spec.horizon));
    }
    spec.require_regime()?;
    let left = spec.horizon - s;
    let z = spec.producers.iter().map(|p| -spec.z(p) * left).collect();
    let a = spec.producers.iter().map(|p| left * spec.z(p) * p.level() / p.h).collect();
    Ok((z, a))
}

/// `v(t, ℓ) = D(T−t) + λ(ℓ−ℓ₀)(T−t) + λμ/2 (T−t)² − Cλ²/3 (T−t)³`.
pub fn closed_value(spec: &ExplicitSpec, t: f64, ell: f64) -> Result<f64> {
    if !(0.0..=spec.horizon).contains(&t) {
        return input(format!("time {t} outside [0, {}]", spec.horizon));
    }
    spec.require_regime()?;
    let u = spec.horizon - t;
    let lam = spec.lambda;
    Ok(spec.d_coef() * u + lam * (ell - spec.ell0) * u + 0.5 * lam * spec.mu() * u * u
        - spec.c_coef() * lam * lam / 3.0 * u * u * u)
}

/// `∂v/∂ℓ = λ(T−t)`.
pub fn closed_slope(spec: &ExplicitSpec, t: f64) -> f64 {
    spec.lambda * (spec.horizon - t)
}
