#![allow(dead_code)]

use std::path::Path;

use isoreg::config::Scenario;
use isoreg::network::{EdgeSpec, NetworkSpec, NodeSpec};
use isoreg::simulator::SimConfig;
use isoreg::{EffortCost, MarketParams, Model, PiecewiseLinearFn, ProducerSpec, SocialCost};

pub fn scenario(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn sim_config(s: &Scenario) -> SimConfig {
    SimConfig {
        n_paths: s.simulation.n_paths,
        dt: s.sim_dt(),
        seed: s.simulation.seed,
        antithetic: s.simulation.antithetic,
        stored_paths: 0,
    }
}

pub fn producer(cost: f64, pollution: f64, h: f64, a_max: f64) -> ProducerSpec {
    ProducerSpec {
        cost: PiecewiseLinearFn::linear(cost),
        pollution: PiecewiseLinearFn::linear(pollution),
        effort: EffortCost::Quadratic { h, a_max },
        capacity: f64::INFINITY,
    }
}

pub fn market(social_cost: SocialCost, n: usize) -> MarketParams {
    MarketParams { rho: 1.0, sigma: 1.0, social_cost, ell0: 10.0, horizon: 1.0, reservations: vec![-1.0; n] }
}

/// Two isolated nodes with unit production, emission levels 1 and 2, and
/// efforts `a*¹ = (1−s)/2`, `a*² = (1−s)/4` under a linear social cost.
pub fn two_producer_linear() -> Model {
    let net = NetworkSpec {
        nodes: vec![NodeSpec { id: 1, demand: 1.0, capacity: 1.0 }, NodeSpec { id: 2, demand: 1.0, capacity: 1.0 }],
        edges: vec![],
    };
    let producers = vec![producer(0.5, 1.0, 1.0, 0.9), producer(0.2, 2.0, 4.0, 0.9)];
    Model::new(net, producers, market(SocialCost::Linear { lambda: 1.0 }, 2)).unwrap()
}

/// Three nodes on a line, cheap dirty supply at the first node.
pub fn chain3() -> Model {
    let net = NetworkSpec {
        nodes: vec![
            NodeSpec { id: 1, demand: 1.0, capacity: 4.0 },
            NodeSpec { id: 2, demand: 1.0, capacity: 4.0 },
            NodeSpec { id: 3, demand: 1.0, capacity: 4.0 },
        ],
        edges: vec![
            EdgeSpec { from: 1, to: 2, resistance: 0.1, flow_min: 0.0, flow_max: 1.5 },
            EdgeSpec { from: 2, to: 3, resistance: 0.1, flow_min: 0.0, flow_max: 1.0 },
        ],
    };
    let producers = vec![
        producer(1.0, 1.0, 1.0, 0.5),
        ProducerSpec {
            cost: PiecewiseLinearFn::new(vec![0.0, 1.2], vec![1.5, 4.0]).unwrap(),
            pollution: PiecewiseLinearFn::linear(0.4),
            effort: EffortCost::Quadratic { h: 1.0, a_max: 0.5 },
            capacity: f64::INFINITY,
        },
        producer(3.0, 0.1, 1.0, 0.5),
    ];
    Model::new(net, producers, market(SocialCost::Rectified { lambda: 1.0 }, 3)).unwrap()
}
