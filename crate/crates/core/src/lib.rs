//! Pollution regulation of an electricity network through dynamic contracts.
//!
//! The independent system operator (ISO) dispatches production and
//! transmission on a lossy network and pays each producer a remuneration
//! indexed on the observed pollution level. Producers respond with hidden
//! abatement efforts forming a Nash equilibrium. This crate provides
//!
//! - [`network`]: nodal balance with quadratic losses, feasibility and the
//!   minimum-cost dispatch;
//! - [`producer`]: cost/pollution curves, best-response efforts, the
//!   certainty-equivalent generator and CARA utility;
//! - [`hamiltonian`]: the ISO's running Hamiltonian and its minimisers;
//! - [`hjb`]: an explicit upwind solver for the value function, for dynamic
//!   and for frozen plans;
//! - [`closed_form`]: the explicit solution for linear pollution, quadratic
//!   effort cost and linear social cost;
//! - [`simulator`]: Monte Carlo simulation of pollution, certainty
//!   equivalents, efforts and payments;
//! - [`constant_plan`]: the restricted problem with a time-invariant plan;
//! - [`config`]: JSON scenario files.

// `!(x > 0.0)` style guards are kept so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_form;
pub mod config;
pub mod constant_plan;
pub mod error;
pub mod hamiltonian;
pub mod hjb;
pub mod network;
pub mod producer;
pub mod simulator;

pub use error::{Error, Result};
pub use network::{EdgeSpec, NetworkSpec, NodeSpec, Plan};
pub use producer::{EffortCost, MarketParams, Model, PiecewiseLinearFn, ProducerSpec, SocialCost};
