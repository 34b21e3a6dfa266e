//! Publish/subscribe IoT traffic orchestration combined with SDN bandwidth
//! management, as a deterministic fluid-flow simulator.
//!
//! The pieces mirror a small deployment: aggregators buffer topic data and
//! drain it at rates granted by the [`Orchestrator`], which groups
//! subscriptions into origin-destination flow groups and asks the
//! [`Controller`] for paths and bandwidth. The controller keeps a per-link
//! maximum-allocation ledger over three traffic classes and, when integration
//! is enabled, lets IoT groups borrow idle capacity from the other classes.
//! [`Netsim`] plays the data plane and [`scenario`] drives everything.

pub mod aggregator;
pub mod bam;
pub mod controller;
pub mod fairness;
pub mod netsim;
pub mod orchestrator;
pub mod scalar;
pub mod scenario;
pub mod topology;

use num_rational::Rational64;

pub use aggregator::{Aggregator, QosLevel, SubscriptionId, TickLength, Topic, TopicBuffer, TopicName};
pub use bam::{BandwidthConstraint, ClassRates, LinkBamState, TrafficClassId};
pub use controller::Controller;
pub use netsim::{Netsim, TickReport};
pub use orchestrator::{compute_rate_plan, GroupKey, Orchestrator, PlanEntry};
pub use scalar::Scalar;
pub use scenario::{Scenario, Simulation};
pub use topology::{LinkId, NodeId, Topology};

/// Rate plan in bits/s as used by the run loop.
pub type RatePlan = orchestrator::RatePlan<f64>;
pub type RatePlanF32 = orchestrator::RatePlan<f32>;
/// Exact rational plan, for checking the floating-point one.
pub type ExactRatePlan = orchestrator::RatePlan<Rational64>;
pub type ExactPlanEntry = PlanEntry<Rational64>;
