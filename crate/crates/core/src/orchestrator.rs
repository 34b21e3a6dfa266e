//! The pub/sub orchestrator: subscription registry, demand polling, flow-group
//! requests to the controller and per-subscription rate plans.
//!
//! Within a flow group, grants follow strict priority across QoS levels and a
//! max-min fair split inside each level.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::aggregator::{Aggregator, GrantTable, QosLevel, SubscriptionId, TickLength, Topic, TopicName};
use crate::controller::{Controller, ControllerError};
use crate::fairness::water_fill;
use crate::scalar::Scalar;
use crate::topology::NodeId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub id: SubscriptionId,
    pub consumer: NodeId,
    pub topic: Topic,
    pub qos: QosLevel,
}

/// Origin-destination pair identifying a flow group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub origin: NodeId,
    pub destination: NodeId,
}

impl GroupKey {
    pub fn new(origin: impl Into<NodeId>, destination: impl Into<NodeId>) -> Self {
        GroupKey {
            origin: origin.into(),
            destination: destination.into(),
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.origin, self.destination)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowGroupSpec {
    pub key: GroupKey,
    pub members: BTreeSet<SubscriptionId>,
    /// Bits per second.
    pub demand: u64,
}

impl FlowGroupSpec {
    pub fn new(origin: &str, destination: &str, demand: u64) -> Self {
        FlowGroupSpec {
            key: GroupKey::new(origin, destination),
            members: BTreeSet::new(),
            demand,
        }
    }
}

/// Per-subscription grants effective from `epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePlan<T> {
    pub epoch: u64,
    pub grants: BTreeMap<SubscriptionId, T>,
}

impl<T: Scalar> RatePlan<T> {
    pub fn grant(&self, sub: &SubscriptionId) -> T {
        self.grants.get(sub).copied().unwrap_or_else(T::zero)
    }
}

/// One claimant in a rate plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry<T> {
    pub level: QosLevel,
    pub demand: T,
}

/// Splits `budget` among `entries`: level 0 is served completely before level 1
/// receives anything, and so on; inside a level the split is max-min fair.
/// Grants are returned in input order.
pub fn compute_rate_plan<T: Scalar>(entries: &[PlanEntry<T>], budget: T) -> Vec<T> {
    let zero = T::zero();
    let mut grants = vec![zero; entries.len()];
    let mut remaining = budget.max_of(zero);
    for level in 0..QosLevel::LEVELS as u8 {
        let idx: Vec<usize> = (0..entries.len())
            .filter(|&i| entries[i].level.get() == level)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let demands: Vec<T> = idx.iter().map(|&i| entries[i].demand).collect();
        let shares = water_fill(&demands, remaining);
        for (&i, share) in idx.iter().zip(shares) {
            grants[i] = share;
            remaining = (remaining - share).max_of(zero);
        }
    }
    grants
}

/// Requested bit rate per subscription.
pub type DemandReport = BTreeMap<SubscriptionId, f64>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowAck {
    pub key: GroupKey,
    pub budget: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("subscription `{0}` already exists")]
    DuplicateSubscription(SubscriptionId),
    #[error("unknown topic `{0}`")]
    UnknownTopic(TopicName),
    #[error("unknown consumer `{0}`")]
    UnknownConsumer(NodeId),
    #[error("unknown subscription `{0}`")]
    UnknownSubscription(SubscriptionId),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Debug, Clone, Default)]
pub struct Orchestrator {
    topics: BTreeMap<TopicName, Topic>,
    consumers: BTreeSet<NodeId>,
    subscriptions: BTreeMap<SubscriptionId, Subscription>,
    installed: BTreeSet<GroupKey>,
    budgets: BTreeMap<GroupKey, u64>,
}

impl Orchestrator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_topic(&mut self, topic: Topic) {
        self.topics.insert(topic.name.clone(), topic);
    }

    pub fn register_consumer(&mut self, consumer: NodeId) {
        self.consumers.insert(consumer);
    }

    pub fn topic(&self, name: &TopicName) -> Option<&Topic> {
        self.topics.get(name)
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subscriptions.values()
    }

    pub fn subscription(&self, id: &SubscriptionId) -> Option<&Subscription> {
        self.subscriptions.get(id)
    }

    pub fn subscribe(&mut self, consumer: &NodeId, topic: &TopicName) -> Result<Subscription, OrchestratorError> {
        if !self.consumers.contains(consumer) {
            return Err(OrchestratorError::UnknownConsumer(consumer.clone()));
        }
        let topic = self
            .topics
            .get(topic)
            .ok_or_else(|| OrchestratorError::UnknownTopic(topic.clone()))?
            .clone();
        let id = SubscriptionId::of(consumer, &topic.name);
        if self.subscriptions.contains_key(&id) {
            return Err(OrchestratorError::DuplicateSubscription(id));
        }
        let sub = Subscription {
            id: id.clone(),
            consumer: consumer.clone(),
            qos: topic.qos,
            topic,
        };
        self.subscriptions.insert(id, sub.clone());
        Ok(sub)
    }

    pub fn unsubscribe(&mut self, consumer: &NodeId, topic: &TopicName) -> Result<Subscription, OrchestratorError> {
        let id = SubscriptionId::of(consumer, topic);
        self.subscriptions
            .remove(&id)
            .ok_or(OrchestratorError::UnknownSubscription(id))
    }

    /// Current flow groups, one per (home aggregator, consumer) pair.
    pub fn groups(&self, demands: &DemandReport) -> BTreeMap<GroupKey, FlowGroupSpec> {
        let mut groups: BTreeMap<GroupKey, FlowGroupSpec> = BTreeMap::new();
        let mut totals: BTreeMap<GroupKey, f64> = BTreeMap::new();
        for sub in self.subscriptions.values() {
            let key = GroupKey {
                origin: sub.topic.home.clone(),
                destination: sub.consumer.clone(),
            };
            *totals.entry(key.clone()).or_default() += demands.get(&sub.id).copied().unwrap_or(0.0);
            groups
                .entry(key.clone())
                .or_insert_with(|| FlowGroupSpec {
                    key,
                    members: BTreeSet::new(),
                    demand: 0,
                })
                .members
                .insert(sub.id.clone());
        }
        for (key, group) in &mut groups {
            group.demand = totals[key].max(0.0).ceil() as u64;
        }
        groups
    }

    /// Demand per subscription: its unread backlog sent within one tick.
    pub fn poll_status<'a>(
        &self,
        aggregators: impl IntoIterator<Item = &'a Aggregator>,
        dt: TickLength,
    ) -> DemandReport {
        let mut report = DemandReport::new();
        for ag in aggregators {
            for buffer in ag.buffers() {
                for sub in buffer.readers() {
                    if self.subscriptions.contains_key(sub) {
                        report.insert(sub.clone(), dt.rate_for_f64(buffer.available(sub)));
                    }
                }
            }
        }
        for id in self.subscriptions.keys() {
            report.entry(id.clone()).or_insert(0.0);
        }
        report
    }

    /// Sets up new groups, updates demands of installed ones and tears down
    /// groups that lost all members.
    pub fn request_flows(
        &mut self,
        controller: &mut Controller,
        demands: &DemandReport,
    ) -> Result<Vec<FlowAck>, OrchestratorError> {
        let groups = self.groups(demands);
        let stale: Vec<GroupKey> = self
            .installed
            .iter()
            .filter(|k| !groups.contains_key(k))
            .cloned()
            .collect();
        for key in stale {
            controller.teardown_flow(&key)?;
            self.installed.remove(&key);
            self.budgets.remove(&key);
        }
        let mut acks = Vec::with_capacity(groups.len());
        for (key, group) in groups {
            let budget = if self.installed.contains(&key) {
                controller.update_demand(&group)?
            } else {
                let budget = controller.setup_flow(&group)?;
                self.installed.insert(key.clone());
                budget
            };
            self.budgets.insert(key.clone(), budget);
            acks.push(FlowAck { key, budget });
        }
        Ok(acks)
    }

    /// Takes budgets pushed by the controller after rebalancing.
    pub fn update_budgets(&mut self, budgets: &BTreeMap<GroupKey, u64>) {
        for (key, budget) in &mut self.budgets {
            if let Some(&b) = budgets.get(key) {
                *budget = b;
            }
        }
    }

    pub fn budget(&self, key: &GroupKey) -> u64 {
        self.budgets.get(key).copied().unwrap_or(0)
    }

    pub fn budgets(&self) -> &BTreeMap<GroupKey, u64> {
        &self.budgets
    }

    /// Members of each group in priority order (QoS level, then id).
    fn ordered_members(&self) -> BTreeMap<GroupKey, Vec<&Subscription>> {
        let mut out: BTreeMap<GroupKey, Vec<&Subscription>> = BTreeMap::new();
        for sub in self.subscriptions.values() {
            out.entry(GroupKey {
                origin: sub.topic.home.clone(),
                destination: sub.consumer.clone(),
            })
            .or_default()
            .push(sub);
        }
        for members in out.values_mut() {
            members.sort_by(|a, b| (a.qos, &a.id).cmp(&(b.qos, &b.id)));
        }
        out
    }

    pub fn compute_plan(&self, demands: &DemandReport, epoch: u64) -> RatePlan<f64> {
        let mut grants = BTreeMap::new();
        for (key, members) in self.ordered_members() {
            let entries: Vec<PlanEntry<f64>> = members
                .iter()
                .map(|s| PlanEntry {
                    level: s.qos,
                    demand: demands.get(&s.id).copied().unwrap_or(0.0),
                })
                .collect();
            let shares = compute_rate_plan(&entries, self.budget(&key) as f64);
            for (sub, share) in members.iter().zip(shares) {
                grants.insert(sub.id.clone(), share);
            }
        }
        RatePlan { epoch, grants }
    }

    /// Rounds a plan to integer bits/s (ties to even) and splits it per
    /// aggregator. Rounding never lets a group exceed its budget.
    pub fn grant_tables(&self, plan: &RatePlan<f64>) -> BTreeMap<NodeId, GrantTable> {
        let mut tables: BTreeMap<NodeId, GrantTable> = BTreeMap::new();
        for (key, members) in self.ordered_members() {
            let mut rounded: Vec<u64> = members
                .iter()
                .map(|s| plan.grant(&s.id).max(0.0).round_ties_even() as u64)
                .collect();
            let budget = self.budget(&key);
            let mut excess = rounded.iter().sum::<u64>().saturating_sub(budget);
            for r in rounded.iter_mut().rev() {
                let cut = excess.min(*r);
                *r -= cut;
                excess -= cut;
            }
            let table = tables.entry(key.origin.clone()).or_default();
            for (sub, rate) in members.iter().zip(rounded) {
                table.insert(sub.topic.name.clone(), sub.id.clone(), rate);
            }
        }
        tables
    }
}
