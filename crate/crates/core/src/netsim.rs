//! Discrete-time fluid data plane.
//!
//! Every link has three rate-capped egress queues, one per traffic class.
//! Each tick, flows offer a rate along their installed route; every queue
//! serves `min(offered, cap)` split max-min fair among the flows in it, and a
//! flow is delivered at the smallest rate it was served along its path.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::aggregator::TickLength;
use crate::bam::{ClassRates, TrafficClassId, CLASS_COUNT};
use crate::fairness::water_fill;
use crate::orchestrator::GroupKey;
use crate::topology::{LinkId, NodeId, Topology};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceId(String);

impl SourceId {
    pub fn new(id: impl Into<String>) -> Self {
        SourceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SourceId {
    fn from(s: &str) -> Self {
        SourceId::new(s)
    }
}

/// Constant-rate background traffic in a fixed class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficSource {
    pub id: SourceId,
    pub origin: NodeId,
    pub destination: NodeId,
    pub class: TrafficClassId,
    /// Bits per second.
    pub rate: u64,
    pub active: bool,
}

/// What a demand belongs to.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlowKey {
    Group(GroupKey),
    Source(SourceId),
}

impl FlowKey {
    pub fn is_iot(&self) -> bool {
        matches!(self, FlowKey::Group(_))
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowKey::Group(g) => write!(f, "group:{g}"),
            FlowKey::Source(s) => write!(f, "source:{s}"),
        }
    }
}

/// Installed forwarding state for one flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub links: Vec<LinkId>,
    /// Per link, how much of the flow each class queue carries. Offered rate
    /// fills TC0, TC1, TC2 in order; anything beyond goes to `overflow`.
    pub split: Vec<ClassRates>,
    pub overflow: TrafficClassId,
}

impl Route {
    /// A route whose whole rate rides in one class on every link.
    pub fn single_class(links: Vec<LinkId>, class: TrafficClassId) -> Self {
        let split = vec![[0; CLASS_COUNT]; links.len()];
        Route {
            links,
            split,
            overflow: class,
        }
    }

    fn portions(&self, hop: usize, rate: u64) -> ClassRates {
        let mut out = [0; CLASS_COUNT];
        let mut left = rate;
        for (c, &cap) in self.split[hop].iter().enumerate() {
            let take = left.min(cap);
            out[c] = take;
            left -= take;
        }
        out[self.overflow.index()] += left;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowDemand {
    pub key: FlowKey,
    /// Bits per second.
    pub rate: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueueReport {
    pub rate_cap: u64,
    pub offered: u64,
    pub served: u64,
    /// Portion of `served` that belongs to IoT flow groups.
    pub served_iot: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkReport {
    pub link: LinkId,
    pub capacity: u64,
    pub queues: [QueueReport; CLASS_COUNT],
}

impl LinkReport {
    pub fn served(&self) -> ClassRates {
        self.queues.map(|q| q.served)
    }

    pub fn total_served(&self) -> u64 {
        self.queues.iter().map(|q| q.served).sum()
    }

    pub fn iot_served(&self) -> u64 {
        self.queues.iter().map(|q| q.served_iot).sum()
    }

    pub fn utilization(&self) -> f64 {
        self.total_served() as f64 / self.capacity as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlowReport {
    pub offered: u64,
    /// Bits per second reaching the end of the path.
    pub delivered_rate: u64,
    pub delivered_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TickReport {
    pub tick: u64,
    pub links: BTreeMap<LinkId, LinkReport>,
    pub flows: BTreeMap<FlowKey, FlowReport>,
}

impl TickReport {
    pub fn link(&self, link: &LinkId) -> Option<&LinkReport> {
        self.links.get(link)
    }
}

/// `Σ served / capacity` of `link` in `report`.
pub fn link_utilization(report: &TickReport, link: &LinkId) -> Result<f64, NetsimError> {
    report
        .links
        .get(link)
        .map(LinkReport::utilization)
        .ok_or_else(|| NetsimError::UnknownLink(link.clone()))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetsimError {
    #[error("demand for {0} has no installed route")]
    UnroutedDemand(FlowKey),
    #[error("unknown link `{0}`")]
    UnknownLink(LinkId),
}

#[derive(Debug, Clone)]
struct LinkQueues {
    capacity: u64,
    caps: ClassRates,
}

#[derive(Debug, Clone)]
pub struct Netsim {
    links: BTreeMap<LinkId, LinkQueues>,
    routes: BTreeMap<FlowKey, Route>,
    offered: BTreeMap<FlowKey, u64>,
}

impl Netsim {
    /// All queue caps start at zero until programmed.
    pub fn new(topology: &Topology) -> Self {
        let links = topology
            .links()
            .map(|l| {
                (
                    l.id.clone(),
                    LinkQueues {
                        capacity: l.capacity,
                        caps: [0; CLASS_COUNT],
                    },
                )
            })
            .collect();
        Netsim {
            links,
            routes: BTreeMap::new(),
            offered: BTreeMap::new(),
        }
    }

    /// Sets a link's per-class caps. The sum is clamped to link capacity by
    /// trimming the highest classes first.
    pub fn set_queue_caps(&mut self, link: &LinkId, caps: ClassRates) -> Result<(), NetsimError> {
        let q = self
            .links
            .get_mut(link)
            .ok_or_else(|| NetsimError::UnknownLink(link.clone()))?;
        let mut left = q.capacity;
        for (c, cap) in caps.iter().enumerate() {
            q.caps[c] = (*cap).min(left);
            left -= q.caps[c];
        }
        Ok(())
    }

    pub fn queue_caps(&self, link: &LinkId) -> Option<ClassRates> {
        self.links.get(link).map(|q| q.caps)
    }

    /// Replaces the whole forwarding state.
    pub fn set_routes(&mut self, routes: BTreeMap<FlowKey, Route>) {
        self.routes = routes;
    }

    pub fn route(&self, key: &FlowKey) -> Option<&Route> {
        self.routes.get(key)
    }

    pub fn offer(&mut self, demands: &[FlowDemand]) -> Result<(), NetsimError> {
        if let Some(d) = demands.iter().find(|d| !self.routes.contains_key(&d.key)) {
            return Err(NetsimError::UnroutedDemand(d.key.clone()));
        }
        for d in demands {
            *self.offered.entry(d.key.clone()).or_default() += d.rate;
        }
        Ok(())
    }

    /// Offered rate accumulated per link and class since the last `serve`.
    pub fn offered_on(&self, link: &LinkId) -> ClassRates {
        let mut out = [0; CLASS_COUNT];
        for (key, &rate) in &self.offered {
            let route = &self.routes[key];
            if let Some(hop) = route.links.iter().position(|l| l == link) {
                for (c, r) in route.portions(hop, rate).iter().enumerate() {
                    out[c] += r;
                }
            }
        }
        out
    }

    /// Serves one tick of offered traffic and clears the offers.
    pub fn serve(&mut self, tick: u64, dt: TickLength) -> TickReport {
        let offered = std::mem::take(&mut self.offered);

        // (flow, hop) -> per-class portion
        type Claim<'a> = (&'a FlowKey, usize, u64);
        let mut claims: BTreeMap<(&LinkId, usize), Vec<Claim>> = BTreeMap::new();
        for (key, &rate) in &offered {
            let route = &self.routes[key];
            for (hop, link) in route.links.iter().enumerate() {
                for (c, portion) in route.portions(hop, rate).into_iter().enumerate() {
                    if portion > 0 {
                        claims.entry((link, c)).or_default().push((key, hop, portion));
                    }
                }
            }
        }

        let mut links: BTreeMap<LinkId, LinkReport> = self
            .links
            .iter()
            .map(|(id, q)| {
                let mut queues = [QueueReport::default(); CLASS_COUNT];
                for (c, queue) in queues.iter_mut().enumerate() {
                    queue.rate_cap = q.caps[c];
                }
                (
                    id.clone(),
                    LinkReport {
                        link: id.clone(),
                        capacity: q.capacity,
                        queues,
                    },
                )
            })
            .collect();

        // served[flow][hop]
        let mut served: BTreeMap<&FlowKey, Vec<u64>> = offered
            .keys()
            .map(|k| (k, vec![0; self.routes[k].links.len()]))
            .collect();
        for ((link, c), list) in &claims {
            let queue = &mut links.get_mut(*link).expect("routes only use known links").queues[*c];
            let amounts: Vec<u64> = list.iter().map(|&(_, _, a)| a).collect();
            let shares = water_fill(&amounts, queue.rate_cap);
            queue.offered = amounts.iter().sum();
            for (&(key, hop, _), share) in list.iter().zip(shares) {
                queue.served += share;
                if key.is_iot() {
                    queue.served_iot += share;
                }
                served.get_mut(key).expect("claim from offered flow")[hop] += share;
            }
        }

        let flows = offered
            .iter()
            .map(|(key, &rate)| {
                let delivered_rate = served[key].iter().copied().min().unwrap_or(0).min(rate);
                (
                    key.clone(),
                    FlowReport {
                        offered: rate,
                        delivered_rate,
                        delivered_bytes: dt.bytes_at(delivered_rate),
                    },
                )
            })
            .collect();

        TickReport { tick, links, flows }
    }
}
