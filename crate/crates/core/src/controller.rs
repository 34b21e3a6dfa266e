//! Simulated SDN controller.
//!
//! Accepts flow-group requests from the orchestrator, computes paths, keeps
//! the per-link bandwidth ledgers, installs flow entries and queue limits,
//! and rebalances IoT groups across traffic classes.
//!
//! IoT groups are native to TC0. With integration enabled, demand that TC0
//! cannot carry is placed into TC1 and then TC2 wherever those classes have
//! room left over by their own (background) traffic. Background traffic in a
//! class always takes precedence over IoT rate borrowed into it.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::bam::{
    BamError, BandwidthConstraint, ClassRates, LinkBamState, ReservationId, ReservationKind, TrafficClassId,
    CLASS_COUNT,
};
use crate::fairness::network_water_fill;
use crate::netsim::{FlowKey, Netsim, Route, SourceId, TickReport, TrafficSource};
use crate::orchestrator::{FlowGroupSpec, GroupKey};
use crate::topology::{LinkId, NodeId, NodeKind, Path, Topology, TopologyError};

pub const IOT_CLASS: TrafficClassId = TrafficClassId::TC0;
const BORROW_ORDER: [TrafficClassId; 2] = [TrafficClassId::TC1, TrafficClassId::TC2];

/// Forwarding rule on one switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEntry {
    pub switch: NodeId,
    /// Origin-destination match.
    pub matches: GroupKey,
    pub out_link: LinkId,
    /// Rate the flow may use in each class queue of `out_link`.
    pub queues: ClassRates,
}

#[derive(Debug, Clone)]
pub struct InstalledFlow {
    pub group: FlowGroupSpec,
    pub path: Path,
    /// Per path link, the group's reservation in each class (if any).
    pub reservations: BTreeMap<LinkId, [Option<ReservationId>; CLASS_COUNT]>,
}

#[derive(Debug, Clone)]
struct InstalledSource {
    source: TrafficSource,
    path: Path,
    /// Empty while the source waits for admission.
    reservations: Vec<(LinkId, ReservationId)>,
}

impl InstalledSource {
    fn admitted(&self) -> bool {
        !self.reservations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassSample {
    pub limit: u64,
    pub allocated: u64,
    pub borrowed: u64,
    pub headroom: u64,
    /// Served rate observed in the last data-plane tick.
    pub served: u64,
    /// Rate wanted by active background sources in this class, admitted or not.
    pub native_demand: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSample {
    pub link: LinkId,
    pub capacity: u64,
    pub classes: [ClassSample; CLASS_COUNT],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorSample {
    pub tick: u64,
    pub links: Vec<LinkSample>,
}

impl MonitorSample {
    pub fn link(&self, id: &LinkId) -> Option<&LinkSample> {
        self.links.iter().find(|l| &l.link == id)
    }
}

/// A change of class for part of an IoT group's rate on one link. `to: None`
/// means the rate left the group's budget.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reassignment {
    pub group: GroupKey,
    pub link: LinkId,
    pub from: TrafficClassId,
    pub to: Option<TrafficClassId>,
    pub rate: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueueConfig {
    pub link: LinkId,
    /// The switch owning the egress queue, if the link starts at a switch.
    pub switch: Option<NodeId>,
    pub caps: ClassRates,
    /// IoT rate the controller placed in each class queue.
    pub iot_share: ClassRates,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControllerError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Bam(#[from] BamError),
    #[error("flow group {0} is not installed")]
    UnknownFlow(GroupKey),
    #[error("flow group {0} is already installed")]
    DuplicateFlow(GroupKey),
    #[error("unknown traffic source `{0}`")]
    UnknownSource(SourceId),
    #[error("traffic source `{0}` already active")]
    DuplicateSource(SourceId),
    #[error("flow match {0} already used on switch `{1}`")]
    MatchCollision(GroupKey, NodeId),
}

#[derive(Debug, Clone)]
pub struct Controller {
    topology: Topology,
    integrated: bool,
    ledgers: BTreeMap<LinkId, LinkBamState>,
    flows: BTreeMap<GroupKey, InstalledFlow>,
    sources: BTreeMap<SourceId, InstalledSource>,
    flow_table: BTreeMap<(NodeId, GroupKey), FlowEntry>,
    served: BTreeMap<LinkId, ClassRates>,
}

impl Controller {
    /// Configures a ledger on every link. `constraints` applies to links not
    /// listed in `per_link`.
    pub fn new(
        topology: Topology,
        constraints: &[BandwidthConstraint],
        per_link: &BTreeMap<LinkId, Vec<BandwidthConstraint>>,
        integrated: bool,
    ) -> Result<Self, ControllerError> {
        let mut ledgers = BTreeMap::new();
        for link in topology.links() {
            let bcs = per_link.get(&link.id).map_or(constraints, Vec::as_slice);
            ledgers.insert(
                link.id.clone(),
                LinkBamState::configure(link.id.clone(), link.capacity, bcs)?,
            );
        }
        Ok(Controller {
            topology,
            integrated,
            ledgers,
            flows: BTreeMap::new(),
            sources: BTreeMap::new(),
            flow_table: BTreeMap::new(),
            served: BTreeMap::new(),
        })
    }

    pub fn integrated(&self) -> bool {
        self.integrated
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn ledger(&self, link: &LinkId) -> Option<&LinkBamState> {
        self.ledgers.get(link)
    }

    pub fn ledgers(&self) -> impl Iterator<Item = &LinkBamState> {
        self.ledgers.values()
    }

    pub fn flow(&self, key: &GroupKey) -> Option<&InstalledFlow> {
        self.flows.get(key)
    }

    pub fn flow_entries(&self) -> impl Iterator<Item = &FlowEntry> {
        self.flow_table.values()
    }

    pub fn is_source_admitted(&self, id: &SourceId) -> Option<bool> {
        self.sources.get(id).map(InstalledSource::admitted)
    }

    /// Rate a group holds in each class on `link`.
    pub fn group_reserved(&self, key: &GroupKey, link: &LinkId) -> ClassRates {
        let mut out = [0; CLASS_COUNT];
        if let (Some(flow), Some(ledger)) = (self.flows.get(key), self.ledgers.get(link)) {
            if let Some(slots) = flow.reservations.get(link) {
                for (c, slot) in slots.iter().enumerate() {
                    out[c] = slot.and_then(|id| ledger.reservation(id)).map_or(0, |r| r.rate);
                }
            }
        }
        out
    }

    /// Minimum over the path of the group's total reserved rate.
    pub fn budget(&self, key: &GroupKey) -> u64 {
        let Some(flow) = self.flows.get(key) else {
            return 0;
        };
        flow.path
            .links
            .iter()
            .map(|l| self.group_reserved(key, l).iter().sum::<u64>())
            .min()
            .unwrap_or(0)
    }

    pub fn budgets(&self) -> BTreeMap<GroupKey, u64> {
        self.flows.keys().map(|k| (k.clone(), self.budget(k))).collect()
    }

    fn install_entries(&mut self, matches: &GroupKey, path: &Path) -> Result<(), ControllerError> {
        let mut entries = Vec::new();
        for id in &path.links {
            let link = self.topology.link(id).expect("path links exist");
            let is_switch = self
                .topology
                .node(&link.src)
                .is_some_and(|n| n.kind == NodeKind::Switch);
            if !is_switch {
                continue;
            }
            let slot = (link.src.clone(), matches.clone());
            if self.flow_table.contains_key(&slot) {
                return Err(ControllerError::MatchCollision(matches.clone(), link.src.clone()));
            }
            entries.push((
                slot,
                FlowEntry {
                    switch: link.src.clone(),
                    matches: matches.clone(),
                    out_link: id.clone(),
                    queues: [0; CLASS_COUNT],
                },
            ));
        }
        self.flow_table.extend(entries);
        Ok(())
    }

    fn remove_entries(&mut self, matches: &GroupKey) {
        self.flow_table.retain(|(_, m), _| m != matches);
    }

    fn refresh_entry_rates(&mut self) {
        let mut rates: BTreeMap<(NodeId, GroupKey), ClassRates> = BTreeMap::new();
        for (key, flow) in &self.flows {
            for link in &flow.path.links {
                let src = &self.topology.link(link).expect("path links exist").src;
                rates.insert((src.clone(), key.clone()), self.group_reserved(key, link));
            }
        }
        for s in self.sources.values() {
            let key = GroupKey::new(s.source.origin.clone(), s.source.destination.clone());
            for link in &s.path.links {
                let src = &self.topology.link(link).expect("path links exist").src;
                let mut r = [0; CLASS_COUNT];
                if s.admitted() {
                    r[s.source.class.index()] = s.source.rate;
                }
                rates.insert((src.clone(), key.clone()), r);
            }
        }
        for (slot, entry) in &mut self.flow_table {
            entry.queues = rates.get(slot).copied().unwrap_or([0; CLASS_COUNT]);
        }
    }

    /// Computes the path, installs entries and reserves as much of the demand
    /// as fits: TC0 first, then (integrated) TC1 and TC2. Returns the budget.
    pub fn setup_flow(&mut self, group: &FlowGroupSpec) -> Result<u64, ControllerError> {
        if self.flows.contains_key(&group.key) {
            return Err(ControllerError::DuplicateFlow(group.key.clone()));
        }
        let path = self.topology.compute_path(&group.key.origin, &group.key.destination)?;
        self.install_entries(&group.key, &path)?;
        let reservations = path.links.iter().map(|l| (l.clone(), [None; CLASS_COUNT])).collect();
        self.flows.insert(
            group.key.clone(),
            InstalledFlow {
                group: group.clone(),
                path: path.clone(),
                reservations,
            },
        );

        let native = path
            .links
            .iter()
            .map(|l| self.ledgers[l].headroom(IOT_CLASS))
            .min()
            .unwrap_or(0)
            .min(group.demand);
        let borrowed = if self.integrated {
            path.links
                .iter()
                .map(|l| self.borrowable(l))
                .min()
                .unwrap_or(0)
                .min(group.demand - native)
        } else {
            0
        };
        for link in &path.links {
            self.set_class_rate(&group.key, link, IOT_CLASS, native)?;
            self.grow_borrowed(&group.key, link, borrowed)?;
        }
        self.refresh_entry_rates();
        Ok(self.budget(&group.key))
    }

    /// Records a new demand (and membership) for an installed group. Surplus
    /// reservation above the new demand is released; growth waits for
    /// `rebalance`.
    pub fn update_demand(&mut self, group: &FlowGroupSpec) -> Result<u64, ControllerError> {
        let flow = self
            .flows
            .get_mut(&group.key)
            .ok_or_else(|| ControllerError::UnknownFlow(group.key.clone()))?;
        flow.group = group.clone();
        let links = flow.path.links.clone();
        for link in &links {
            let mut excess = self
                .group_reserved(&group.key, link)
                .iter()
                .sum::<u64>()
                .saturating_sub(group.demand);
            for class in [TrafficClassId::TC2, TrafficClassId::TC1, TrafficClassId::TC0] {
                let have = self.group_reserved(&group.key, link)[class.index()];
                let cut = excess.min(have);
                if cut > 0 {
                    self.set_class_rate(&group.key, link, class, have - cut)?;
                    excess -= cut;
                }
            }
        }
        self.refresh_entry_rates();
        Ok(self.budget(&group.key))
    }

    pub fn teardown_flow(&mut self, key: &GroupKey) -> Result<u64, ControllerError> {
        let flow = self
            .flows
            .remove(key)
            .ok_or_else(|| ControllerError::UnknownFlow(key.clone()))?;
        let mut released = 0;
        for (link, slots) in &flow.reservations {
            let ledger = self.ledgers.get_mut(link).expect("path links have ledgers");
            for id in slots.iter().flatten() {
                released += ledger.release(*id)?.rate;
            }
        }
        self.remove_entries(key);
        Ok(released)
    }

    /// Starts a background source. Returns whether it was admitted; a source
    /// that does not fit stays pending and is retried by `rebalance`.
    pub fn start_source(&mut self, source: TrafficSource) -> Result<bool, ControllerError> {
        if self.sources.contains_key(&source.id) {
            return Err(ControllerError::DuplicateSource(source.id));
        }
        let path = self.topology.compute_path(&source.origin, &source.destination)?;
        let matches = GroupKey::new(source.origin.clone(), source.destination.clone());
        self.install_entries(&matches, &path)?;
        let id = source.id.clone();
        self.sources.insert(
            id.clone(),
            InstalledSource {
                source,
                path,
                reservations: Vec::new(),
            },
        );
        let admitted = self.try_admit_source(&id);
        self.refresh_entry_rates();
        Ok(admitted)
    }

    pub fn stop_source(&mut self, id: &SourceId) -> Result<(), ControllerError> {
        let s = self
            .sources
            .remove(id)
            .ok_or_else(|| ControllerError::UnknownSource(id.clone()))?;
        for (link, rid) in &s.reservations {
            self.ledgers
                .get_mut(link)
                .expect("path links have ledgers")
                .release(*rid)?;
        }
        self.remove_entries(&GroupKey::new(s.source.origin.clone(), s.source.destination.clone()));
        Ok(())
    }

    fn try_admit_source(&mut self, id: &SourceId) -> bool {
        let s = &self.sources[id];
        if s.admitted() {
            return true;
        }
        if s.source.rate == 0 {
            return false;
        }
        let (class, rate, links) = (s.source.class, s.source.rate, s.path.links.clone());
        let mut taken = Vec::new();
        for link in &links {
            match self
                .ledgers
                .get_mut(link)
                .expect("path links have ledgers")
                .admit(class, rate)
            {
                Ok(r) => taken.push((link.clone(), r.id)),
                Err(_) => {
                    for (l, rid) in taken {
                        self.ledgers
                            .get_mut(&l)
                            .expect("rollback")
                            .release(rid)
                            .expect("just admitted");
                    }
                    return false;
                }
            }
        }
        self.sources.get_mut(id).expect("exists").reservations = taken;
        true
    }

    fn admit_pending(&mut self) {
        let pending: Vec<SourceId> = self
            .sources
            .iter()
            .filter(|(_, s)| !s.admitted())
            .map(|(k, _)| k.clone())
            .collect();
        for id in pending {
            self.try_admit_source(&id);
        }
    }

    /// Background demand per class on `link`, admitted or pending.
    fn native_demand(&self, link: &LinkId) -> ClassRates {
        let mut out = [0; CLASS_COUNT];
        for s in self.sources.values() {
            if s.path.links.contains(link) {
                out[s.source.class.index()] += s.source.rate;
            }
        }
        out
    }

    /// Room IoT may still take in `class` on `link` without displacing
    /// background demand.
    fn free_for_iot(&self, link: &LinkId, class: TrafficClassId) -> u64 {
        let ledger = &self.ledgers[link];
        let c = class.index();
        let admitted_native: u64 = self
            .sources
            .values()
            .filter(|s| s.admitted() && s.source.class == class && s.path.links.contains(link))
            .map(|s| s.source.rate)
            .sum();
        let pending = self.native_demand(link)[c] - admitted_native;
        ledger.headroom(class).saturating_sub(pending)
    }

    fn borrowable(&self, link: &LinkId) -> u64 {
        BORROW_ORDER.iter().map(|&c| self.free_for_iot(link, c)).sum()
    }

    fn set_class_rate(
        &mut self,
        key: &GroupKey,
        link: &LinkId,
        class: TrafficClassId,
        rate: u64,
    ) -> Result<(), ControllerError> {
        let flow = self
            .flows
            .get_mut(key)
            .ok_or_else(|| ControllerError::UnknownFlow(key.clone()))?;
        let slot = &mut flow.reservations.get_mut(link).expect("link on path")[class.index()];
        let ledger = self.ledgers.get_mut(link).expect("path links have ledgers");
        match (*slot, rate) {
            (None, 0) => {}
            (Some(id), 0) => {
                ledger.release(id)?;
                *slot = None;
            }
            (Some(id), r) => {
                ledger.resize(id, r)?;
            }
            (None, r) => {
                *slot = Some(ledger.admit_into(IOT_CLASS, class, r)?.id);
            }
        }
        Ok(())
    }

    /// Adds `extra` borrowed rate on `link`, TC1 before TC2. Returns the
    /// amount placed per class.
    fn grow_borrowed(&mut self, key: &GroupKey, link: &LinkId, extra: u64) -> Result<ClassRates, ControllerError> {
        let mut placed = [0; CLASS_COUNT];
        let mut left = extra;
        for class in BORROW_ORDER {
            if left == 0 {
                break;
            }
            let take = left.min(self.free_for_iot(link, class));
            if take > 0 {
                let have = self.group_reserved(key, link)[class.index()];
                self.set_class_rate(key, link, class, have + take)?;
                placed[class.index()] = take;
                left -= take;
            }
        }
        Ok(placed)
    }

    pub fn monitor(&self, tick: u64) -> MonitorSample {
        let links = self
            .ledgers
            .values()
            .map(|ledger| {
                let served = self.served.get(ledger.link()).copied().unwrap_or([0; CLASS_COUNT]);
                let demand = self.native_demand(ledger.link());
                let mut classes = [ClassSample::default(); CLASS_COUNT];
                for class in TrafficClassId::ALL {
                    let c = class.index();
                    classes[c] = ClassSample {
                        limit: ledger.limit(class),
                        allocated: ledger.allocated()[c],
                        borrowed: ledger.borrowed()[c],
                        headroom: ledger.headroom(class),
                        served: served[c],
                        native_demand: demand[c],
                    };
                }
                LinkSample {
                    link: ledger.link().clone(),
                    capacity: ledger.capacity(),
                    classes,
                }
            })
            .collect();
        MonitorSample { tick, links }
    }

    /// Feeds the data plane's served rates back for the next `monitor`.
    pub fn record_served(&mut self, report: &TickReport) {
        for (id, link) in &report.links {
            self.served.insert(id.clone(), link.served());
        }
    }

    /// Periodic rebalancing.
    ///
    /// 1. Preemption (integrated only): where background demand in TC1/TC2 no
    ///    longer fits beside borrowed IoT rate, borrowed reservations are
    ///    evicted, largest first (ties by id). Evicted rate moves to TC0 if it
    ///    has headroom, otherwise it leaves the budget.
    /// 2. Pending background sources are admitted where they now fit.
    /// 3. Redistribution: TC0 room not claimed by background traffic is split
    ///    max-min fair among IoT groups; with integration, the unmet remainder
    ///    is split max-min fair over the TC1 and TC2 room, filled TC1 first.
    ///
    /// Without integration only TC0 is redistributed and the returned list is
    /// always empty.
    pub fn rebalance(&mut self, _tick: u64) -> Result<Vec<Reassignment>, ControllerError> {
        let mut moves = Vec::new();
        if self.integrated {
            self.preempt(&mut moves)?;
        }
        self.admit_pending();
        self.redistribute(&mut moves)?;
        self.admit_pending();
        self.refresh_entry_rates();
        Ok(moves)
    }

    fn preempt(&mut self, moves: &mut Vec<Reassignment>) -> Result<(), ControllerError> {
        let links: Vec<LinkId> = self.ledgers.keys().cloned().collect();
        for link in links {
            for class in BORROW_ORDER {
                let demand = self.native_demand(&link)[class.index()];
                loop {
                    let ledger = &self.ledgers[&link];
                    let borrowed = ledger.borrowed()[class.index()];
                    if borrowed == 0 || demand + borrowed <= ledger.limit(class) {
                        break;
                    }
                    let victim = ledger
                        .reservations()
                        .filter(|r| r.class == class && r.kind == ReservationKind::Borrowed)
                        .max_by(|a, b| a.rate.cmp(&b.rate).then(b.id.cmp(&a.id)))
                        .map(|r| (r.id, r.rate))
                        .expect("borrowed column is non-zero");
                    let owner = self
                        .flows
                        .iter()
                        .find(|(_, f)| {
                            f.reservations
                                .get(&link)
                                .is_some_and(|s| s[class.index()] == Some(victim.0))
                        })
                        .map(|(k, _)| k.clone())
                        .expect("borrowed reservations belong to installed groups");
                    self.set_class_rate(&owner, &link, class, 0)?;
                    let to_native = victim.1.min(self.ledgers[&link].headroom(IOT_CLASS));
                    if to_native > 0 {
                        let have = self.group_reserved(&owner, &link)[IOT_CLASS.index()];
                        self.set_class_rate(&owner, &link, IOT_CLASS, have + to_native)?;
                        moves.push(Reassignment {
                            group: owner.clone(),
                            link: link.clone(),
                            from: class,
                            to: Some(IOT_CLASS),
                            rate: to_native,
                        });
                    }
                    if victim.1 > to_native {
                        moves.push(Reassignment {
                            group: owner,
                            link: link.clone(),
                            from: class,
                            to: None,
                            rate: victim.1 - to_native,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Max-min targets for every group: (TC0 share, borrowed share).
    fn targets(&self) -> BTreeMap<GroupKey, (u64, u64)> {
        let link_index: BTreeMap<&LinkId, usize> = self.ledgers.keys().enumerate().map(|(i, l)| (l, i)).collect();
        let keys: Vec<&GroupKey> = self.flows.keys().collect();
        let paths: Vec<Vec<usize>> = keys
            .iter()
            .map(|k| self.flows[*k].path.links.iter().map(|l| link_index[l]).collect())
            .collect();
        let demands: Vec<u64> = keys.iter().map(|k| self.flows[*k].group.demand).collect();

        let native_pool: Vec<u64> = self
            .ledgers
            .iter()
            .map(|(l, ledger)| {
                ledger
                    .limit(IOT_CLASS)
                    .saturating_sub(self.native_demand(l)[IOT_CLASS.index()])
            })
            .collect();
        let native = network_water_fill(&demands, &paths, &native_pool);

        let borrowed = if self.integrated {
            let residual: Vec<u64> = demands.iter().zip(&native).map(|(d, n)| d - n).collect();
            let pool: Vec<u64> = self
                .ledgers
                .iter()
                .map(|(l, ledger)| {
                    let demand = self.native_demand(l);
                    BORROW_ORDER
                        .iter()
                        .map(|&c| ledger.limit(c).saturating_sub(demand[c.index()]))
                        .sum()
                })
                .collect();
            network_water_fill(&residual, &paths, &pool)
        } else {
            vec![0; keys.len()]
        };

        keys.into_iter()
            .cloned()
            .zip(native.into_iter().zip(borrowed))
            .collect()
    }

    fn redistribute(&mut self, moves: &mut Vec<Reassignment>) -> Result<(), ControllerError> {
        let targets = self.targets();
        let plan: Vec<(GroupKey, Vec<LinkId>, u64, u64)> = targets
            .into_iter()
            .map(|(k, (n, b))| {
                let links = self.flows[&k].path.links.clone();
                (k, links, n, b)
            })
            .collect();

        // Shrink everything first so growth below always finds room.
        for (key, links, native, borrowed) in &plan {
            for link in links {
                let have = self.group_reserved(key, link);
                if have[IOT_CLASS.index()] > *native {
                    self.set_class_rate(key, link, IOT_CLASS, *native)?;
                }
                let mut excess = (have[1] + have[2]).saturating_sub(*borrowed);
                for class in [TrafficClassId::TC2, TrafficClassId::TC1] {
                    let cut = excess.min(have[class.index()]);
                    if cut > 0 {
                        self.set_class_rate(key, link, class, have[class.index()] - cut)?;
                        excess -= cut;
                        moves.push(Reassignment {
                            group: key.clone(),
                            link: link.clone(),
                            from: class,
                            to: None,
                            rate: cut,
                        });
                    }
                }
            }
        }
        for (key, links, native, borrowed) in &plan {
            for link in links {
                let have = self.group_reserved(key, link);
                if have[IOT_CLASS.index()] < *native {
                    self.set_class_rate(key, link, IOT_CLASS, *native)?;
                }
                let need = borrowed.saturating_sub(have[1] + have[2]);
                let placed = self.grow_borrowed(key, link, need)?;
                for class in BORROW_ORDER {
                    let rate = placed[class.index()];
                    if rate > 0 {
                        moves.push(Reassignment {
                            group: key.clone(),
                            link: link.clone(),
                            from: IOT_CLASS,
                            to: Some(class),
                            rate,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-link queue caps (the class constraints) plus the IoT share in each
    /// class, and the matching routes, written into the data plane.
    pub fn apply_queue_limits(&self, netsim: &mut Netsim) -> Result<Vec<QueueConfig>, ControllerError> {
        let mut configs = Vec::with_capacity(self.ledgers.len());
        for (id, ledger) in &self.ledgers {
            let mut iot_share = [0; CLASS_COUNT];
            for key in self.flows.keys() {
                for (c, r) in self.group_reserved(key, id).iter().enumerate() {
                    iot_share[c] += r;
                }
            }
            let link = self.topology.link(id).expect("ledger per link");
            let switch = self
                .topology
                .node(&link.src)
                .filter(|n| n.kind == NodeKind::Switch)
                .map(|n| n.id.clone());
            netsim
                .set_queue_caps(id, ledger.limits())
                .expect("netsim built from the same topology");
            configs.push(QueueConfig {
                link: id.clone(),
                switch,
                caps: ledger.limits(),
                iot_share,
            });
        }
        netsim.set_routes(self.routes());
        Ok(configs)
    }

    pub fn routes(&self) -> BTreeMap<FlowKey, Route> {
        let mut routes = BTreeMap::new();
        for (key, flow) in &self.flows {
            routes.insert(
                FlowKey::Group(key.clone()),
                Route {
                    links: flow.path.links.clone(),
                    split: flow.path.links.iter().map(|l| self.group_reserved(key, l)).collect(),
                    overflow: IOT_CLASS,
                },
            );
        }
        for (id, s) in &self.sources {
            routes.insert(
                FlowKey::Source(id.clone()),
                Route::single_class(s.path.links.clone(), s.source.class),
            );
        }
        routes
    }

    /// Path-consistency and ledger checks, for tests and debug runs.
    pub fn check_invariants(&self) -> Result<(), String> {
        for ledger in self.ledgers.values() {
            ledger
                .check_invariants()
                .map_err(|e| format!("{}: {e}", ledger.link()))?;
        }
        for (key, flow) in &self.flows {
            let on_path: BTreeSet<&LinkId> = flow.path.links.iter().collect();
            let reserved: BTreeSet<&LinkId> = flow.reservations.keys().collect();
            if on_path != reserved {
                return Err(format!("{key}: reservations off path"));
            }
            let switches: BTreeSet<&NodeId> = flow
                .path
                .links
                .iter()
                .map(|l| &self.topology.link(l).expect("exists").src)
                .filter(|n| self.topology.node(n).is_some_and(|n| n.kind == NodeKind::Switch))
                .collect();
            let with_entry: BTreeSet<&NodeId> = self
                .flow_table
                .values()
                .filter(|e| &e.matches == key)
                .map(|e| &e.switch)
                .collect();
            if switches != with_entry {
                return Err(format!("{key}: flow entries off path"));
            }
            for (link, slots) in &flow.reservations {
                for (c, slot) in slots.iter().enumerate() {
                    if let Some(id) = slot {
                        let r = self.ledgers[link]
                            .reservation(*id)
                            .ok_or_else(|| format!("{key}: dangling reservation {id}"))?;
                        if r.class.index() != c {
                            return Err(format!("{key}: reservation {id} in wrong class slot"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
