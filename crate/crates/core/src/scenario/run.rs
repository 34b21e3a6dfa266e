use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{EventKind, Scenario};
use crate::aggregator::{Aggregator, AggregatorError, Emission, SubscriptionId, TopicName};
use crate::bam::ClassRates;
use crate::controller::{Controller, ControllerError, MonitorSample, QueueConfig, Reassignment};
use crate::netsim::{FlowDemand, FlowKey, Netsim, NetsimError, SourceId, TickReport};
use crate::orchestrator::{DemandReport, GroupKey, Orchestrator, OrchestratorError};
use crate::topology::{LinkId, NodeId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error("metrics output failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkRow {
    pub tick: u64,
    pub link: LinkId,
    pub served: ClassRates,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriptionRow {
    pub tick: u64,
    pub subscription: SubscriptionId,
    /// Bits per second.
    pub grant: u64,
    pub delivered_bytes: u64,
}

pub trait MetricsSink {
    fn link_row(&mut self, row: &LinkRow) -> io::Result<()>;
    fn subscription_row(&mut self, row: &SubscriptionRow) -> io::Result<()>;
}

pub const LINKS_HEADER: &str = "tick,link,tc0_served,tc1_served,tc2_served,utilization";
pub const SUBSCRIPTIONS_HEADER: &str = "tick,subscription,grant,delivered_bytes";

/// Writes `links.csv` and `subscriptions.csv` content.
pub struct CsvSink<L: Write, S: Write> {
    links: L,
    subscriptions: S,
}

impl<L: Write, S: Write> CsvSink<L, S> {
    pub fn new(mut links: L, mut subscriptions: S) -> io::Result<Self> {
        writeln!(links, "{LINKS_HEADER}")?;
        writeln!(subscriptions, "{SUBSCRIPTIONS_HEADER}")?;
        Ok(CsvSink { links, subscriptions })
    }

    pub fn finish(mut self) -> io::Result<(L, S)> {
        self.links.flush()?;
        self.subscriptions.flush()?;
        Ok((self.links, self.subscriptions))
    }
}

impl<L: Write, S: Write> MetricsSink for CsvSink<L, S> {
    fn link_row(&mut self, r: &LinkRow) -> io::Result<()> {
        writeln!(
            self.links,
            "{},{},{},{},{},{:.6}",
            r.tick, r.link, r.served[0], r.served[1], r.served[2], r.utilization
        )
    }

    fn subscription_row(&mut self, r: &SubscriptionRow) -> io::Result<()> {
        writeln!(
            self.subscriptions,
            "{},{},{},{}",
            r.tick, r.subscription, r.grant, r.delivered_bytes
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    pub links: Vec<LinkRow>,
    pub subscriptions: Vec<SubscriptionRow>,
}

impl MetricsSink for MemorySink {
    fn link_row(&mut self, row: &LinkRow) -> io::Result<()> {
        self.links.push(row.clone());
        Ok(())
    }

    fn subscription_row(&mut self, row: &SubscriptionRow) -> io::Result<()> {
        self.subscriptions.push(row.clone());
        Ok(())
    }
}

/// Where a subscription's cursor started and how much it has received since.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Attachment {
    pub position: u64,
    pub delivered: u64,
}

/// Everything observable about one executed tick.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub tick: u64,
    pub demands: DemandReport,
    pub monitor: MonitorSample,
    pub reassignments: Vec<Reassignment>,
    pub queues: Vec<QueueConfig>,
    pub budgets: BTreeMap<GroupKey, u64>,
    pub grants: BTreeMap<SubscriptionId, u64>,
    pub emitted: BTreeMap<SubscriptionId, u64>,
    pub delivered: BTreeMap<SubscriptionId, u64>,
    pub report: TickReport,
}

/// The run loop, one tick per `step`.
pub struct Simulation {
    scenario: Scenario,
    tick: u64,
    next_event: usize,
    controller: Controller,
    orchestrator: Orchestrator,
    aggregators: BTreeMap<NodeId, Aggregator>,
    netsim: Netsim,
    rng: ChaCha8Rng,
    delivered: BTreeMap<SubscriptionId, u64>,
    attachments: BTreeMap<SubscriptionId, Attachment>,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let controller = Controller::new(
            scenario.topology.clone(),
            &scenario.constraints,
            &scenario.link_constraints,
            scenario.integrated,
        )?;
        let mut orchestrator = Orchestrator::new();
        let mut aggregators: BTreeMap<NodeId, Aggregator> = scenario
            .aggregators()
            .map(|id| (id.clone(), Aggregator::new(id.clone())))
            .collect();
        for spec in scenario.topics.values() {
            orchestrator.register_topic(spec.topic.clone());
            aggregators
                .get_mut(&spec.topic.home)
                .expect("topic homes are aggregators")
                .add_topic(spec.topic.clone(), spec.buffer_bytes)?;
        }
        for c in scenario.consumers() {
            orchestrator.register_consumer(c.clone());
        }
        Ok(Simulation {
            netsim: Netsim::new(&scenario.topology),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            scenario,
            tick: 0,
            next_event: 0,
            controller,
            orchestrator,
            aggregators,
            delivered: BTreeMap::new(),
            attachments: BTreeMap::new(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// The next tick to execute.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn is_finished(&self) -> bool {
        self.tick >= self.scenario.end_tick()
    }

    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orchestrator
    }

    pub fn aggregators(&self) -> impl Iterator<Item = &Aggregator> {
        self.aggregators.values()
    }

    pub fn aggregator(&self, id: &NodeId) -> Option<&Aggregator> {
        self.aggregators.get(id)
    }

    pub fn netsim(&self) -> &Netsim {
        &self.netsim
    }

    /// Bytes delivered to `sub` over the whole run so far.
    pub fn delivered(&self, sub: &SubscriptionId) -> u64 {
        self.delivered.get(sub).copied().unwrap_or(0)
    }

    pub fn attachment(&self, sub: &SubscriptionId) -> Option<Attachment> {
        self.attachments.get(sub).copied()
    }

    fn apply_events(&mut self) -> Result<(), SimError> {
        while let Some(event) = self.scenario.events.get(self.next_event) {
            if event.tick != self.tick {
                break;
            }
            match &event.kind {
                EventKind::StartSource(id) => {
                    let mut source = self.scenario.sources[id].clone();
                    source.active = true;
                    self.controller.start_source(source)?;
                }
                EventKind::StopSource(id) => self.controller.stop_source(id)?,
                EventKind::Subscribe { consumer, topics } => {
                    for topic in topics {
                        let sub = self.orchestrator.subscribe(consumer, topic)?;
                        let ag = self
                            .aggregators
                            .get_mut(&sub.topic.home)
                            .expect("topic homes are aggregators");
                        ag.attach(topic, sub.id.clone())?;
                        let position = ag.buffer(topic).expect("attached").released();
                        self.attachments.insert(sub.id, Attachment { position, delivered: 0 });
                    }
                }
                EventKind::Unsubscribe { consumer, topics } => {
                    for topic in topics {
                        let sub = self.orchestrator.unsubscribe(consumer, topic)?;
                        self.aggregators
                            .get_mut(&sub.topic.home)
                            .expect("topic homes are aggregators")
                            .detach(topic, &sub.id)?;
                        self.attachments.remove(&sub.id);
                    }
                }
                EventKind::End => {}
            }
            self.next_event += 1;
        }
        Ok(())
    }

    fn ingest(&mut self) -> Result<(), SimError> {
        let dt = self.scenario.tick;
        let jitter = self.scenario.ingest_jitter;
        for spec in self.scenario.topics.values() {
            let mut bytes = spec.ingest.bytes_in_tick(self.tick, dt);
            if jitter > 0.0 && bytes > 0 {
                let factor = 1.0 + self.rng.gen_range(-jitter..=jitter);
                bytes = (bytes as f64 * factor).round() as u64;
            }
            self.aggregators
                .get_mut(&spec.topic.home)
                .expect("topic homes are aggregators")
                .ingest(&spec.topic.name, bytes)?;
        }
        Ok(())
    }

    fn group_of(&self, e: &Emission) -> GroupKey {
        let sub = self
            .orchestrator
            .subscription(&e.subscription)
            .expect("emissions come from subscriptions");
        GroupKey::new(sub.topic.home.clone(), sub.consumer.clone())
    }

    /// Executes one tick. Returns `None` once the end tick is reached.
    pub fn step(&mut self) -> Result<Option<StepRecord>, SimError> {
        if self.is_finished() {
            return Ok(None);
        }
        let tick = self.tick;
        let dt = self.scenario.tick;

        self.apply_events()?;
        self.ingest()?;

        let demands = self.orchestrator.poll_status(self.aggregators.values(), dt);
        self.orchestrator.request_flows(&mut self.controller, &demands)?;

        let monitor = self.controller.monitor(tick);
        let reassignments = self.controller.rebalance(tick)?;
        let queues = self.controller.apply_queue_limits(&mut self.netsim)?;
        let budgets = self.controller.budgets();
        self.orchestrator.update_budgets(&budgets);

        let plan = self.orchestrator.compute_plan(&demands, tick);
        let mut tables = self.orchestrator.grant_tables(&plan);
        let mut grants = BTreeMap::new();
        for (id, ag) in &mut self.aggregators {
            let table = tables.remove(id).unwrap_or_default();
            grants.extend(table.iter().map(|(_, s, r)| (s.clone(), r)));
            ag.apply_grants(table)?;
        }

        let mut emissions: Vec<Emission> = Vec::new();
        for ag in self.aggregators.values_mut() {
            emissions.extend(ag.drain(dt));
        }
        let mut by_group: BTreeMap<GroupKey, Vec<Emission>> = BTreeMap::new();
        for e in emissions {
            by_group.entry(self.group_of(&e)).or_default().push(e);
        }

        let mut offers: Vec<FlowDemand> = by_group
            .iter()
            .map(|(key, list)| FlowDemand {
                key: FlowKey::Group(key.clone()),
                rate: dt.rate_for(list.iter().map(|e| e.bytes).sum()),
            })
            .filter(|d| d.rate > 0)
            .collect();
        for id in self.active_sources() {
            let source = &self.scenario.sources[&id];
            offers.push(FlowDemand {
                key: FlowKey::Source(source.id.clone()),
                rate: source.rate,
            });
        }
        self.netsim.offer(&offers)?;
        let report = self.netsim.serve(tick, dt);

        let mut emitted = BTreeMap::new();
        let mut delivered = BTreeMap::new();
        for (key, mut list) in by_group {
            let sent: u64 = list.iter().map(|e| e.bytes).sum();
            let mut left = report
                .flows
                .get(&FlowKey::Group(key))
                .map_or(0, |f| f.delivered_bytes)
                .min(sent);
            list.sort_by(|a, b| {
                let qa = self.orchestrator.subscription(&a.subscription).map(|s| s.qos);
                let qb = self.orchestrator.subscription(&b.subscription).map(|s| s.qos);
                (qa, &a.subscription).cmp(&(qb, &b.subscription))
            });
            for e in list {
                let got = left.min(e.bytes);
                left -= got;
                if got < e.bytes {
                    self.requeue(&e, e.bytes - got)?;
                }
                emitted.insert(e.subscription.clone(), e.bytes);
                *self.delivered.entry(e.subscription.clone()).or_default() += got;
                if let Some(a) = self.attachments.get_mut(&e.subscription) {
                    a.delivered += got;
                }
                delivered.insert(e.subscription, got);
            }
        }
        self.controller.record_served(&report);

        self.tick += 1;
        Ok(Some(StepRecord {
            tick,
            demands,
            monitor,
            reassignments,
            queues,
            budgets,
            grants,
            emitted,
            delivered,
            report,
        }))
    }

    fn requeue(&mut self, e: &Emission, bytes: u64) -> Result<(), SimError> {
        let home = self
            .orchestrator
            .subscription(&e.subscription)
            .expect("live")
            .topic
            .home
            .clone();
        self.aggregators
            .get_mut(&home)
            .expect("topic homes are aggregators")
            .requeue(&e.topic, &e.subscription, bytes)?;
        Ok(())
    }

    /// Sources running at the current tick, in id order.
    fn active_sources(&self) -> Vec<SourceId> {
        self.scenario
            .sources
            .keys()
            .filter(|id| self.controller.is_source_admitted(id).is_some())
            .cloned()
            .collect()
    }

    /// Runs to the end, sending rows to `sink`.
    pub fn run(mut self, sink: &mut dyn MetricsSink) -> Result<Summary, SimError> {
        let mut summary = Summary::new(&self.scenario);
        while let Some(rec) = self.step()? {
            for (id, link) in &rec.report.links {
                let row = LinkRow {
                    tick: rec.tick,
                    link: id.clone(),
                    served: link.served(),
                    utilization: link.utilization(),
                };
                summary.add_link_sample(&row);
                sink.link_row(&row)?;
            }
            for sub in self.orchestrator.subscriptions() {
                sink.subscription_row(&SubscriptionRow {
                    tick: rec.tick,
                    subscription: sub.id.clone(),
                    grant: rec.grants.get(&sub.id).copied().unwrap_or(0),
                    delivered_bytes: rec.delivered.get(&sub.id).copied().unwrap_or(0),
                })?;
            }
            summary.ticks += 1;
        }
        summary.delivered = self.delivered.clone();
        for ag in self.aggregators.values() {
            for b in ag.buffers() {
                summary
                    .topics
                    .insert(b.topic().name.clone(), (b.ingested(), b.dropped()));
            }
        }
        Ok(summary)
    }
}

pub fn run(scenario: Scenario, sink: &mut dyn MetricsSink) -> Result<Summary, SimError> {
    Simulation::new(scenario)?.run(sink)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LinkSummary {
    pub average: f64,
    pub peak: f64,
    sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub integrated: bool,
    pub ticks: u64,
    pub bottleneck: Option<LinkId>,
    pub links: BTreeMap<LinkId, LinkSummary>,
    pub delivered: BTreeMap<SubscriptionId, u64>,
    /// (ingested, dropped) bytes per topic.
    pub topics: BTreeMap<TopicName, (u64, u64)>,
}

impl Summary {
    fn new(s: &Scenario) -> Self {
        Summary {
            scenario: s.name.clone(),
            integrated: s.integrated,
            ticks: 0,
            bottleneck: s.bottleneck.clone(),
            links: s
                .topology
                .links()
                .map(|l| (l.id.clone(), LinkSummary::default()))
                .collect(),
            delivered: BTreeMap::new(),
            topics: BTreeMap::new(),
        }
    }

    fn add_link_sample(&mut self, row: &LinkRow) {
        let l = self.links.entry(row.link.clone()).or_default();
        l.sum += row.utilization;
        l.peak = l.peak.max(row.utilization);
        l.average = l.sum / (row.tick + 1) as f64;
    }

    pub fn bottleneck_average(&self) -> Option<f64> {
        self.bottleneck
            .as_ref()
            .and_then(|b| self.links.get(b))
            .map(|l| l.average)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}", self.scenario)?;
        writeln!(f, "integrated {}", self.integrated)?;
        writeln!(f, "ticks {}", self.ticks)?;
        if let Some(b) = &self.bottleneck {
            let l = self.links.get(b).copied().unwrap_or_default();
            writeln!(f, "bottleneck {b} average {:.6} peak {:.6}", l.average, l.peak)?;
        }
        for (id, l) in &self.links {
            writeln!(f, "link {id} average {:.6} peak {:.6}", l.average, l.peak)?;
        }
        for (id, bytes) in &self.delivered {
            writeln!(f, "subscription {id} delivered_bytes {bytes}")?;
        }
        for (name, (ingested, dropped)) in &self.topics {
            writeln!(f, "topic {name} ingested_bytes {ingested} dropped_bytes {dropped}")?;
        }
        Ok(())
    }
}

/// Integrated and non-integrated runs of one scenario side by side.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub integrated: Summary,
    pub baseline: Summary,
    /// (tick, link, integrated utilization, non-integrated utilization).
    pub rows: Vec<(u64, LinkId, f64, f64)>,
}

pub const COMPARE_HEADER: &str = "tick,link,integrated_utilization,non_integrated_utilization";

impl CompareReport {
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "{COMPARE_HEADER}")?;
        for (tick, link, a, b) in &self.rows {
            writeln!(out, "{tick},{link},{a:.6},{b:.6}")?;
        }
        out.flush()
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}", self.integrated.scenario)?;
        writeln!(f, "ticks {}", self.integrated.ticks)?;
        if let (Some(b), Some(a), Some(n)) = (
            &self.integrated.bottleneck,
            self.integrated.bottleneck_average(),
            self.baseline.bottleneck_average(),
        ) {
            writeln!(
                f,
                "bottleneck {b} integrated_average {a:.6} non_integrated_average {n:.6}"
            )?;
        }
        for (id, l) in &self.integrated.links {
            let n = self.baseline.links.get(id).copied().unwrap_or_default();
            writeln!(
                f,
                "link {id} integrated_average {:.6} non_integrated_average {:.6}",
                l.average, n.average
            )?;
        }
        Ok(())
    }
}

/// Runs `scenario` with and without integration, concurrently.
pub fn compare(scenario: &Scenario) -> Result<CompareReport, SimError> {
    let mode = |integrated: bool| {
        let mut s = scenario.clone();
        s.integrated = integrated;
        let mut sink = MemorySink::default();
        run(s, &mut sink).map(|summary| (summary, sink))
    };
    let (with, without) = std::thread::scope(|scope| {
        let handle = scope.spawn(|| mode(false));
        let with = mode(true);
        (with, handle.join().expect("comparison run panicked"))
    });
    let ((integrated, a), (baseline, b)) = (with?, without?);
    let rows = a
        .links
        .iter()
        .zip(&b.links)
        .map(|(x, y)| (x.tick, x.link.clone(), x.utilization, y.utilization))
        .collect();
    Ok(CompareReport {
        integrated,
        baseline,
        rows,
    })
}
