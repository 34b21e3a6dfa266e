//! Scenario documents, the run loop and metrics output.
//!
//! Scenarios are TOML documents; `docs/scenario-format.md` lists every field.
//! [`PAPER_POC`] is the built-in two-aggregator, two-consumer scenario.

mod run;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path as FsPath;

use serde::Deserialize;
use thiserror::Error;

use crate::aggregator::{IngestProfile, QosLevel, TickLength, Topic, TopicName};
use crate::bam::{BandwidthConstraint, LinkBamState, TrafficClassId, CLASS_COUNT};
use crate::netsim::{SourceId, TrafficSource};
use crate::topology::{Link, LinkId, Node, NodeId, NodeKind, Topology};

pub use run::{
    compare, run, Attachment, CompareReport, CsvSink, LinkRow, LinkSummary, MemorySink, MetricsSink, SimError,
    Simulation, StepRecord, SubscriptionRow, Summary, COMPARE_HEADER, LINKS_HEADER, SUBSCRIPTIONS_HEADER,
};

/// The built-in scenario document.
pub const PAPER_POC: &str = include_str!("paper_poc.toml");
/// Name that resolves to [`PAPER_POC`] wherever a scenario file is expected.
pub const PAPER_POC_NAME: &str = "paper-poc";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation(msg.into())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    name: String,
    #[serde(default = "default_tick_ms")]
    tick_ms: u64,
    #[serde(default = "default_true")]
    integrated: bool,
    #[serde(default)]
    seed: u64,
    fractions: [f64; CLASS_COUNT],
    buffer_bytes: u64,
    #[serde(default)]
    ingest_jitter: f64,
    bottleneck: Option<String>,
    #[serde(default)]
    nodes: Vec<NodeDoc>,
    #[serde(default)]
    links: Vec<LinkDoc>,
    #[serde(default)]
    topics: Vec<TopicDoc>,
    #[serde(default)]
    sources: Vec<SourceDoc>,
    #[serde(default)]
    events: Vec<EventDoc>,
}

fn default_tick_ms() -> u64 {
    100
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: NodeKind,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    id: String,
    src: String,
    dst: String,
    capacity_bps: u64,
    fractions: Option<[f64; CLASS_COUNT]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopicDoc {
    name: String,
    home: String,
    qos: u8,
    ingest_bytes_per_sec: u64,
    #[serde(default)]
    start_tick: u64,
    end_tick: Option<u64>,
    buffer_bytes: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceDoc {
    id: String,
    origin: String,
    destination: String,
    class: u8,
    rate_bps: u64,
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum EventKindDoc {
    StartSource,
    StopSource,
    Subscribe,
    Unsubscribe,
    End,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventDoc {
    tick: u64,
    kind: EventKindDoc,
    source: Option<String>,
    consumer: Option<String>,
    #[serde(default)]
    topics: Vec<String>,
    #[serde(default)]
    aggregators: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicSpec {
    pub topic: Topic,
    pub buffer_bytes: u64,
    pub ingest: IngestProfile,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    StartSource(SourceId),
    StopSource(SourceId),
    Subscribe { consumer: NodeId, topics: Vec<TopicName> },
    Unsubscribe { consumer: NodeId, topics: Vec<TopicName> },
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub tick: u64,
    pub kind: EventKind,
}

/// A validated scenario. Every id it mentions resolves.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub tick: TickLength,
    pub integrated: bool,
    pub seed: u64,
    /// Maximum relative ingest deviation per tick; 0 disables jitter.
    pub ingest_jitter: f64,
    pub topology: Topology,
    pub constraints: Vec<BandwidthConstraint>,
    pub link_constraints: BTreeMap<LinkId, Vec<BandwidthConstraint>>,
    pub bottleneck: Option<LinkId>,
    pub topics: BTreeMap<TopicName, TopicSpec>,
    pub sources: BTreeMap<SourceId, TrafficSource>,
    /// Sorted by tick, declaration order within a tick; the last is `End`.
    pub events: Vec<Event>,
}

impl Scenario {
    /// Number of ticks executed: `0..end_tick`.
    pub fn end_tick(&self) -> u64 {
        self.events.last().map_or(0, |e| e.tick)
    }

    pub fn aggregators(&self) -> impl Iterator<Item = &NodeId> {
        self.topology
            .nodes()
            .filter(|n| n.kind == NodeKind::Aggregator)
            .map(|n| &n.id)
    }

    pub fn consumers(&self) -> impl Iterator<Item = &NodeId> {
        self.topology
            .nodes()
            .filter(|n| n.kind == NodeKind::Consumer)
            .map(|n| &n.id)
    }

    pub fn paper_poc() -> Self {
        parse(PAPER_POC).expect("built-in scenario is valid")
    }

    /// Loads a scenario file, or the built-in one for `paper-poc`.
    pub fn load(name_or_path: &str) -> Result<Self, ScenarioError> {
        if name_or_path == PAPER_POC_NAME {
            return parse(PAPER_POC);
        }
        let text = fs::read_to_string(FsPath::new(name_or_path)).map_err(|source| ScenarioError::Io {
            path: name_or_path.to_string(),
            source,
        })?;
        parse(&text)
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
    let doc: Document = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ScenarioError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    validate(doc)
}

fn constraints(fractions: [f64; CLASS_COUNT]) -> Result<Vec<BandwidthConstraint>, ScenarioError> {
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0 || *f > 1.0) {
        return Err(invalid(format!("class fractions {fractions:?} must lie in (0, 1]")));
    }
    Ok(BandwidthConstraint::from_fractions(fractions))
}

fn validate(doc: Document) -> Result<Scenario, ScenarioError> {
    let tick = TickLength::from_millis(doc.tick_ms).ok_or_else(|| invalid("tick_ms must be positive"))?;
    if !(0.0..1.0).contains(&doc.ingest_jitter) {
        return Err(invalid("ingest_jitter must lie in [0, 1)"));
    }

    let mut topology = Topology::new();
    for n in &doc.nodes {
        topology
            .add_node(Node::new(n.id.clone(), n.kind))
            .map_err(|e| invalid(e.to_string()))?;
    }
    let constraints_default = constraints(doc.fractions)?;
    let mut link_constraints = BTreeMap::new();
    for l in &doc.links {
        let link = Link::new(l.id.clone(), l.src.clone(), l.dst.clone(), l.capacity_bps);
        topology.add_link(link).map_err(|e| invalid(e.to_string()))?;
        let bcs = match l.fractions {
            Some(f) => {
                let bcs = constraints(f)?;
                link_constraints.insert(LinkId::new(l.id.clone()), bcs.clone());
                bcs
            }
            None => constraints_default.clone(),
        };
        LinkBamState::configure(LinkId::new(l.id.clone()), l.capacity_bps, &bcs)
            .map_err(|e| invalid(format!("link `{}`: {e}", l.id)))?;
    }
    let bottleneck = match doc.bottleneck {
        Some(b) => {
            let id = LinkId::new(b);
            topology
                .link(&id)
                .ok_or_else(|| invalid(format!("bottleneck `{id}` is not a link")))?;
            Some(id)
        }
        None => None,
    };
    let kind_of = |id: &str| topology.node(&NodeId::new(id)).map(|n| n.kind);

    let mut topics = BTreeMap::new();
    for t in &doc.topics {
        if kind_of(&t.home) != Some(NodeKind::Aggregator) {
            return Err(invalid(format!(
                "topic `{}`: home `{}` is not an aggregator",
                t.name, t.home
            )));
        }
        let qos =
            QosLevel::new(t.qos).ok_or_else(|| invalid(format!("topic `{}`: qos {} out of range", t.name, t.qos)))?;
        if t.end_tick.is_some_and(|end| end < t.start_tick) {
            return Err(invalid(format!("topic `{}`: end_tick before start_tick", t.name)));
        }
        let name = TopicName::new(t.name.clone());
        let spec = TopicSpec {
            topic: Topic {
                name: name.clone(),
                home: NodeId::new(t.home.clone()),
                qos,
            },
            buffer_bytes: t.buffer_bytes.unwrap_or(doc.buffer_bytes),
            ingest: IngestProfile {
                topic: name.clone(),
                rate: t.ingest_bytes_per_sec,
                start_tick: t.start_tick,
                end_tick: t.end_tick,
            },
        };
        if topics.insert(name, spec).is_some() {
            return Err(invalid(format!("topic `{}` declared twice", t.name)));
        }
    }

    let mut sources = BTreeMap::new();
    let mut pairs = BTreeSet::new();
    for s in &doc.sources {
        for end in [&s.origin, &s.destination] {
            if kind_of(end) != Some(NodeKind::TrafficHost) {
                return Err(invalid(format!("source `{}`: `{end}` is not a traffic host", s.id)));
            }
        }
        if !pairs.insert((s.origin.clone(), s.destination.clone())) {
            return Err(invalid(format!(
                "source `{}`: another source already runs {} -> {}",
                s.id, s.origin, s.destination
            )));
        }
        let class = TrafficClassId::new(s.class)
            .ok_or_else(|| invalid(format!("source `{}`: class {} out of range", s.id, s.class)))?;
        let source = TrafficSource {
            id: SourceId::new(s.id.clone()),
            origin: NodeId::new(s.origin.clone()),
            destination: NodeId::new(s.destination.clone()),
            class,
            rate: s.rate_bps,
            active: false,
        };
        topology
            .compute_path(&source.origin, &source.destination)
            .map_err(|e| invalid(format!("source `{}`: {e}", s.id)))?;
        if sources.insert(source.id.clone(), source).is_some() {
            return Err(invalid(format!("source `{}` declared twice", s.id)));
        }
    }

    let mut events = Vec::with_capacity(doc.events.len());
    for (i, e) in doc.events.iter().enumerate() {
        let at = format!("event {} (tick {})", i + 1, e.tick);
        let kind = match e.kind {
            EventKindDoc::StartSource | EventKindDoc::StopSource => {
                let id = e
                    .source
                    .as_deref()
                    .ok_or_else(|| invalid(format!("{at}: missing `source`")))?;
                let id = SourceId::new(id);
                if !sources.contains_key(&id) {
                    return Err(invalid(format!("{at}: unknown source `{id}`")));
                }
                if e.kind == EventKindDoc::StartSource {
                    EventKind::StartSource(id)
                } else {
                    EventKind::StopSource(id)
                }
            }
            EventKindDoc::Subscribe | EventKindDoc::Unsubscribe => {
                let consumer = e
                    .consumer
                    .as_deref()
                    .ok_or_else(|| invalid(format!("{at}: missing `consumer`")))?;
                if kind_of(consumer) != Some(NodeKind::Consumer) {
                    return Err(invalid(format!("{at}: unknown consumer `{consumer}`")));
                }
                let consumer = NodeId::new(consumer);
                let mut names = BTreeSet::new();
                for t in &e.topics {
                    let name = TopicName::new(t.clone());
                    if !topics.contains_key(&name) {
                        return Err(invalid(format!("{at}: unknown topic `{t}`")));
                    }
                    names.insert(name);
                }
                for ag in &e.aggregators {
                    if kind_of(ag) != Some(NodeKind::Aggregator) {
                        return Err(invalid(format!("{at}: unknown aggregator `{ag}`")));
                    }
                    names.extend(
                        topics
                            .values()
                            .filter(|t| t.topic.home.as_str() == ag)
                            .map(|t| t.topic.name.clone()),
                    );
                }
                if names.is_empty() {
                    return Err(invalid(format!("{at}: no topics selected")));
                }
                for name in &names {
                    let home = &topics[name].topic.home;
                    topology
                        .compute_path(home, &consumer)
                        .map_err(|err| invalid(format!("{at}: topic `{name}`: {err}")))?;
                }
                let topics = names.into_iter().collect();
                if e.kind == EventKindDoc::Subscribe {
                    EventKind::Subscribe { consumer, topics }
                } else {
                    EventKind::Unsubscribe { consumer, topics }
                }
            }
            EventKindDoc::End => EventKind::End,
        };
        events.push(Event { tick: e.tick, kind });
    }
    // Stable: declaration order survives within a tick.
    events.sort_by_key(|e| e.tick);

    let ends = events.iter().filter(|e| e.kind == EventKind::End).count();
    if ends != 1 {
        return Err(invalid(format!("expected exactly one `end` event, found {ends}")));
    }
    let end = events.iter().find(|e| e.kind == EventKind::End).expect("counted").tick;
    if events.iter().any(|e| e.tick > end) {
        return Err(invalid("events scheduled after the `end` event"));
    }
    // Move `end` behind anything else at the same tick.
    let pos = events.iter().position(|e| e.kind == EventKind::End).expect("counted");
    let end_event = events.remove(pos);
    events.push(end_event);

    check_timeline(&events)?;

    Ok(Scenario {
        name: doc.name,
        tick,
        integrated: doc.integrated,
        seed: doc.seed,
        ingest_jitter: doc.ingest_jitter,
        topology,
        constraints: constraints_default,
        link_constraints,
        bottleneck,
        topics,
        sources,
        events,
    })
}

/// Rejects starting a running source, stopping an idle one, and duplicate or
/// missing subscriptions.
fn check_timeline(events: &[Event]) -> Result<(), ScenarioError> {
    let mut running = BTreeSet::new();
    let mut subscribed = BTreeSet::new();
    for e in events {
        match &e.kind {
            EventKind::StartSource(id) => {
                if !running.insert(id.clone()) {
                    return Err(invalid(format!("tick {}: source `{id}` is already running", e.tick)));
                }
            }
            EventKind::StopSource(id) => {
                if !running.remove(id) {
                    return Err(invalid(format!("tick {}: source `{id}` is not running", e.tick)));
                }
            }
            EventKind::Subscribe { consumer, topics } => {
                for t in topics {
                    if !subscribed.insert((consumer.clone(), t.clone())) {
                        return Err(invalid(format!(
                            "tick {}: `{consumer}` already subscribes to `{t}`",
                            e.tick
                        )));
                    }
                }
            }
            EventKind::Unsubscribe { consumer, topics } => {
                for t in topics {
                    if !subscribed.remove(&(consumer.clone(), t.clone())) {
                        return Err(invalid(format!(
                            "tick {}: `{consumer}` does not subscribe to `{t}`",
                            e.tick
                        )));
                    }
                }
            }
            EventKind::End => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            r#"
name = "m"
fractions = [0.5, 0.3, 0.2]
buffer_bytes = 1000

[[nodes]]
id = "ag"
kind = "aggregator"
[[nodes]]
id = "c"
kind = "consumer"
[[links]]
id = "l"
src = "ag"
dst = "c"
capacity_bps = 1000
[[topics]]
name = "t"
home = "ag"
qos = 0
ingest_bytes_per_sec = 10
{extra}
"#
        )
    }

    #[test]
    fn builtin_scenario_shape() {
        let s = Scenario::paper_poc();
        assert_eq!(s.aggregators().count(), 2);
        assert_eq!(s.consumers().count(), 2);
        let hosts = s.topology.nodes().filter(|n| n.kind == NodeKind::TrafficHost).count();
        assert_eq!(hosts, 2);
        assert_eq!(s.events.len(), 7);
        assert_eq!(s.end_tick(), 300);
        assert_eq!(s.tick.millis(), 100);
        assert_eq!(s.bottleneck, Some(LinkId::new("s1-s2")));
    }

    #[test]
    fn overfull_fractions_rejected() {
        let doc = minimal("[[events]]\ntick = 1\nkind = \"end\"").replace("[0.5, 0.3, 0.2]", "[0.6, 0.3, 0.2]");
        assert!(matches!(parse(&doc), Err(ScenarioError::Validation(_))));
    }

    #[test]
    fn unknown_consumer_rejected() {
        let doc = minimal(
            "[[events]]\ntick = 0\nkind = \"subscribe\"\nconsumer = \"nobody\"\ntopics = [\"t\"]\n[[events]]\ntick = 1\nkind = \"end\"",
        );
        let err = parse(&doc).unwrap_err();
        assert!(err.to_string().contains("nobody"), "{err}");
    }

    #[test]
    fn parse_error_has_position() {
        let err = parse("name = \"x\"\nfractions = [0.5, 0.3,\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2.., .. }), "{err}");
        let err = parse("name = \"x\"\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 2, column: 1, .. }), "{err}");
    }

    #[test]
    fn end_event_rules() {
        assert!(parse(&minimal("")).is_err());
        let two = "[[events]]\ntick = 1\nkind = \"end\"\n[[events]]\ntick = 2\nkind = \"end\"";
        assert!(parse(&minimal(two)).is_err());
        let late = "[[events]]\ntick = 1\nkind = \"end\"\n[[events]]\ntick = 2\nkind = \"subscribe\"\nconsumer = \"c\"\ntopics = [\"t\"]";
        assert!(parse(&minimal(late)).is_err());
    }

    #[test]
    fn events_sorted_stably() {
        let doc = minimal(
            "[[events]]\ntick = 5\nkind = \"end\"\n\
             [[events]]\ntick = 3\nkind = \"unsubscribe\"\nconsumer = \"c\"\ntopics = [\"t\"]\n\
             [[events]]\ntick = 3\nkind = \"subscribe\"\nconsumer = \"c\"\ntopics = [\"t\"]",
        );
        // Unsubscribe before subscribe at the same tick is a timeline error.
        assert!(parse(&doc).is_err());
        let doc = minimal(
            "[[events]]\ntick = 5\nkind = \"end\"\n\
             [[events]]\ntick = 3\nkind = \"subscribe\"\nconsumer = \"c\"\ntopics = [\"t\"]\n\
             [[events]]\ntick = 3\nkind = \"unsubscribe\"\nconsumer = \"c\"\ntopics = [\"t\"]",
        );
        let s = parse(&doc).unwrap();
        assert!(matches!(s.events[0].kind, EventKind::Subscribe { .. }));
        assert!(matches!(s.events[1].kind, EventKind::Unsubscribe { .. }));
        assert_eq!(s.events[2].kind, EventKind::End);
    }

    #[test]
    fn line_col_counts_from_one() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
