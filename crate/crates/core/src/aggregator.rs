//! IoT gateway aggregators: per-topic buffers drained at granted rates.

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroU64;

use thiserror::Error;

use crate::topology::NodeId;

/// Static priority of a topic; 0 is the highest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QosLevel(u8);

impl QosLevel {
    pub const LEVELS: usize = 3;
    pub const HIGHEST: QosLevel = QosLevel(0);

    pub fn new(level: u8) -> Option<Self> {
        (usize::from(level) < Self::LEVELS).then_some(QosLevel(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl fmt::Display for QosLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: impl Into<String>) -> Self {
        TopicName(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TopicName {
    fn from(s: &str) -> Self {
        TopicName::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionId(String);

impl SubscriptionId {
    pub fn new(id: impl Into<String>) -> Self {
        SubscriptionId(id.into())
    }

    /// The canonical id of `consumer`'s subscription to `topic`.
    pub fn of(consumer: &NodeId, topic: &TopicName) -> Self {
        SubscriptionId(format!("{consumer}:{topic}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubscriptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SubscriptionId {
    fn from(s: &str) -> Self {
        SubscriptionId::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topic {
    pub name: TopicName,
    pub home: NodeId,
    pub qos: QosLevel,
}

/// Simulation step length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TickLength(NonZeroU64);

impl TickLength {
    pub fn from_millis(ms: u64) -> Option<Self> {
        NonZeroU64::new(ms).map(TickLength)
    }

    pub fn millis(self) -> u64 {
        self.0.get()
    }

    /// Whole bytes a rate of `bits_per_sec` moves in one tick, rounded down.
    pub fn bytes_at(self, bits_per_sec: u64) -> u64 {
        (u128::from(bits_per_sec) * u128::from(self.millis()) / 8_000) as u64
    }

    /// Smallest integer rate that moves `bytes` in one tick.
    pub fn rate_for(self, bytes: u64) -> u64 {
        (u128::from(bytes) * 8_000).div_ceil(u128::from(self.millis())) as u64
    }

    /// Rate (bits/s) needed to move `bytes` in one tick, unrounded.
    pub fn rate_for_f64(self, bytes: u64) -> f64 {
        bytes as f64 * 8_000.0 / self.millis() as f64
    }
}

impl Default for TickLength {
    fn default() -> Self {
        TickLength(NonZeroU64::new(100).unwrap())
    }
}

/// Drop-tail buffer for one topic, shared by its subscriptions.
///
/// Bytes are addressed by their position in the topic's stream. Each
/// subscription reads through its own cursor; bytes behind every cursor are
/// released from the buffer.
#[derive(Debug, Clone)]
pub struct TopicBuffer {
    topic: Topic,
    capacity: u64,
    ingested: u64,
    dropped: u64,
    head: u64,
    tail: u64,
    cursors: BTreeMap<SubscriptionId, u64>,
}

impl TopicBuffer {
    pub fn new(topic: Topic, capacity: u64) -> Self {
        TopicBuffer {
            topic,
            capacity,
            ingested: 0,
            dropped: 0,
            head: 0,
            tail: 0,
            cursors: BTreeMap::new(),
        }
    }

    pub fn topic(&self) -> &Topic {
        &self.topic
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn occupancy(&self) -> u64 {
        self.tail - self.head
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// All bytes ever offered, accepted or not.
    pub fn ingested(&self) -> u64 {
        self.ingested
    }

    /// Bytes read by every subscription and freed from the buffer.
    pub fn released(&self) -> u64 {
        self.head
    }

    pub fn ingest(&mut self, bytes: u64) {
        let accepted = bytes.min(self.capacity - self.occupancy());
        self.ingested += bytes;
        self.tail += accepted;
        self.dropped += bytes - accepted;
    }

    /// A new reader starts at the oldest buffered byte.
    pub fn attach(&mut self, sub: SubscriptionId) {
        self.cursors.entry(sub).or_insert(self.head);
    }

    pub fn detach(&mut self, sub: &SubscriptionId) {
        if self.cursors.remove(sub).is_some() {
            self.settle_head();
        }
    }

    pub fn readers(&self) -> impl Iterator<Item = &SubscriptionId> {
        self.cursors.keys()
    }

    pub fn available(&self, sub: &SubscriptionId) -> u64 {
        self.cursors.get(sub).map_or(0, |&c| self.tail - c)
    }

    fn read(&mut self, sub: &SubscriptionId, bytes: u64) -> u64 {
        let Some(cursor) = self.cursors.get_mut(sub) else {
            return 0;
        };
        let n = bytes.min(self.tail - *cursor);
        *cursor += n;
        self.settle_head();
        n
    }

    fn unread(&mut self, sub: &SubscriptionId, bytes: u64) {
        if let Some(cursor) = self.cursors.get_mut(sub) {
            let n = bytes.min(*cursor);
            *cursor -= n;
            self.head = self.head.min(*cursor);
        }
    }

    fn settle_head(&mut self) {
        if let Some(&min) = self.cursors.values().min() {
            self.head = min;
        }
    }
}

/// Synthetic ingest for one topic.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestProfile {
    pub topic: TopicName,
    /// Bytes per second.
    pub rate: u64,
    pub start_tick: u64,
    /// Exclusive; `None` runs to the end.
    pub end_tick: Option<u64>,
}

impl IngestProfile {
    pub fn is_active(&self, tick: u64) -> bool {
        tick >= self.start_tick && self.end_tick.is_none_or(|end| tick < end)
    }

    /// Bytes produced during `tick`. Computed as a difference of cumulative
    /// totals so fractional bytes are not lost over a run.
    pub fn bytes_in_tick(&self, tick: u64, dt: TickLength) -> u64 {
        if !self.is_active(tick) {
            return 0;
        }
        let cumulative = |t: u64| u128::from(self.rate) * u128::from(t) * u128::from(dt.millis()) / 1000;
        let k = tick - self.start_tick;
        (cumulative(k + 1) - cumulative(k)) as u64
    }
}

/// Granted transmit rates (bits/s) keyed by topic and subscription.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GrantTable {
    grants: BTreeMap<(TopicName, SubscriptionId), u64>,
}

impl GrantTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, topic: TopicName, sub: SubscriptionId, rate: u64) {
        self.grants.insert((topic, sub), rate);
    }

    pub fn get(&self, topic: &TopicName, sub: &SubscriptionId) -> u64 {
        self.grants.get(&(topic.clone(), sub.clone())).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TopicName, &SubscriptionId, u64)> {
        self.grants.iter().map(|((t, s), &r)| (t, s, r))
    }

    pub fn is_empty(&self) -> bool {
        self.grants.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emission {
    pub subscription: SubscriptionId,
    pub topic: TopicName,
    pub bytes: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AggregatorError {
    #[error("topic `{topic}` is not homed at aggregator `{aggregator}`")]
    ForeignTopic { aggregator: NodeId, topic: TopicName },
    #[error("topic `{0}` registered twice")]
    DuplicateTopic(TopicName),
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    id: NodeId,
    buffers: BTreeMap<TopicName, TopicBuffer>,
    grants: GrantTable,
}

impl Aggregator {
    pub fn new(id: NodeId) -> Self {
        Aggregator {
            id,
            buffers: BTreeMap::new(),
            grants: GrantTable::new(),
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn add_topic(&mut self, topic: Topic, capacity: u64) -> Result<(), AggregatorError> {
        if topic.home != self.id {
            return Err(AggregatorError::ForeignTopic {
                aggregator: self.id.clone(),
                topic: topic.name,
            });
        }
        if self.buffers.contains_key(&topic.name) {
            return Err(AggregatorError::DuplicateTopic(topic.name));
        }
        self.buffers
            .insert(topic.name.clone(), TopicBuffer::new(topic, capacity));
        Ok(())
    }

    pub fn buffer(&self, topic: &TopicName) -> Option<&TopicBuffer> {
        self.buffers.get(topic)
    }

    pub fn buffers(&self) -> impl Iterator<Item = &TopicBuffer> {
        self.buffers.values()
    }

    fn buffer_mut(&mut self, topic: &TopicName) -> Result<&mut TopicBuffer, AggregatorError> {
        let aggregator = self.id.clone();
        self.buffers
            .get_mut(topic)
            .ok_or_else(|| AggregatorError::ForeignTopic {
                aggregator,
                topic: topic.clone(),
            })
    }

    pub fn ingest(&mut self, topic: &TopicName, bytes: u64) -> Result<(), AggregatorError> {
        self.buffer_mut(topic)?.ingest(bytes);
        Ok(())
    }

    pub fn attach(&mut self, topic: &TopicName, sub: SubscriptionId) -> Result<(), AggregatorError> {
        self.buffer_mut(topic)?.attach(sub);
        Ok(())
    }

    pub fn detach(&mut self, topic: &TopicName, sub: &SubscriptionId) -> Result<(), AggregatorError> {
        self.buffer_mut(topic)?.detach(sub);
        Ok(())
    }

    /// Replaces the current grants. Subscriptions absent from the table drain at zero.
    pub fn apply_grants(&mut self, grants: GrantTable) -> Result<(), AggregatorError> {
        if let Some((topic, _, _)) = grants.iter().find(|(t, _, _)| !self.buffers.contains_key(*t)) {
            return Err(AggregatorError::ForeignTopic {
                aggregator: self.id.clone(),
                topic: topic.clone(),
            });
        }
        self.grants = grants;
        Ok(())
    }

    pub fn grants(&self) -> &GrantTable {
        &self.grants
    }

    /// Emits up to `grant × Δt` bytes per subscription. Unused grant does not
    /// carry over.
    pub fn drain(&mut self, dt: TickLength) -> Vec<Emission> {
        let mut out = Vec::new();
        for (name, buffer) in &mut self.buffers {
            let readers: Vec<SubscriptionId> = buffer.readers().cloned().collect();
            for sub in readers {
                let allowed = dt.bytes_at(self.grants.get(name, &sub));
                let bytes = buffer.read(&sub, allowed);
                out.push(Emission {
                    subscription: sub,
                    topic: name.clone(),
                    bytes,
                });
            }
        }
        out
    }

    /// Returns bytes that were emitted but not delivered to the front of the
    /// subscription's backlog.
    pub fn requeue(&mut self, topic: &TopicName, sub: &SubscriptionId, bytes: u64) -> Result<(), AggregatorError> {
        self.buffer_mut(topic)?.unread(sub, bytes);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topic(name: &str, home: &str, qos: u8) -> Topic {
        Topic {
            name: name.into(),
            home: home.into(),
            qos: QosLevel::new(qos).unwrap(),
        }
    }

    #[test]
    fn ingest_drop_tail() {
        let mut b = TopicBuffer::new(topic("t", "ag1", 0), 1000);
        b.ingest(400);
        assert_eq!((b.occupancy(), b.dropped()), (400, 0));
        b.ingest(500);
        b.ingest(400);
        assert_eq!((b.occupancy(), b.dropped()), (1000, 300));
        b.ingest(0);
        assert_eq!((b.occupancy(), b.dropped(), b.ingested()), (1000, 300, 1300));
    }

    fn single(occupancy: u64) -> (Aggregator, SubscriptionId) {
        let mut ag = Aggregator::new("ag1".into());
        ag.add_topic(topic("t1", "ag1", 0), 10_000_000).unwrap();
        let sub = SubscriptionId::new("c1:t1");
        ag.attach(&"t1".into(), sub.clone()).unwrap();
        ag.ingest(&"t1".into(), occupancy).unwrap();
        (ag, sub)
    }

    fn grant(rate: u64, sub: &SubscriptionId) -> GrantTable {
        let mut g = GrantTable::new();
        g.insert("t1".into(), sub.clone(), rate);
        g
    }

    #[test]
    fn drain_rate_times_time() {
        let (mut ag, sub) = single(1_000_000);
        ag.apply_grants(grant(8_000_000, &sub)).unwrap();
        let e = ag.drain(TickLength::from_millis(1000).unwrap());
        assert_eq!(e[0].bytes, 1_000_000);
        assert_eq!(ag.buffer(&"t1".into()).unwrap().occupancy(), 0);
    }

    #[test]
    fn drain_is_buffer_limited() {
        let (mut ag, sub) = single(100);
        ag.apply_grants(grant(8_000_000, &sub)).unwrap();
        let e = ag.drain(TickLength::from_millis(1000).unwrap());
        assert_eq!(e[0].bytes, 100);
    }

    #[test]
    fn zero_or_missing_grant_emits_nothing() {
        let (mut ag, sub) = single(100);
        ag.apply_grants(grant(0, &sub)).unwrap();
        assert_eq!(ag.drain(TickLength::default())[0].bytes, 0);
        ag.apply_grants(GrantTable::new()).unwrap();
        assert_eq!(ag.drain(TickLength::default())[0].bytes, 0);
    }

    #[test]
    fn foreign_topic_rejected() {
        let (mut ag, sub) = single(0);
        let mut g = GrantTable::new();
        g.insert("elsewhere".into(), sub.clone(), 10_000_000);
        assert!(matches!(ag.apply_grants(g), Err(AggregatorError::ForeignTopic { .. })));
        ag.apply_grants(grant(10_000_000, &sub)).unwrap();
        assert_eq!(ag.grants().get(&"t1".into(), &sub), 10_000_000);
        assert!(ag.add_topic(topic("x", "ag2", 1), 10).is_err());
    }

    #[test]
    fn fan_out_releases_after_slowest_reader() {
        let (mut ag, a) = single(1000);
        let b = SubscriptionId::new("c2:t1");
        ag.attach(&"t1".into(), b.clone()).unwrap();
        let mut g = grant(8_000, &a);
        g.insert("t1".into(), b.clone(), 4_000);
        ag.apply_grants(g).unwrap();
        ag.drain(TickLength::from_millis(1000).unwrap());
        let buf = ag.buffer(&"t1".into()).unwrap();
        assert_eq!(buf.available(&a), 0);
        assert_eq!(buf.available(&b), 500);
        assert_eq!(buf.occupancy(), 500);
        assert_eq!(buf.released(), 500);
    }

    #[test]
    fn requeue_restores_backlog() {
        let (mut ag, sub) = single(1000);
        ag.apply_grants(grant(8_000, &sub)).unwrap();
        ag.drain(TickLength::from_millis(1000).unwrap());
        ag.requeue(&"t1".into(), &sub, 400).unwrap();
        let buf = ag.buffer(&"t1".into()).unwrap();
        assert_eq!(buf.occupancy(), 400);
        assert_eq!(buf.ingested(), buf.released() + buf.occupancy() + buf.dropped());
    }

    #[test]
    fn ingest_profile_keeps_fractional_bytes() {
        let p = IngestProfile {
            topic: "t".into(),
            rate: 1_001,
            start_tick: 2,
            end_tick: Some(12),
        };
        let dt = TickLength::from_millis(100).unwrap();
        let total: u64 = (0..20).map(|t| p.bytes_in_tick(t, dt)).sum();
        assert_eq!(total, 1_001);
        assert_eq!(p.bytes_in_tick(0, dt), 0);
        assert_eq!(p.bytes_in_tick(12, dt), 0);
    }

    #[test]
    fn tick_length_conversions() {
        let dt = TickLength::from_millis(100).unwrap();
        assert_eq!(dt.bytes_at(8_000_000), 100_000);
        assert_eq!(dt.rate_for(100_000), 8_000_000);
        let odd = TickLength::from_millis(30).unwrap();
        assert!(odd.bytes_at(odd.rate_for(7)) >= 7);
        assert!(TickLength::from_millis(0).is_none());
    }
}
