//! Network graph: nodes, directed links and minimum-hop path selection.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId(s)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinkId(String);

impl LinkId {
    pub fn new(id: impl Into<String>) -> Self {
        LinkId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LinkId {
    fn from(s: &str) -> Self {
        LinkId::new(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Switch,
    Aggregator,
    Consumer,
    TrafficHost,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Switch => "switch",
            NodeKind::Aggregator => "aggregator",
            NodeKind::Consumer => "consumer",
            NodeKind::TrafficHost => "traffic_host",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        Node {
            id: NodeId::new(id),
            kind,
        }
    }
}

/// A directed link. A full-duplex cable is two `Link` records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub id: LinkId,
    pub src: NodeId,
    pub dst: NodeId,
    /// Bits per second.
    pub capacity: u64,
}

impl Link {
    pub fn new(id: impl Into<String>, src: impl Into<String>, dst: impl Into<String>, capacity: u64) -> Self {
        Link {
            id: LinkId::new(id),
            src: NodeId::new(src),
            dst: NodeId::new(dst),
            capacity,
        }
    }
}

/// Ordered link ids from origin to destination.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Path {
    pub links: Vec<LinkId>,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.links.len()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("empty node id")]
    EmptyNodeId,
    #[error("duplicate node `{0}`")]
    DuplicateNode(NodeId),
    #[error("duplicate link `{0}`")]
    DuplicateLink(LinkId),
    #[error("link `{link}` references unknown endpoint `{node}`")]
    UnknownEndpoint { link: LinkId, node: NodeId },
    #[error("link `{0}` is a self-loop")]
    SelfLoop(LinkId),
    #[error("link `{0}` has zero capacity")]
    ZeroCapacity(LinkId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("origin and destination are both `{0}`")]
    SameEndpoints(NodeId),
    #[error("no path from `{from}` to `{to}`")]
    NoPath { from: NodeId, to: NodeId },
}

#[derive(Debug, Clone, Default)]
pub struct Topology {
    nodes: BTreeMap<NodeId, Node>,
    links: BTreeMap<LinkId, Link>,
    /// Outgoing link ids per node, kept sorted.
    out: BTreeMap<NodeId, Vec<LinkId>>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), TopologyError> {
        if node.id.as_str().is_empty() {
            return Err(TopologyError::EmptyNodeId);
        }
        if self.nodes.contains_key(&node.id) {
            return Err(TopologyError::DuplicateNode(node.id));
        }
        self.out.insert(node.id.clone(), Vec::new());
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn add_link(&mut self, link: Link) -> Result<(), TopologyError> {
        if self.links.contains_key(&link.id) {
            return Err(TopologyError::DuplicateLink(link.id));
        }
        for end in [&link.src, &link.dst] {
            if !self.nodes.contains_key(end) {
                return Err(TopologyError::UnknownEndpoint {
                    link: link.id.clone(),
                    node: end.clone(),
                });
            }
        }
        if link.src == link.dst {
            return Err(TopologyError::SelfLoop(link.id));
        }
        if link.capacity == 0 {
            return Err(TopologyError::ZeroCapacity(link.id));
        }
        let out = self.out.get_mut(&link.src).expect("endpoint checked above");
        let pos = out.binary_search(&link.id).unwrap_or_else(|p| p);
        out.insert(pos, link.id.clone());
        self.links.insert(link.id.clone(), link);
        Ok(())
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn link(&self, id: &LinkId) -> Option<&Link> {
        self.links.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Minimum-hop path; among equal-length paths the one whose link-id
    /// sequence sorts first.
    pub fn compute_path(&self, origin: &NodeId, destination: &NodeId) -> Result<Path, TopologyError> {
        for n in [origin, destination] {
            if !self.nodes.contains_key(n) {
                return Err(TopologyError::UnknownNode(n.clone()));
            }
        }
        if origin == destination {
            return Err(TopologyError::SameEndpoints(origin.clone()));
        }

        // Hop distance to the destination over reversed links.
        let mut incoming: BTreeMap<&NodeId, Vec<&Link>> = BTreeMap::new();
        for link in self.links.values() {
            incoming.entry(&link.dst).or_default().push(link);
        }
        let mut dist: BTreeMap<&NodeId, usize> = BTreeMap::new();
        dist.insert(destination, 0);
        let mut queue = VecDeque::from([destination]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n];
            for link in incoming.get(n).into_iter().flatten() {
                if !dist.contains_key(&link.src) {
                    dist.insert(&link.src, d + 1);
                    queue.push_back(&link.src);
                }
            }
        }

        let Some(&total) = dist.get(origin) else {
            return Err(TopologyError::NoPath {
                from: origin.clone(),
                to: destination.clone(),
            });
        };

        // Greedy descent picking the smallest link id that stays on a shortest
        // path yields the lexicographically smallest sequence.
        let mut links = Vec::with_capacity(total);
        let mut at = origin;
        while at != destination {
            let here = dist[at];
            let next = self.out[at]
                .iter()
                .map(|id| &self.links[id])
                .find(|l| dist.get(&l.dst).is_some_and(|&d| d + 1 == here))
                .expect("a node at finite distance has a successor one hop closer");
            links.push(next.id.clone());
            at = &next.dst;
        }
        Ok(Path { links })
    }

    /// Checks that `path` is a simple chain of links from `origin` to `destination`.
    pub fn is_simple_path(&self, path: &Path, origin: &NodeId, destination: &NodeId) -> bool {
        let mut at = origin;
        let mut seen = vec![origin];
        for id in &path.links {
            let Some(link) = self.links.get(id) else {
                return false;
            };
            if &link.src != at || seen.contains(&&link.dst) {
                return false;
            }
            seen.push(&link.dst);
            at = &link.dst;
        }
        at == destination && !path.links.is_empty()
    }
}
