//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use psiot_sdn::topology::{Link, Node, NodeKind};
use psiot_sdn::{LinkId, NodeId, Topology};

/// Strict priority by level, max-min inside a level, computed one unit at a
/// time: every unit goes to the unsatisfied claimant of the most important
/// level with the smallest allocation, lowest index first. Demands and the
/// budget are in whole units.
pub fn unit_fill(levels: &[u8], demands: &[u64], budget: u64) -> Vec<u64> {
    let mut alloc = vec![0u64; demands.len()];
    let mut left = budget;
    while left > 0 {
        let pick = (0..demands.len())
            .filter(|&i| alloc[i] < demands[i])
            .min_by_key(|&i| (levels[i], alloc[i], i));
        match pick {
            Some(i) => {
                alloc[i] += 1;
                left -= 1;
            }
            None => break,
        }
    }
    alloc
}

/// Max-min fair split of `capacity` among `demands`, one unit at a time.
pub fn unit_water_fill(demands: &[u64], capacity: u64) -> Vec<u64> {
    unit_fill(&vec![0; demands.len()], demands, capacity)
}

/// Every simple path from `from` to `to`, as link-id sequences.
pub fn all_simple_paths(links: &[(String, String, String)], from: &str, to: &str) -> Vec<Vec<String>> {
    fn walk(
        links: &[(String, String, String)],
        at: &str,
        to: &str,
        seen: &mut Vec<String>,
        path: &mut Vec<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        if at == to {
            out.push(path.clone());
            return;
        }
        for (id, src, dst) in links {
            if src == at && !seen.contains(dst) {
                seen.push(dst.clone());
                path.push(id.clone());
                walk(links, dst, to, seen, path, out);
                path.pop();
                seen.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(links, from, to, &mut vec![from.to_string()], &mut Vec::new(), &mut out);
    out
}

/// Fewest hops, then lexicographically smallest link-id sequence.
pub fn best_path(links: &[(String, String, String)], from: &str, to: &str) -> Option<Vec<String>> {
    all_simple_paths(links, from, to)
        .into_iter()
        .min_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)))
}

pub fn switch_graph(nodes: usize, links: &[(String, String, String)]) -> Topology {
    let mut t = Topology::new();
    for n in 0..nodes {
        t.add_node(Node::new(format!("n{n}"), NodeKind::Switch)).unwrap();
    }
    for (id, a, b) in links {
        t.add_link(Link::new(id.clone(), a.clone(), b.clone(), 1_000)).unwrap();
    }
    t
}

/// Which path links each node id appears on, for readable failures.
pub fn endpoints(t: &Topology, path: &[LinkId]) -> Vec<(NodeId, NodeId)> {
    path.iter()
        .map(|l| {
            let l = t.link(l).unwrap();
            (l.src.clone(), l.dst.clone())
        })
        .collect()
}

/// Per-class sums of a set of (class index, rate) reservations.
pub fn column_sums(entries: &BTreeMap<u64, (usize, usize, u64)>) -> ([u64; 3], [u64; 3]) {
    let mut allocated = [0; 3];
    let mut borrowed = [0; 3];
    for &(class, native, rate) in entries.values() {
        if class == native {
            allocated[class] += rate;
        } else {
            borrowed[class] += rate;
        }
    }
    (allocated, borrowed)
}
