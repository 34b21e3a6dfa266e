mod common;

use std::collections::BTreeMap;

use num_rational::Rational64;
use proptest::prelude::*;

use psiot_sdn::bam::{BandwidthConstraint, Fraction, LinkBamState, ReservationId, TrafficClassId};
use psiot_sdn::controller::Controller;
use psiot_sdn::fairness::{network_water_fill, water_fill};
use psiot_sdn::netsim::{FlowDemand, FlowKey, Netsim, Route, SourceId, TrafficSource};
use psiot_sdn::orchestrator::FlowGroupSpec;
use psiot_sdn::topology::{Link, Node, NodeKind};
use psiot_sdn::{compute_rate_plan, GroupKey, LinkId, NodeId, PlanEntry, QosLevel, TickLength, Topology};

use common::{best_path, column_sums, switch_graph, unit_fill, unit_water_fill};

fn graph() -> impl Strategy<Value = (usize, Vec<(String, String, String)>)> {
    (2usize..=8).prop_flat_map(|n| {
        let edge = (0..n, 0..n, 0u8..4);
        (Just(n), prop::collection::vec(edge, 0..20)).prop_map(|(n, edges)| {
            let mut links = Vec::new();
            for (i, (a, b, tag)) in edges.into_iter().enumerate() {
                if a != b {
                    // Tags make link ids compare out of insertion order.
                    links.push((format!("{tag}-{i:02}"), format!("n{a}"), format!("n{b}")));
                }
            }
            (n, links)
        })
    })
}

proptest! {
    #[test]
    fn path_is_shortest_then_lexicographic((n, links) in graph(), from in 0usize..8, to in 0usize..8) {
        prop_assume!(from < n && to < n && from != to);
        let t = switch_graph(n, &links);
        let (a, b) = (format!("n{from}"), format!("n{to}"));
        let got = t.compute_path(&NodeId::new(a.clone()), &NodeId::new(b.clone()));
        match best_path(&links, &a, &b) {
            None => prop_assert!(got.is_err()),
            Some(expect) => {
                let path = got.unwrap();
                let ids: Vec<String> = path.links.iter().map(|l| l.as_str().to_string()).collect();
                prop_assert_eq!(ids, expect);
                prop_assert!(t.is_simple_path(&path, &NodeId::new(a), &NodeId::new(b)));
            }
        }
    }

    #[test]
    fn ledger_never_exceeds_constraints(
        fr in (1u32..=6, 1u32..=6, 1u32..=6),
        capacity in 1u64..10_000,
        ops in prop::collection::vec((0u8..4, 0usize..3, 0usize..3, 1u64..4_000, any::<prop::sample::Index>()), 1..60),
    ) {
        let total = fr.0 + fr.1 + fr.2;
        let ppm = [fr.0, fr.1, fr.2].map(|f| f * 1_000_000 / total);
        let bcs: Vec<BandwidthConstraint> = TrafficClassId::ALL
            .iter()
            .zip(ppm)
            .map(|(&class, p)| BandwidthConstraint { class, fraction: Fraction::from_ppm(p) })
            .collect();
        let mut ledger = LinkBamState::configure("l".into(), capacity, &bcs).unwrap();
        let limits = ledger.limits();
        prop_assert_eq!(limits, ppm.map(|p| capacity * p as u64 / 1_000_000));
        let mut shadow: BTreeMap<u64, (usize, usize, u64)> = BTreeMap::new();
        let mut ids: Vec<ReservationId> = Vec::new();
        let mut next = 0u64;
        for (op, c1, c2, rate, pick) in ops {
            let (class, native) = (TrafficClassId::ALL[c1], TrafficClassId::ALL[c2]);
            match op {
                0 => {
                    if let Ok(r) = ledger.admit_into(native, class, rate) {
                        ids.push(r.id);
                        shadow.insert(next, (c1, c2, rate));
                    }
                    next += 1;
                }
                _ if ids.is_empty() => {}
                1 => {
                    let i = pick.index(ids.len());
                    let r = ledger.release(ids.remove(i)).unwrap();
                    let key = *shadow.iter().find(|(_, v)| **v == (r.class.index(), r.native_class.index(), r.rate)).unwrap().0;
                    shadow.remove(&key);
                }
                2 => {
                    let id = ids[pick.index(ids.len())];
                    let before = ledger.reservation(id).unwrap().clone();
                    if let Ok(r) = ledger.reassign(id, class) {
                        let key = *shadow.iter().find(|(_, v)| **v == (before.class.index(), before.native_class.index(), before.rate)).unwrap().0;
                        shadow.insert(key, (r.class.index(), r.native_class.index(), r.rate));
                    }
                }
                _ => {
                    let id = ids[pick.index(ids.len())];
                    let before = ledger.reservation(id).unwrap().clone();
                    if let Ok(r) = ledger.resize(id, rate) {
                        let key = *shadow.iter().find(|(_, v)| **v == (before.class.index(), before.native_class.index(), before.rate)).unwrap().0;
                        shadow.insert(key, (r.class.index(), r.native_class.index(), r.rate));
                    }
                }
            }
            let (allocated, borrowed) = column_sums(&shadow);
            prop_assert_eq!(ledger.allocated(), allocated);
            prop_assert_eq!(ledger.borrowed(), borrowed);
            for c in 0..3 {
                prop_assert!(allocated[c] + borrowed[c] <= limits[c]);
            }
            prop_assert!(allocated.iter().sum::<u64>() + borrowed.iter().sum::<u64>() <= capacity);
            prop_assert!(ledger.check_invariants().is_ok());
        }
    }

    #[test]
    fn admit_then_release_is_identity(
        capacity in 1u64..1_000_000,
        pre in prop::collection::vec((0usize..3, 1u64..200_000), 0..8),
        class in 0usize..3,
        native in 0usize..3,
        rate in 1u64..500_000,
    ) {
        let mut ledger = LinkBamState::configure("l".into(), capacity, &BandwidthConstraint::from_fractions([0.5, 0.3, 0.2])).unwrap();
        for (c, r) in pre {
            let _ = ledger.admit(TrafficClassId::ALL[c], r);
        }
        let snapshot = (ledger.allocated(), ledger.borrowed(), ledger.reservations().cloned().collect::<Vec<_>>());
        if let Ok(r) = ledger.admit_into(TrafficClassId::ALL[native], TrafficClassId::ALL[class], rate) {
            ledger.release(r.id).unwrap();
        }
        prop_assert_eq!(snapshot, (ledger.allocated(), ledger.borrowed(), ledger.reservations().cloned().collect::<Vec<_>>()));
    }

    #[test]
    fn rate_plan_matches_unit_filling(
        entries in prop::collection::vec((0u8..3, 0u64..100), 0..7),
        budget in 0u64..400,
    ) {
        // Shares at one level have denominators dividing lcm(1..=6) = 60.
        let levels: Vec<u8> = entries.iter().map(|e| e.0).collect();
        let scaled: Vec<u64> = entries.iter().map(|e| e.1 * 60).collect();
        let oracle = unit_fill(&levels, &scaled, budget * 60);

        let exact: Vec<PlanEntry<Rational64>> = entries
            .iter()
            .map(|&(l, d)| PlanEntry { level: QosLevel::new(l).unwrap(), demand: Rational64::from_integer(d as i64) })
            .collect();
        let got = compute_rate_plan(&exact, Rational64::from_integer(budget as i64));
        let expect: Vec<Rational64> = oracle.iter().map(|&u| Rational64::new(u as i64, 60)).collect();
        prop_assert_eq!(got, expect);

        let ints: Vec<PlanEntry<u64>> = entries.iter().map(|&(l, d)| PlanEntry { level: QosLevel::new(l).unwrap(), demand: d }).collect();
        prop_assert_eq!(compute_rate_plan(&ints, budget), unit_fill(&levels, &entries.iter().map(|e| e.1).collect::<Vec<_>>(), budget));
    }

    #[test]
    fn rate_plan_scales_linearly(
        entries in prop::collection::vec((0u8..3, 0i64..100), 0..7),
        budget in 0i64..400,
        k in 1i64..50,
    ) {
        let plan = |scale: i64| {
            let e: Vec<PlanEntry<Rational64>> = entries
                .iter()
                .map(|&(l, d)| PlanEntry { level: QosLevel::new(l).unwrap(), demand: Rational64::from_integer(d * scale) })
                .collect();
            compute_rate_plan(&e, Rational64::from_integer(budget * scale))
        };
        let scaled: Vec<Rational64> = plan(1).into_iter().map(|g| g * k).collect();
        prop_assert_eq!(plan(k), scaled);
    }

    #[test]
    fn water_fill_matches_unit_oracle(demands in prop::collection::vec(0u64..60, 0..7), capacity in 0u64..300) {
        prop_assert_eq!(water_fill(&demands, capacity), unit_water_fill(&demands, capacity));
    }

    #[test]
    fn network_fill_is_feasible_and_max_min(
        demands in prop::collection::vec(0u64..100, 1..6),
        raw_paths in prop::collection::vec(prop::collection::btree_set(0usize..4, 1..4), 6),
        capacities in prop::collection::vec(0u64..150, 4),
    ) {
        let paths: Vec<Vec<usize>> = raw_paths.into_iter().take(demands.len()).map(|s| s.into_iter().collect()).collect();
        let alloc = network_water_fill(&demands, &paths, &capacities);
        let mut load = [0u64; 4];
        for (f, p) in paths.iter().enumerate() {
            prop_assert!(alloc[f] <= demands[f]);
            for &r in p {
                load[r] += alloc[f];
            }
        }
        for r in 0..4 {
            prop_assert!(load[r] <= capacities[r]);
        }
        // Every unsatisfied flow crosses a full link where nobody gets more
        // than one unit above it.
        for (f, p) in paths.iter().enumerate() {
            if alloc[f] < demands[f] {
                let blocked = p.iter().any(|&r| {
                    load[r] == capacities[r]
                        && paths.iter().enumerate().filter(|(_, q)| q.contains(&r)).all(|(g, _)| alloc[g] <= alloc[f] + 1)
                });
                prop_assert!(blocked, "flow {} unsatisfied without a bottleneck: {:?}", f, alloc);
            }
        }
    }

    #[test]
    fn queue_split_is_max_min(offers in prop::collection::vec(1u64..80, 1..7), cap in 1u64..200) {
        let mut t = Topology::new();
        t.add_node(Node::new("a", NodeKind::Switch)).unwrap();
        t.add_node(Node::new("b", NodeKind::Switch)).unwrap();
        t.add_link(Link::new("ab", "a", "b", 1_000)).unwrap();
        let mut net = Netsim::new(&t);
        let link = LinkId::new("ab");
        net.set_queue_caps(&link, [cap, 0, 0]).unwrap();
        let keys: Vec<FlowKey> = (0..offers.len()).map(|i| FlowKey::Source(SourceId::new(format!("s{i}")))).collect();
        net.set_routes(keys.iter().map(|k| (k.clone(), Route::single_class(vec![link.clone()], TrafficClassId::TC0))).collect());
        let demands: Vec<FlowDemand> = keys.iter().zip(&offers).map(|(k, &rate)| FlowDemand { key: k.clone(), rate }).collect();
        net.offer(&demands).unwrap();
        let report = net.serve(0, TickLength::default());
        let got: Vec<u64> = keys.iter().map(|k| report.flows[k].delivered_rate).collect();
        prop_assert_eq!(got, unit_water_fill(&offers, cap));
        let q = report.links[&link].queues[0];
        prop_assert!(q.served <= q.rate_cap && q.served <= q.offered);
    }
}

// Controller properties over a small two-switch network with three
// aggregators, two consumers and two background hosts.

fn net_topology() -> Topology {
    let mut t = Topology::new();
    for (n, k) in [
        ("s1", NodeKind::Switch),
        ("s2", NodeKind::Switch),
        ("a1", NodeKind::Aggregator),
        ("a2", NodeKind::Aggregator),
        ("a3", NodeKind::Aggregator),
        ("c1", NodeKind::Consumer),
        ("c2", NodeKind::Consumer),
        ("h1", NodeKind::TrafficHost),
        ("h2", NodeKind::TrafficHost),
    ] {
        t.add_node(Node::new(n, k)).unwrap();
    }
    for (id, a, b, cap) in [
        ("a1-s1", "a1", "s1", 400),
        ("a2-s1", "a2", "s1", 400),
        ("a3-s2", "a3", "s2", 400),
        ("h1-s1", "h1", "s1", 400),
        ("s1-s2", "s1", "s2", 100),
        ("s2-c1", "s2", "c1", 400),
        ("s2-c2", "s2", "c2", 80),
        ("s2-h2", "s2", "h2", 400),
    ] {
        t.add_link(Link::new(id, a, b, cap)).unwrap();
    }
    t
}

#[derive(Debug, Clone)]
enum Op {
    Setup(usize, usize, u64),
    Demand(usize, usize, u64),
    Teardown(usize, usize),
    Start(usize, u64),
    Stop,
    Rebalance,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..3, 0usize..2, 0u64..200).prop_map(|(a, c, d)| Op::Setup(a, c, d)),
        (0usize..3, 0usize..2, 0u64..200).prop_map(|(a, c, d)| Op::Demand(a, c, d)),
        (0usize..3, 0usize..2).prop_map(|(a, c)| Op::Teardown(a, c)),
        (0usize..3, 1u64..60).prop_map(|(c, r)| Op::Start(c, r)),
        Just(Op::Stop),
        Just(Op::Rebalance),
    ]
}

fn group(a: usize, c: usize, d: u64) -> FlowGroupSpec {
    FlowGroupSpec::new(&format!("a{}", a + 1), &format!("c{}", c + 1), d)
}

fn controller(integrated: bool) -> Controller {
    Controller::new(
        net_topology(),
        &BandwidthConstraint::from_fractions([0.5, 0.3, 0.2]),
        &BTreeMap::new(),
        integrated,
    )
    .unwrap()
}

/// Applies `op`, ignoring errors that the sequence itself provokes
/// (duplicate setup, unknown teardown and so on).
fn apply(c: &mut Controller, op: &Op) {
    match *op {
        Op::Setup(a, k, d) => {
            let _ = c.setup_flow(&group(a, k, d));
        }
        Op::Demand(a, k, d) => {
            let _ = c.update_demand(&group(a, k, d));
        }
        Op::Teardown(a, k) => {
            let _ = c.teardown_flow(&group(a, k, 0).key);
        }
        Op::Start(class, rate) => {
            let _ = c.start_source(TrafficSource {
                id: "bg".into(),
                origin: "h1".into(),
                destination: "h2".into(),
                class: TrafficClassId::ALL[class],
                rate,
                active: true,
            });
        }
        Op::Stop => {
            let _ = c.stop_source(&"bg".into());
        }
        Op::Rebalance => {
            c.rebalance(0).unwrap();
        }
    }
}

fn keys() -> Vec<GroupKey> {
    (0..3).flat_map(|a| (0..2).map(move |k| group(a, k, 0).key)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn controller_state_stays_consistent(ops in prop::collection::vec(op(), 1..25), integrated in any::<bool>()) {
        let mut c = controller(integrated);
        for op in &ops {
            apply(&mut c, op);
            prop_assert!(c.check_invariants().is_ok(), "{:?}", c.check_invariants());
            for key in keys() {
                let Some(flow) = c.flow(&key) else { continue };
                // Budget is the bottleneck of the per-link reservations.
                let per_link: Vec<u64> = flow.path.links.iter().map(|l| {
                    c.ledger(l).unwrap().reservations()
                        .filter(|r| flow.reservations[l].contains(&Some(r.id)))
                        .map(|r| r.rate)
                        .sum()
                }).collect();
                prop_assert_eq!(c.budget(&key), per_link.iter().copied().min().unwrap_or(0));
                prop_assert!(c.budget(&key) <= flow.group.demand);
            }
            if !integrated {
                prop_assert!(c.ledgers().all(|l| l.borrowed() == [0, 0, 0]));
            }
        }
    }

    #[test]
    fn rebalance_is_idempotent(ops in prop::collection::vec(op(), 1..25), integrated in any::<bool>()) {
        let mut c = controller(integrated);
        for op in &ops {
            apply(&mut c, op);
        }
        c.rebalance(1).unwrap();
        let budgets = c.budgets();
        let ledgers: Vec<_> = c.ledgers().map(|l| (l.allocated(), l.borrowed())).collect();
        prop_assert!(c.rebalance(2).unwrap().is_empty());
        prop_assert_eq!(budgets, c.budgets());
        prop_assert_eq!(ledgers, c.ledgers().map(|l| (l.allocated(), l.borrowed())).collect::<Vec<_>>());
    }

    #[test]
    fn integration_only_adds_capacity(ops in prop::collection::vec(op(), 1..25)) {
        let mut with = controller(true);
        let mut without = controller(false);
        for op in &ops {
            apply(&mut with, op);
            apply(&mut without, op);
        }
        with.rebalance(1).unwrap();
        without.rebalance(1).unwrap();
        for key in keys() {
            prop_assert!(with.budget(&key) >= without.budget(&key), "{}: {} < {}", key, with.budget(&key), without.budget(&key));
        }
    }

    #[test]
    fn background_demand_is_never_displaced(ops in prop::collection::vec(op(), 1..25)) {
        let mut c = controller(true);
        for op in &ops {
            apply(&mut c, op);
        }
        c.rebalance(1).unwrap();
        let sample = c.monitor(1);
        for link in &sample.links {
            for cls in &link.classes[1..] {
                if cls.borrowed > 0 {
                    prop_assert!(cls.native_demand + cls.borrowed <= cls.limit, "{:?}", link);
                }
            }
        }
    }
}
