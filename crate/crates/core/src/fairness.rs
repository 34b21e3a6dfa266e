//! Max-min fair (water-filling) allocators.

use crate::scalar::Scalar;

/// Max-min fair split of `capacity` among `demands`.
///
/// Every claimant receives `min(demand, level)` where `level` is the highest
/// water level the capacity supports. Negative demands are treated as zero.
/// For integer scalars the indivisible remainder goes one unit at a time to the
/// unsaturated claimants in index order.
pub fn water_fill<T: Scalar>(demands: &[T], capacity: T) -> Vec<T> {
    let zero = T::zero();
    let mut grants = vec![zero; demands.len()];
    if demands.is_empty() || capacity <= zero {
        return grants;
    }
    let demand = |i: usize| demands[i].max_of(zero);

    let mut order: Vec<usize> = (0..demands.len()).collect();
    order.sort_by(|&a, &b| {
        demand(a)
            .partial_cmp(&demand(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut remaining = capacity;
    for (k, &i) in order.iter().enumerate() {
        let left = order.len() - k;
        let (share, extra) = T::split(remaining, left);
        if demand(i) <= share {
            grants[i] = demand(i);
            remaining = (remaining - demand(i)).max_of(zero);
            continue;
        }
        // Everyone from here on is constrained by the water level.
        let mut rest = order[k..].to_vec();
        rest.sort_unstable();
        for (n, &j) in rest.iter().enumerate() {
            grants[j] = if n < extra { share + T::one() } else { share };
        }
        break;
    }
    grants
}

/// Max-min fair allocation of integer rates to flows that each traverse a set
/// of resources (links), by progressive filling.
///
/// `paths[f]` lists resource indices used by flow `f`; `capacities[r]` is the
/// capacity of resource `r`. Flows with an empty path are bounded only by
/// their demand. The result never exceeds a demand and never oversubscribes a
/// resource.
pub fn network_water_fill(demands: &[u64], paths: &[Vec<usize>], capacities: &[u64]) -> Vec<u64> {
    assert_eq!(demands.len(), paths.len(), "one path per demand");
    let mut alloc = vec![0u64; demands.len()];
    let mut remaining = capacities.to_vec();
    let mut frozen: Vec<bool> = demands.iter().map(|&d| d == 0).collect();

    for (f, path) in paths.iter().enumerate() {
        if path.is_empty() && !frozen[f] {
            alloc[f] = demands[f];
            frozen[f] = true;
        }
        if path.iter().any(|&r| remaining[r] == 0) {
            frozen[f] = true;
        }
    }

    loop {
        let active: Vec<usize> = (0..demands.len()).filter(|&f| !frozen[f]).collect();
        if active.is_empty() {
            break;
        }
        let mut users = vec![0usize; remaining.len()];
        for &f in &active {
            for &r in &paths[f] {
                users[r] += 1;
            }
        }
        let mut increment = u64::MAX;
        for (r, &n) in users.iter().enumerate() {
            if n > 0 {
                increment = increment.min(remaining[r] / n as u64);
            }
        }
        for &f in &active {
            increment = increment.min(demands[f] - alloc[f]);
        }

        if increment == 0 {
            // Some resource has fewer units left than active users: hand out the
            // leftover units in flow order, then freeze everyone it touches.
            let starved: Vec<usize> = (0..remaining.len())
                .filter(|&r| users[r] > 0 && remaining[r] < users[r] as u64)
                .collect();
            for &f in &active {
                if paths[f].iter().all(|&r| remaining[r] > 0)
                    && alloc[f] < demands[f]
                    && paths[f].iter().any(|r| starved.contains(r))
                {
                    alloc[f] += 1;
                    for &r in &paths[f] {
                        remaining[r] -= 1;
                    }
                }
            }
            for &f in &active {
                if paths[f].iter().any(|r| starved.contains(r)) {
                    frozen[f] = true;
                }
            }
        } else {
            for &f in &active {
                alloc[f] += increment;
                for &r in &paths[f] {
                    remaining[r] -= increment;
                }
            }
        }

        for &f in &active {
            if alloc[f] >= demands[f] || paths[f].iter().any(|&r| remaining[r] == 0) {
                frozen[f] = true;
            }
        }
    }
    alloc
}
