//! Brute-force oracles shared by the integration, property and acceptance
//! targets. None of them call into the library's algorithms.

#![allow(dead_code)]

/// Minimum number of bins for `items` under `capacity`, by exhaustive
/// search over bin assignments (items placed largest first, a new bin only
/// ever opened once per level).
pub fn opt_bin_count(items: &[u64], capacity: u64) -> usize {
    let mut sorted = items.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    assert!(sorted.iter().all(|&x| x <= capacity && x > 0));
    let mut best = sorted.len();
    let mut loads = Vec::new();
    search_bins(&sorted, 0, capacity, &mut loads, &mut best);
    best
}

fn search_bins(items: &[u64], i: usize, cap: u64, loads: &mut Vec<u64>, best: &mut usize) {
    if loads.len() >= *best {
        return;
    }
    if i == items.len() {
        *best = loads.len();
        return;
    }
    let mut tried = Vec::new();
    for b in 0..loads.len() {
        if loads[b] + items[i] <= cap && !tried.contains(&loads[b]) {
            tried.push(loads[b]);
            loads[b] += items[i];
            search_bins(items, i + 1, cap, loads, best);
            loads[b] -= items[i];
        }
    }
    loads.push(items[i]);
    search_bins(items, i + 1, cap, loads, best);
    loads.pop();
}

/// Smallest achievable maximum segment sum over every split of `costs` into
/// `parts` non-empty contiguous segments. Segments are summed left to right.
pub fn opt_partition_max(costs: &[f64], parts: usize) -> f64 {
    assert!(parts >= 1 && parts <= costs.len());
    let mut best = f64::INFINITY;
    let mut cuts = Vec::with_capacity(parts + 1);
    cuts.push(0);
    enumerate_cuts(costs, parts, &mut cuts, &mut best);
    best
}

fn enumerate_cuts(costs: &[f64], parts: usize, cuts: &mut Vec<usize>, best: &mut f64) {
    let n = costs.len();
    if cuts.len() == parts {
        cuts.push(n);
        let worst = cuts.windows(2).map(|w| seg_sum(costs, w[0], w[1])).fold(0.0, f64::max);
        if worst < *best {
            *best = worst;
        }
        cuts.pop();
        return;
    }
    let last = *cuts.last().unwrap();
    let remaining = parts - cuts.len();
    for c in last + 1..=n - remaining {
        cuts.push(c);
        enumerate_cuts(costs, parts, cuts, best);
        cuts.pop();
    }
}

pub fn seg_sum(costs: &[f64], a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for &c in &costs[a..b] {
        s += c;
    }
    s
}

/// Makespan of non-interleaved 1F1B as the longest path through its
/// explicit dependency graph. Nodes are (stage, F|B, microbatch) with their
/// duration as weight; edges are the data dependencies (plus `latency` when
/// crossing stages) and the fixed per-stage issue order.
pub fn dag_makespan(forward: &[Vec<f64>], backward: &[Vec<f64>], latency: f64) -> f64 {
    let pp = forward.len();
    let m = forward[0].len();
    let id = |s: usize, back: bool, i: usize| (s * 2 + back as usize) * m + i;
    let n = pp * 2 * m;
    let mut weight = vec![0.0; n];
    let mut edges: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for s in 0..pp {
        for i in 0..m {
            weight[id(s, false, i)] = forward[s][i];
            weight[id(s, true, i)] = backward[s][i];
            if s > 0 {
                edges[id(s - 1, false, i)].push((id(s, false, i), latency));
            }
            if s + 1 < pp {
                edges[id(s + 1, true, i)].push((id(s, true, i), latency));
            }
            edges[id(s, false, i)].push((id(s, true, i), 0.0));
        }
        // Issue order on this stage: warmup forwards, then alternate.
        let warm = (pp - s - 1).min(m);
        let mut order: Vec<usize> = (0..warm).map(|i| id(s, false, i)).collect();
        let (mut f, mut b) = (warm, 0);
        while b < m {
            if f < m {
                order.push(id(s, false, f));
                f += 1;
            }
            order.push(id(s, true, b));
            b += 1;
        }
        for w in order.windows(2) {
            edges[w[0]].push((w[1], 0.0));
        }
    }

    // Kahn's algorithm, relaxing earliest finish times.
    let mut indeg = vec![0usize; n];
    for outs in &edges {
        for &(v, _) in outs {
            indeg[v] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut start = vec![0.0f64; n];
    let mut done = 0;
    let mut makespan = 0.0f64;
    while let Some(u) = ready.pop() {
        done += 1;
        let finish = start[u] + weight[u];
        makespan = makespan.max(finish);
        for &(v, lat) in &edges[u] {
            start[v] = start[v].max(finish + lat);
            indeg[v] -= 1;
            if indeg[v] == 0 {
                ready.push(v);
            }
        }
    }
    assert_eq!(done, n, "dependency graph has a cycle");
    makespan
}

/// Exhaustive (S, P_e, E, k) search; returns the smallest achievable larger
/// relative error against the two targets.
pub fn brute_param_error(
    shared: &[u64],
    per_expert: &[u64],
    experts: &[u64],
    top_k: &[u64],
    total: f64,
    active: f64,
) -> f64 {
    let mut best = f64::INFINITY;
    for &e in experts {
        for &k in top_k {
            if k >= e {
                continue;
            }
            for &p in per_expert {
                for &s in shared {
                    let t = (s + e * p) as f64;
                    let a = (s + k * p) as f64;
                    let err = ((t - total) / total).abs().max(((a - active) / active).abs());
                    best = best.min(err);
                }
            }
        }
    }
    best
}
