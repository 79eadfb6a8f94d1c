//! Data-utility measures between an original and an anonymized log.
//!
//! Both measures are transport problems between variant frequencies with
//! Levenshtein ground costs, solved exactly by successive shortest paths.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::log::{SimpleEventLog, TraceVariant};

/// Edit distance counting insertions, deletions and substitutions.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(a, b) / max(|a|, |b|)`, defined as 0 for two empty variants.
pub fn normalized_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

/// Variants with aligned masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantDistribution {
    pub variants: Vec<TraceVariant>,
    pub mass: Vec<f64>,
}

impl VariantDistribution {
    pub fn absolute(log: &SimpleEventLog) -> Self {
        let (variants, mass) = log.iter().map(|(v, c)| (v.clone(), c as f64)).unzip();
        Self { variants, mass }
    }

    pub fn relative(log: &SimpleEventLog) -> Self {
        let total = log.n_cases() as f64;
        let (variants, mass) = log.iter().map(|(v, c)| (v.clone(), c as f64 / total)).unzip();
        Self { variants, mass }
    }
}

/// Bipartite transport network: integer supplies on the left, integer
/// demands on the right, one arc with a non-negative cost for every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    pub supplies: Vec<i64>,
    pub demands: Vec<i64>,
    /// `costs[i][j]` is the unit cost from supply `i` to demand `j`.
    pub costs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSolution {
    /// `flows[i][j]` units shipped from supply `i` to demand `j`.
    pub flows: Vec<Vec<i64>>,
    pub cost: f64,
}

struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

/// Residual graph for successive shortest paths.
struct Residual {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl Residual {
    fn new(n: usize) -> Self {
        Self { edges: Vec::new(), adj: vec![Vec::new(); n] }
    }

    fn add(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge { to, cap, cost });
        self.adj[from].push(id);
        self.edges.push(Edge { to: from, cap: 0, cost: -cost });
        self.adj[to].push(id + 1);
        id
    }
}

/// Exact min-cost flow of a balanced transport network.
pub fn min_cost_flow(network: &FlowNetwork) -> Result<FlowSolution> {
    let (ns, nd) = (network.supplies.len(), network.demands.len());
    let supply: i64 = network.supplies.iter().sum();
    let demand: i64 = network.demands.iter().sum();
    if supply != demand {
        return Err(Error::Unbalanced { supply, demand });
    }
    if network.supplies.iter().chain(&network.demands).any(|&x| x < 0) {
        return Err(Error::InvalidParameter("negative supply or demand".into()));
    }
    if network.costs.len() != ns || network.costs.iter().any(|row| row.len() != nd) {
        return Err(Error::Dimension("cost matrix does not match supplies x demands".into()));
    }
    if network.costs.iter().flatten().any(|&c| !(c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidParameter("arc costs must be finite and non-negative".into()));
    }

    // nodes: source, supplies, demands, sink
    let source = 0;
    let sink = 1 + ns + nd;
    let n = sink + 1;
    let mut g = Residual::new(n);
    for (i, &s) in network.supplies.iter().enumerate() {
        g.add(source, 1 + i, s, 0.0);
    }
    let arc_ids: Vec<Vec<usize>> = (0..ns)
        .map(|i| (0..nd).map(|j| g.add(1 + i, 1 + ns + j, supply, network.costs[i][j])).collect())
        .collect();
    for (j, &d) in network.demands.iter().enumerate() {
        g.add(1 + ns + j, sink, d, 0.0);
    }

    let mut potential = vec![0.0f64; n];
    let mut remaining = supply;
    let mut total_cost = 0.0;
    while remaining > 0 {
        // dense Dijkstra on reduced costs
        let mut dist = vec![f64::INFINITY; n];
        let mut via = vec![usize::MAX; n];
        let mut done = vec![false; n];
        dist[source] = 0.0;
        loop {
            let mut u = usize::MAX;
            for v in 0..n {
                if !done[v] && dist[v].is_finite() && (u == usize::MAX || dist[v] < dist[u]) {
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            for &e in &g.adj[u] {
                let edge = &g.edges[e];
                if edge.cap <= 0 || done[edge.to] {
                    continue;
                }
                let reduced = (edge.cost + potential[u] - potential[edge.to]).max(0.0);
                let nd = dist[u] + reduced;
                if nd < dist[edge.to] {
                    dist[edge.to] = nd;
                    via[edge.to] = e;
                }
            }
        }
        if !dist[sink].is_finite() {
            return Err(Error::InvalidParameter("no augmenting path in balanced network".into()));
        }
        for v in 0..n {
            if dist[v].is_finite() {
                potential[v] += dist[v];
            }
        }
        let mut push = remaining;
        let mut v = sink;
        while v != source {
            let e = via[v];
            push = push.min(g.edges[e].cap);
            v = g.edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != source {
            let e = via[v];
            g.edges[e].cap -= push;
            g.edges[e ^ 1].cap += push;
            total_cost += push as f64 * g.edges[e].cost;
            v = g.edges[e ^ 1].to;
        }
        remaining -= push;
    }

    let flows = arc_ids
        .iter()
        .map(|row| row.iter().map(|&e| g.edges[e ^ 1].cap).collect())
        .collect();
    Ok(FlowSolution { flows, cost: total_cost })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `1 - EMD` between the relative variant distributions, with normalized
/// Levenshtein ground distance.
pub fn relative_log_similarity(original: &SimpleEventLog, anonymized: &SimpleEventLog) -> Result<f64> {
    Ok(1.0 - earth_movers_distance(original, anonymized)?)
}

/// Exact EMD between relative frequencies. Masses are brought to the common
/// denominator `lcm(|L1|, |L2|)` so the transport stays integral.
pub fn earth_movers_distance(a: &SimpleEventLog, b: &SimpleEventLog) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyLog);
    }
    let (na, nb) = (a.n_cases(), b.n_cases());
    let g = gcd(na, nb);
    let (scale_a, scale_b) = (nb / g, na / g);
    let total = (na / g) * nb;
    let network = FlowNetwork {
        supplies: a.iter().map(|(_, c)| (c * scale_a) as i64).collect(),
        demands: b.iter().map(|(_, c)| (c * scale_b) as i64).collect(),
        costs: a
            .iter()
            .map(|(va, _)| {
                b.iter()
                    .map(|(vb, _)| normalized_levenshtein(va.activities(), vb.activities()))
                    .collect()
            })
            .collect(),
    };
    let solution = min_cost_flow(&network)?;
    Ok((solution.cost / total as f64).clamp(0.0, 1.0))
}

/// Minimum total Levenshtein operations turning the anonymized log's
/// cases into the original's. A size difference is bridged by an empty
/// dummy variant, so every surplus or missing case costs its full length.
pub fn absolute_log_difference(original: &SimpleEventLog, anonymized: &SimpleEventLog) -> Result<f64> {
    if original.is_empty() || anonymized.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut sources: Vec<(TraceVariant, i64)> = anonymized.iter().map(|(v, c)| (v.clone(), c as i64)).collect();
    let mut sinks: Vec<(TraceVariant, i64)> = original.iter().map(|(v, c)| (v.clone(), c as i64)).collect();
    let gap = anonymized.n_cases() as i64 - original.n_cases() as i64;
    match gap.cmp(&0) {
        Ordering::Greater => sinks.push((TraceVariant::empty(), gap)),
        Ordering::Less => sources.push((TraceVariant::empty(), -gap)),
        Ordering::Equal => {}
    }
    let network = FlowNetwork {
        supplies: sources.iter().map(|s| s.1).collect(),
        demands: sinks.iter().map(|s| s.1).collect(),
        costs: sources
            .iter()
            .map(|(vs, _)| {
                sinks
                    .iter()
                    .map(|(vd, _)| levenshtein(vs.activities(), vd.activities()) as f64)
                    .collect()
            })
            .collect(),
    };
    Ok(min_cost_flow(&network)?.cost)
}

/// Both data-utility measures of an anonymized log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub relative_log_similarity: f64,
    pub absolute_log_difference: f64,
}

pub fn evaluate(original: &SimpleEventLog, anonymized: &SimpleEventLog) -> Result<UtilityReport> {
    Ok(UtilityReport {
        relative_log_similarity: relative_log_similarity(original, anonymized)?,
        absolute_log_difference: absolute_log_difference(original, anonymized)?,
    })
}
