//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use dpgen::log::{SimpleEventLog, TraceVariant};
use dpgen::metrics::levenshtein;
use dpgen::nn::{example_losses, per_example_gradients, Activation, DenseNetwork, Loss};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `D_alpha(P || Q)` with `P = (1-q) N(0, phi^2) + q N(1, phi^2)` and
/// `Q = N(0, phi^2)`, integrated by the trapezoid rule in log space.
pub fn quadrature_rdp(q: f64, phi: f64, alpha: f64) -> f64 {
    let lo = -14.0 * phi;
    let hi = alpha.max(1.0) + 14.0 * phi;
    let h = phi / 400.0;
    let n = ((hi - lo) / h).ceil() as usize;
    let log_norm = -(phi * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let terms: Vec<f64> = (0..=n)
        .map(|i| {
            let x = lo + i as f64 * h;
            let log_q = log_norm - x * x / (2.0 * phi * phi);
            // log(P/Q) = log((1-q) + q exp((2x-1)/(2 phi^2)))
            let shift = (2.0 * x - 1.0) / (2.0 * phi * phi);
            let a = (1.0 - q).ln();
            let b = q.ln() + shift;
            let log_ratio = a.max(b) + (-(a - b).abs()).exp().ln_1p();
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            log_q + alpha * log_ratio + (w * h).ln()
        })
        .collect();
    log_sum_exp(&terms) / (alpha - 1.0)
}

/// Random dense network with at most `max_params` parameters and smooth
/// or piecewise-linear activations.
pub fn random_network<R: Rng>(rng: &mut R, max_params: usize) -> (DenseNetwork, Loss) {
    let hidden_choices = [Activation::Tanh, Activation::Sigmoid, Activation::Relu, Activation::Linear];
    loop {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=4)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=4));
        }
        let params: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params > max_params {
            continue;
        }
        let hidden = hidden_choices[rng.random_range(0..hidden_choices.len())];
        let (output, loss) = match rng.random_range(0..3) {
            0 => (Activation::Linear, Loss::Mse),
            1 => (Activation::Sigmoid, Loss::BinaryCrossEntropy),
            _ => (Activation::Tanh, Loss::Mse),
        };
        let net = DenseNetwork::new(&sizes, hidden, output, rng).unwrap();
        return (net, loss);
    }
}

/// Largest per-example relative error between analytic gradients and
/// central differences with step `h`.
pub fn finite_difference_error(net: &DenseNetwork, loss: Loss, x: &Array2<f64>, y: &Array2<f64>, h: f64) -> f64 {
    let analytic = per_example_gradients(net, loss, x.view(), y.view()).unwrap();
    let base = net.parameters();
    let mut worst: f64 = 0.0;
    for i in 0..x.nrows() {
        let xi = x.slice(ndarray::s![i..i + 1, ..]).to_owned();
        let yi = y.slice(ndarray::s![i..i + 1, ..]).to_owned();
        let mut numeric = vec![0.0; base.len()];
        for (p, slot) in numeric.iter_mut().enumerate() {
            let mut probe = net.clone();
            let mut theta = base.clone();
            theta[p] = base[p] + h;
            probe.set_parameters(&theta).unwrap();
            let up = example_losses(&probe, loss, xi.view(), yi.view()).unwrap()[0];
            theta[p] = base[p] - h;
            probe.set_parameters(&theta).unwrap();
            let down = example_losses(&probe, loss, xi.view(), yi.view()).unwrap()[0];
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic.example(i);
        let diff: f64 = a.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt() + numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Random log with at most `max_variants` distinct variants and
/// `1..=max_cases` cases over a three-letter alphabet.
pub fn random_small_log<R: Rng>(rng: &mut R, max_variants: usize, max_cases: u64) -> SimpleEventLog {
    let cases = rng.random_range(1..=max_cases);
    let variants = rng.random_range(1..=max_variants.min(cases as usize));
    let pool: Vec<TraceVariant> = (0..variants)
        .map(|_| {
            let len = rng.random_range(1..=4);
            TraceVariant::new((0..len).map(|_| ["a", "b", "c"][rng.random_range(0..3)]))
        })
        .collect();
    let mut log = SimpleEventLog::new();
    // every pooled variant gets a case, the rest are spread at random
    for v in &pool {
        log.add(v.clone(), 1);
    }
    for _ in variants as u64..cases {
        log.add(pool[rng.random_range(0..pool.len())].clone(), 1);
    }
    log
}

fn cost(a: &TraceVariant, b: &TraceVariant) -> usize {
    levenshtein(a.activities(), b.activities())
}

/// Minimum total edit cost over all case-to-case matchings after padding
/// the smaller log with empty traces: exhaustive over permutations.
pub fn brute_force_absolute(original: &SimpleEventLog, anonymized: &SimpleEventLog) -> f64 {
    let expand = |log: &SimpleEventLog| -> Vec<TraceVariant> {
        log.iter().flat_map(|(v, c)| std::iter::repeat_n(v.clone(), c as usize)).collect()
    };
    let (mut a, mut b) = (expand(original), expand(anonymized));
    let n = a.len().max(b.len());
    a.resize(n, TraceVariant::empty());
    b.resize(n, TraceVariant::empty());
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = usize::MAX;
    permute(&mut perm, 0, &mut |p| {
        best = best.min(p.iter().enumerate().map(|(i, &j)| cost(&a[i], &b[j])).sum());
    });
    best as f64
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// Exact transport cost by enumerating every basic solution: each spanning
/// tree of the complete bipartite graph determines a unique flow, and the
/// optimum is attained at a feasible one.
pub fn brute_force_transport(supply: &[f64], demand: &[f64], costs: &[Vec<f64>]) -> f64 {
    let (r, c) = (supply.len(), demand.len());
    let cells: Vec<(usize, usize)> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).collect();
    let need = r + c - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(need);
    subsets(&cells, need, 0, &mut chosen, &mut |tree| {
        if let Some(flows) = tree_flows(tree, supply, demand) {
            if flows.iter().all(|&f| f >= -1e-12) {
                let total: f64 = tree.iter().zip(&flows).map(|(&(i, j), f)| costs[i][j] * f).sum();
                best = best.min(total);
            }
        }
    });
    best
}

fn subsets<T: Copy>(items: &[T], k: usize, start: usize, chosen: &mut Vec<T>, visit: &mut impl FnMut(&[T])) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    for i in start..items.len() {
        if items.len() - i < k - chosen.len() {
            break;
        }
        chosen.push(items[i]);
        subsets(items, k, i + 1, chosen, visit);
        chosen.pop();
    }
}

/// Flows on `tree` meeting the margins, or `None` if the cells contain a
/// cycle. Rows are nodes `0..r`, columns `r..r+c`.
fn tree_flows(tree: &[(usize, usize)], supply: &[f64], demand: &[f64]) -> Option<Vec<f64>> {
    let r = supply.len();
    let n = r + demand.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in tree {
        let (a, b) = (find(&mut parent, i), find(&mut parent, r + j));
        if a == b {
            return None;
        }
        parent[a] = b;
    }
    let mut residual: Vec<f64> = supply.iter().copied().chain(demand.iter().copied()).collect();
    let mut degree = vec![0usize; n];
    for &(i, j) in tree {
        degree[i] += 1;
        degree[r + j] += 1;
    }
    let mut flows = vec![f64::NAN; tree.len()];
    let mut done = vec![false; tree.len()];
    for _ in 0..tree.len() {
        let (e, leaf) = tree
            .iter()
            .enumerate()
            .filter(|(e, _)| !done[*e])
            .find_map(|(e, &(i, j))| {
                if degree[i] == 1 {
                    Some((e, i))
                } else if degree[r + j] == 1 {
                    Some((e, r + j))
                } else {
                    None
                }
            })?;
        let (i, j) = tree[e];
        let other = if leaf == i { r + j } else { i };
        let f = residual[leaf];
        flows[e] = f;
        residual[leaf] = 0.0;
        residual[other] -= f;
        degree[i] -= 1;
        degree[r + j] -= 1;
        done[e] = true;
    }
    Some(flows)
}

/// `1 - EMD` between relative variant frequencies, from [`brute_force_transport`].
pub fn brute_force_relative(original: &SimpleEventLog, anonymized: &SimpleEventLog) -> f64 {
    let side = |log: &SimpleEventLog| -> (Vec<TraceVariant>, Vec<f64>) {
        let n = log.n_cases() as f64;
        log.iter().map(|(v, c)| (v.clone(), c as f64 / n)).unzip()
    };
    let (va, ma) = side(original);
    let (vb, mb) = side(anonymized);
    let costs: Vec<Vec<f64>> = va
        .iter()
        .map(|a| {
            vb.iter()
                .map(|b| {
                    let longest = a.len().max(b.len());
                    if longest == 0 {
                        0.0
                    } else {
                        cost(a, b) as f64 / longest as f64
                    }
                })
                .collect()
        })
        .collect();
    1.0 - brute_force_transport(&ma, &mb, &costs)
}
