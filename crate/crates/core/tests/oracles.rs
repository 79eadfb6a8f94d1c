mod common;

use dpgen::accountant::{default_orders, rdp_subsampled_gaussian};
use dpgen::ddpm::{build_schedule, sample_steps};
use dpgen::dpsgd::poisson_sample;
use dpgen::metrics::{min_cost_flow, FlowNetwork};
use rand::Rng;

#[test]
fn fractional_orders_never_understate() {
    // linear interpolation of a convex log-moment can only overshoot
    let orders: Vec<f64> = default_orders().into_iter().filter(|a| *a < 3.0).collect();
    for q in [0.01, 0.1, 0.5] {
        for phi in [0.6, 1.0, 3.0] {
            for &(alpha, eps) in rdp_subsampled_gaussian(q, phi, &orders).unwrap().points() {
                let oracle = common::quadrature_rdp(q, phi, alpha);
                assert!(eps >= oracle * (1.0 - 1e-9), "q={q} phi={phi} alpha={alpha}: {eps} < {oracle}");
            }
        }
    }
}

#[test]
fn large_orders_stay_finite_and_close() {
    let orders = [128.0, 256.0];
    for &(alpha, eps) in rdp_subsampled_gaussian(0.01, 4.0, &orders).unwrap().points() {
        let oracle = common::quadrature_rdp(0.01, 4.0, alpha);
        assert!(eps.is_finite());
        assert!((eps - oracle).abs() <= 1e-6 * oracle, "alpha={alpha}: {eps} vs {oracle}");
    }
}

#[test]
fn transport_solver_matches_vertex_enumeration() {
    let mut r = common::rng(11);
    for _ in 0..300 {
        let (rows, cols) = (r.random_range(1..=4), r.random_range(1..=4));
        let total: i64 = r.random_range(rows.max(cols) as i64..=12);
        let split = |n: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let mut parts = vec![1i64; n];
            for _ in n as i64..total {
                parts[r.random_range(0..n)] += 1;
            }
            parts
        };
        let supplies = split(rows, &mut r);
        let demands = split(cols, &mut r);
        let costs: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| f64::from(r.random_range(0..10))).collect()).collect();
        let solution = min_cost_flow(&FlowNetwork { supplies: supplies.clone(), demands: demands.clone(), costs: costs.clone() }).unwrap();
        let s: Vec<f64> = supplies.iter().map(|&x| x as f64).collect();
        let d: Vec<f64> = demands.iter().map(|&x| x as f64).collect();
        assert_eq!(solution.cost, common::brute_force_transport(&s, &d, &costs));
        for (i, row) in solution.flows.iter().enumerate() {
            assert_eq!(row.iter().sum::<i64>(), supplies[i]);
        }
    }
}

/// 99.9% quantile of chi-square with 9 degrees of freedom.
const CHI2_9_999: f64 = 27.877;

#[test]
fn training_steps_are_uniform() {
    let steps = 10;
    let draws = sample_steps(100_000, steps, &mut common::rng(12));
    let mut counts = vec![0u64; steps + 1];
    for t in draws {
        assert!((1..=steps).contains(&t));
        counts[t] += 1;
    }
    let expected = 100_000.0 / steps as f64;
    let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_9_999, "chi2 = {chi2}");
}

#[test]
fn poisson_batches_have_rate_q() {
    let mut r = common::rng(13);
    let (m, q, rounds) = (1000, 0.05, 400);
    let total: usize = (0..rounds).map(|_| poisson_sample(m, q, &mut r).len()).sum();
    let mean = total as f64 / rounds as f64;
    let sd = (m as f64 * q * (1.0 - q) / rounds as f64).sqrt();
    assert!((mean - m as f64 * q).abs() <= 4.0 * sd, "mean batch {mean}");
}

#[test]
fn custom_schedule_products() {
    let s = build_schedule(4, 0.1, 0.4).unwrap();
    let mut ab = 1.0;
    for t in 1..=4 {
        ab *= 1.0 - (0.1 + 0.1 * (t - 1) as f64);
        assert!((s.alpha_bar(t) - ab).abs() <= 1e-12);
    }
}
