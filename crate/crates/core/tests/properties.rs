use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssco_core::env::{
    sop_day_profit, AimConfig, AimEnv, AimState, Environment, GraphInstance, NodeStatus,
};
use ssco_core::harness::stats::{bootstrap_ci, kendall_tau_b};
use ssco_core::heuristics::{influence_scores, select_by_degree, select_by_score};

/// Tau-b by direct pair counting.
fn kendall_pairs(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).signum() * if x[i] == x[j] { 0.0 } else { 1.0 };
            let b = (y[i] - y[j]).signum() * if y[i] == y[j] { 0.0 } else { 1.0 };
            if a == 0.0 {
                tx += 1.0;
            }
            if b == 0.0 {
                ty += 1.0;
            }
            if a * b > 0.0 {
                c += 1.0;
            } else if a * b < 0.0 {
                d += 1.0;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = ((n0 - tx) * (n0 - ty)).sqrt();
    (denom > 0.0).then(|| (c - d) / denom)
}

fn subset_profit(profits: &[f64], mask: u32, rho: f64) -> f64 {
    let chosen: Vec<f64> = (0..profits.len())
        .filter(|i| mask & (1 << i) != 0)
        .map(|i| profits[i])
        .collect();
    sop_day_profit(&chosen, rho)
}

/// Candidates in descending score, ties to the lowest index.
fn brute_top(scores: &[f64], allowed: &[bool], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| allowed[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

fn graph_strategy() -> impl Strategy<Value = GraphInstance> {
    (3usize..9)
        .prop_flat_map(|n| {
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v)))
                .collect();
            let m = pairs.len();
            (
                Just(n),
                Just(pairs),
                prop::collection::vec(any::<bool>(), m),
                prop::collection::vec(0.0f64..=1.0, m),
            )
        })
        .prop_map(|(n, pairs, keep, probs)| {
            let mut edges = Vec::new();
            let mut p = Vec::new();
            for (i, e) in pairs.into_iter().enumerate() {
                if keep[i] {
                    edges.push(e);
                    p.push(probs[i]);
                }
            }
            GraphInstance::new(n, edges, p, 0).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sop_day_profit_is_monotone_and_submodular(
        profits in prop::collection::vec(0.0f64..10.0, 1..=6),
        rho in 0.05f64..1.0,
    ) {
        let n = profits.len();
        let full = 1u32 << n;
        for s in 0..full {
            for x in 0..n {
                if s & (1 << x) != 0 {
                    continue;
                }
                let gain_s = subset_profit(&profits, s | 1 << x, rho) - subset_profit(&profits, s, rho);
                prop_assert!(gain_s >= -1e-12);
                // Every superset T of S that excludes x.
                for t in 0..full {
                    if t & s != s || t & (1 << x) != 0 {
                        continue;
                    }
                    let gain_t = subset_profit(&profits, t | 1 << x, rho) - subset_profit(&profits, t, rho);
                    prop_assert!(gain_s >= gain_t - 1e-9, "S {s:b} T {t:b} x {x}: {gain_s} < {gain_t}");
                }
            }
        }
    }

    #[test]
    fn kendall_matches_pair_counting(
        pairs in prop::collection::vec((0u8..6, 0u8..6), 2..=50),
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        match (kendall_tau_b(&x, &y), kendall_pairs(&x, &y)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (None, None) => {}
            other => prop_assert!(false, "definedness differs: {other:?}"),
        }
    }

    #[test]
    fn bootstrap_interval_contains_the_estimate(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 5..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = |idx: &[usize]| Some(idx.iter().map(|&i| pairs[i].0 * pairs[i].1).sum::<f64>() / idx.len() as f64);
        let ci = bootstrap_ci(pairs.len(), 200, 0.95, &mut rng, mean).unwrap();
        prop_assert!(ci.lower <= ci.estimate && ci.estimate <= ci.upper, "{ci:?}");
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Some(ci) = bootstrap_ci(pairs.len(), 200, 0.95, &mut rng, |idx| {
            let a: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let b: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            kendall_tau_b(&a, &b)
        }) {
            prop_assert!(ci.lower <= ci.estimate && ci.estimate <= ci.upper, "{ci:?}");
        }
    }

    #[test]
    fn degree_and_score_selection_match_brute_force(
        g in graph_strategy(),
        inactive in prop::collection::vec(any::<bool>(), 8),
        count in 0usize..5,
        budget in 0usize..5,
    ) {
        let n = g.node_count;
        let mut state = AimState::fresh(n, budget);
        for (v, &keep) in inactive.iter().enumerate().take(n) {
            if !keep {
                state.status[v] = NodeStatus::Removed;
            }
        }
        let allowed: Vec<bool> = (0..n).map(|v| inactive[v]).collect();
        let want = count.min(budget);

        let degree: Vec<f64> = (0..n)
            .map(|u| g.edges.iter().filter(|e| e.0 == u).count() as f64)
            .collect();
        prop_assert_eq!(select_by_degree(&g, &state, count), brute_top(&degree, &allowed, want));

        let mut score = vec![0.0; n];
        for (&(_, v), &p) in g.edges.iter().zip(&g.edge_prob) {
            score[v] += p;
        }
        for (a, b) in influence_scores(&g).iter().zip(&score) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(select_by_score(&g, &state, count), brute_top(&score, &allowed, want));
    }

    #[test]
    fn two_node_cascade_frequency_matches_edge_probability(p in 0.0f64..=1.0, seed in any::<u64>()) {
        let trials = 4000;
        let hits = two_node_activations(p, trials, seed);
        let freq = hits as f64 / trials as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        prop_assert!((freq - p).abs() <= 4.0 * se + 1e-12, "p {p} freq {freq}");
    }
}

/// Seeds node 0 and counts how often the single end-of-day cascade reaches
/// node 1 over `trials` independent days.
fn two_node_activations(p: f64, trials: usize, seed: u64) -> usize {
    let g = GraphInstance::new(2, vec![(0, 1)], vec![p], 0).unwrap();
    let env = AimEnv::new(
        g,
        AimConfig {
            horizon: 1,
            budget: 1,
            max_decision_budget: None,
        },
    );
    let (seeded, _) = env.primitive_step(&env.reset(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .filter(|_| {
            let (next, _) = env.end_of_day(&seeded, &mut rng);
            next.status[1] != NodeStatus::Inactive
        })
        .count()
}
