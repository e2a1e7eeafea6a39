//! Exact expectimax for tiny influence-maximisation instances.
//!
//! The search maximises over whole daily seed sets and enumerates every joint
//! outcome of the day-end cascade. States are keyed by the Inactive set, the
//! effective frontier, the remaining budget and the day. A frontier node with
//! no Inactive out-neighbour can no longer influence anything, so it is
//! dropped from the key.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{stream_rng, AimEnv, AimState, Environment, GraphInstance, NodeStatus};
use crate::{Error, Result};

pub const DEFAULT_CHANCE_CAP: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CanonicalStateKey {
    pub inactive: u64,
    pub frontier: u64,
    pub budget: u32,
    pub day: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub optimal_value: f64,
    pub optimal_first_allocation: Vec<usize>,
    pub node_expansions: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Maximum number of uncertain cascade targets enumerated at one chance node.
    pub chance_cap: usize,
    pub memoize: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            chance_cap: DEFAULT_CHANCE_CAP,
            memoize: true,
        }
    }
}

pub struct Oracle {
    n: usize,
    horizon: usize,
    /// `(source, probability)` pairs per target.
    in_edges: Vec<Vec<(usize, f64)>>,
    out_mask: Vec<u64>,
    config: OracleConfig,
    memo: HashMap<CanonicalStateKey, (f64, u64)>,
    expansions: u64,
}

fn bits(mask: u64) -> impl Iterator<Item = usize> {
    (0..64).filter(move |i| mask >> i & 1 == 1)
}

fn mask_to_vec(mask: u64) -> Vec<usize> {
    bits(mask).collect()
}

impl Oracle {
    pub fn new(graph: &GraphInstance, horizon: usize, config: OracleConfig) -> Result<Self> {
        let n = graph.node_count;
        if n > 64 {
            return Err(Error::InvalidInstance(format!(
                "exact solver supports at most 64 nodes, got {n}"
            )));
        }
        let in_edges = (0..n).map(|v| graph.in_neighbors(v).to_vec()).collect();
        let out_mask = (0..n)
            .map(|u| {
                graph
                    .out_neighbors(u)
                    .iter()
                    .fold(0u64, |m, &(v, _)| m | 1 << v)
            })
            .collect();
        Ok(Self {
            n,
            horizon,
            in_edges,
            out_mask,
            config,
            memo: HashMap::new(),
            expansions: 0,
        })
    }

    pub fn expansions(&self) -> u64 {
        self.expansions
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    pub fn key(&self, state: &AimState) -> CanonicalStateKey {
        let mut inactive = 0u64;
        let mut frontier = 0u64;
        for (i, &s) in state.status.iter().enumerate() {
            match s {
                NodeStatus::Inactive => inactive |= 1 << i,
                NodeStatus::Active => frontier |= 1 << i,
                NodeStatus::Removed => {}
            }
        }
        self.canonical(inactive, frontier, state.remaining_budget, state.day)
    }

    fn canonical(
        &self,
        inactive: u64,
        frontier: u64,
        budget: usize,
        day: usize,
    ) -> CanonicalStateKey {
        let live = bits(frontier)
            .filter(|&u| self.out_mask[u] & inactive != 0)
            .fold(0u64, |m, u| m | 1 << u);
        CanonicalStateKey {
            inactive,
            frontier: live,
            // Budget beyond the number of seedable nodes is useless.
            budget: budget.min(inactive.count_ones() as usize) as u32,
            day: day.min(self.horizon) as u32,
        }
    }

    /// Activation probability of every Inactive node reached by the frontier.
    fn targets(&self, inactive: u64, frontier: u64) -> Vec<(usize, f64)> {
        bits(inactive)
            .filter_map(|v| {
                let miss: f64 = self.in_edges[v]
                    .iter()
                    .filter(|(u, _)| frontier >> u & 1 == 1)
                    .map(|(_, p)| 1.0 - p)
                    .product();
                let q = 1.0 - miss;
                (q > 0.0).then_some((v, q))
            })
            .collect()
    }

    /// Optimal expected future reward from `key`, together with the best seed
    /// set (lexicographically smallest among ties).
    fn solve(&mut self, key: CanonicalStateKey) -> Result<(f64, u64)> {
        if key.day as usize >= self.horizon {
            return Ok((0.0, 0));
        }
        if self.config.memoize {
            if let Some(&hit) = self.memo.get(&key) {
                return Ok(hit);
            }
        }
        self.expansions += 1;
        let candidates = mask_to_vec(key.inactive);
        let mut best = (f64::NEG_INFINITY, 0u64);
        let mut stack: Vec<(u64, usize, usize)> = vec![(0, 0, 0)];
        // Depth-first over subsets in lexicographic order of sorted members.
        while let Some((set, next, size)) = stack.pop() {
            let v = self.seeded_value(key, set, size)?;
            if v > best.0 + 1e-12 {
                best = (v, set);
            }
            if size < key.budget as usize {
                for i in (next..candidates.len()).rev() {
                    stack.push((set | 1 << candidates[i], i + 1, size + 1));
                }
            }
        }
        if self.config.memoize {
            self.memo.insert(key, best);
        }
        Ok(best)
    }

    fn seeded_value(&mut self, key: CanonicalStateKey, set: u64, size: usize) -> Result<f64> {
        let inactive = key.inactive & !set;
        let frontier = key.frontier | set;
        let budget = key.budget as usize - size;
        let targets = self.targets(inactive, frontier);
        if key.day as usize + 1 == self.horizon {
            // Last day: only the expected number of activations matters.
            return Ok(size as f64 + targets.iter().map(|(_, q)| q).sum::<f64>());
        }
        let sure: u64 = targets
            .iter()
            .filter(|(_, q)| *q >= 1.0)
            .fold(0, |m, (v, _)| m | 1 << v);
        let unsure: Vec<(usize, f64)> = targets.into_iter().filter(|(_, q)| *q < 1.0).collect();
        if unsure.len() > self.config.chance_cap {
            return Err(Error::Intractable {
                chance_bits: unsure.len(),
                cap: self.config.chance_cap,
            });
        }
        let mut expected = 0.0;
        for outcome in 0u64..(1 << unsure.len()) {
            let mut prob = 1.0;
            let mut activated = sure;
            for (j, &(v, q)) in unsure.iter().enumerate() {
                if outcome >> j & 1 == 1 {
                    prob *= q;
                    activated |= 1 << v;
                } else {
                    prob *= 1.0 - q;
                }
            }
            let next = self.canonical(
                inactive & !activated,
                activated,
                budget,
                key.day as usize + 1,
            );
            let (v, _) = self.solve(next)?;
            expected += prob * (activated.count_ones() as f64 + v);
        }
        Ok(size as f64 + expected)
    }

    /// Optimal expected future reward from `state`.
    pub fn value(&mut self, state: &AimState) -> Result<f64> {
        let key = self.key(state);
        Ok(self.solve(key)?.0)
    }

    /// Optimal seed set for the current day.
    pub fn policy_step(&mut self, state: &AimState) -> Result<Vec<usize>> {
        let key = self.key(state);
        Ok(mask_to_vec(self.solve(key)?.1))
    }

    /// Probabilities of every joint cascade outcome from a seeded state; used
    /// to check that chance nodes are proper distributions.
    pub fn outcome_probabilities(&self, inactive: u64, frontier: u64) -> Vec<f64> {
        let unsure: Vec<f64> = self
            .targets(inactive, frontier)
            .into_iter()
            .map(|(_, q)| q)
            .filter(|&q| q < 1.0)
            .collect();
        (0u64..(1 << unsure.len()))
            .map(|o| {
                unsure
                    .iter()
                    .enumerate()
                    .map(|(j, &q)| if o >> j & 1 == 1 { q } else { 1.0 - q })
                    .product()
            })
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.n
    }
}

pub fn oracle_solve(graph: &GraphInstance, horizon: usize, budget: usize) -> Result<OracleResult> {
    oracle_solve_with(graph, horizon, budget, OracleConfig::default())
}

pub fn oracle_solve_with(
    graph: &GraphInstance,
    horizon: usize,
    budget: usize,
    config: OracleConfig,
) -> Result<OracleResult> {
    let mut oracle = Oracle::new(graph, horizon, config)?;
    let start = AimState::fresh(graph.node_count, budget);
    let key = oracle.key(&start);
    let (value, set) = oracle.solve(key)?;
    Ok(OracleResult {
        optimal_value: value,
        optimal_first_allocation: mask_to_vec(set),
        node_expansions: oracle.expansions,
    })
}

/// Plays one episode with the oracle's seed sets on the real simulator.
pub fn oracle_episode(oracle: &mut Oracle, env: &AimEnv, episode: u64) -> Result<f64> {
    let mut state = env.reset();
    let mut total = 0.0;
    for day in 0..env.horizon() {
        for node in oracle.policy_step(&state)? {
            let (next, r) = env.primitive_step(&state, node)?;
            total += r;
            state = next;
        }
        let mut rng = stream_rng(env.instance_id(), episode, day as u64);
        let (next, r) = env.end_of_day(&state, &mut rng);
        total += r;
        state = next;
    }
    Ok(total)
}
