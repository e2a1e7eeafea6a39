//! Adaptive influence maximisation under the Independent Cascade model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::diff::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeStatus {
    Inactive,
    /// Activated but has not yet propagated.
    Active,
    /// Has propagated and cannot activate anyone else.
    Removed,
}

/// Immutable directed graph with per-edge activation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInstance {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// Parallel to `edges`.
    pub edge_prob: Vec<f64>,
    pub instance_id: u64,
    out_adj: Vec<Vec<(usize, f64)>>,
    in_adj: Vec<Vec<(usize, f64)>>,
}

impl GraphInstance {
    pub fn new(
        node_count: usize,
        edges: Vec<(usize, usize)>,
        edge_prob: Vec<f64>,
        instance_id: u64,
    ) -> Result<Self> {
        if node_count < 2 {
            return Err(Error::InvalidInstance(format!(
                "graph needs at least 2 nodes, got {node_count}"
            )));
        }
        if edges.len() != edge_prob.len() {
            return Err(Error::InvalidInstance(
                "edge and probability lists differ in length".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        let mut out_adj = vec![Vec::new(); node_count];
        let mut in_adj = vec![Vec::new(); node_count];
        for (&(u, v), &p) in edges.iter().zip(&edge_prob) {
            if u >= node_count || v >= node_count {
                return Err(Error::InvalidInstance(format!(
                    "edge {u}->{v} out of range"
                )));
            }
            if u == v {
                return Err(Error::InvalidInstance(format!("self-loop at node {u}")));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInstance(format!(
                    "edge {u}->{v} has probability {p} outside [0, 1]"
                )));
            }
            if !seen.insert((u, v)) {
                return Err(Error::InvalidInstance(format!("duplicate edge {u}->{v}")));
            }
            out_adj[u].push((v, p));
            in_adj[v].push((u, p));
        }
        Ok(Self {
            node_count,
            edges,
            edge_prob,
            instance_id,
            out_adj,
            in_adj,
        })
    }

    /// Edges with the weighted-cascade probability `min(1, c / indeg(v))`.
    pub fn with_indegree_probs(
        node_count: usize,
        edges: Vec<(usize, usize)>,
        c: f64,
        instance_id: u64,
    ) -> Result<Self> {
        let mut indeg = vec![0usize; node_count];
        for &(_, v) in &edges {
            if v < node_count {
                indeg[v] += 1;
            }
        }
        let probs = edges
            .iter()
            .map(|&(_, v)| {
                let d = indeg.get(v).copied().unwrap_or(1).max(1);
                (c / d as f64).min(1.0)
            })
            .collect();
        Self::new(node_count, edges, probs, instance_id)
    }

    /// Directed Erdős–Rényi graph: every ordered pair `u != v` is an edge with
    /// probability `avg_degree / (n - 1)`, so the expected out-degree is
    /// `avg_degree`.
    pub fn generate(n: usize, seed: u64, avg_degree: f64, c: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInstance(format!(
                "graph needs at least 2 nodes, got {n}"
            )));
        }
        let p = (avg_degree / (n - 1) as f64).clamp(0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in 0..n {
                if u != v && rng.random::<f64>() < p {
                    edges.push((u, v));
                }
            }
        }
        Self::with_indegree_probs(n, edges, c, seed)
    }

    pub fn out_neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.out_adj[u]
    }

    pub fn in_neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.in_adj[v]
    }

    pub fn out_degree(&self, u: usize) -> usize {
        self.out_adj[u].len()
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.in_adj[v].len()
    }
}

/// Standard generator with `c = 1`.
pub fn aim_generate(n: usize, seed: u64, avg_degree: f64) -> Result<GraphInstance> {
    GraphInstance::generate(n, seed, avg_degree, 1.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AimState {
    pub status: Vec<NodeStatus>,
    /// Sorted ids of Active nodes awaiting propagation.
    pub frontier: Vec<usize>,
    pub remaining_budget: usize,
    pub day: usize,
    pub influenced_count: usize,
}

impl AimState {
    pub fn fresh(n: usize, budget: usize) -> Self {
        Self {
            status: vec![NodeStatus::Inactive; n],
            frontier: Vec::new(),
            remaining_budget: budget,
            day: 0,
            influenced_count: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AimConfig {
    pub horizon: usize,
    pub budget: usize,
    /// Per-decision cap; `None` means the total budget.
    pub max_decision_budget: Option<usize>,
}

pub struct AimEnv {
    graph: GraphInstance,
    config: AimConfig,
    adjacency: Arc<Tensor>,
    max_in: f64,
    max_out: f64,
}

pub const AIM_FEATURES: usize = 10;

impl AimEnv {
    pub fn new(graph: GraphInstance, config: AimConfig) -> Self {
        let n = graph.node_count;
        // Row u averages over u's out-neighbours: the nodes u could influence.
        let mut adj = Tensor::zeros(n, n);
        for u in 0..n {
            let d = graph.out_degree(u);
            for &(v, _) in graph.out_neighbors(u) {
                adj.set(u, v, 1.0 / d as f64);
            }
        }
        let max_in = (0..n).map(|v| graph.in_degree(v)).max().unwrap_or(0).max(1) as f64;
        let max_out = (0..n)
            .map(|u| graph.out_degree(u))
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        Self {
            graph,
            config,
            adjacency: Arc::new(adj),
            max_in,
            max_out,
        }
    }

    pub fn graph(&self) -> &GraphInstance {
        &self.graph
    }

    pub fn config(&self) -> &AimConfig {
        &self.config
    }

    /// Probability that an Inactive node `v` is activated at the coming day end.
    pub fn activation_prob(&self, state: &AimState, v: usize) -> f64 {
        if state.status[v] != NodeStatus::Inactive {
            return 0.0;
        }
        let miss: f64 = self
            .graph
            .in_neighbors(v)
            .iter()
            .filter(|(u, _)| state.status[*u] == NodeStatus::Active)
            .map(|(_, p)| 1.0 - p)
            .product();
        1.0 - miss
    }
}

impl Environment for AimEnv {
    type State = AimState;

    fn name(&self) -> &'static str {
        "aim"
    }

    fn instance_id(&self) -> u64 {
        self.graph.instance_id
    }

    fn action_count(&self) -> usize {
        self.graph.node_count
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn total_budget(&self) -> usize {
        self.config.budget
    }

    fn max_decision_budget(&self) -> usize {
        self.config
            .max_decision_budget
            .unwrap_or(self.config.budget)
    }

    fn reward_bound(&self) -> f64 {
        // A day end can activate every node at once.
        self.graph.node_count as f64
    }

    fn reset(&self) -> AimState {
        AimState::fresh(self.graph.node_count, self.config.budget)
    }

    fn day(&self, state: &AimState) -> usize {
        state.day
    }

    fn remaining_budget(&self, state: &AimState) -> usize {
        state.remaining_budget
    }

    fn legal_mask(&self, state: &AimState) -> Vec<bool> {
        let open = state.remaining_budget > 0 && state.day < self.config.horizon;
        state
            .status
            .iter()
            .map(|&s| open && s == NodeStatus::Inactive)
            .collect()
    }

    fn primitive_step(&self, state: &AimState, node: usize) -> Result<(AimState, f64)> {
        if state.remaining_budget == 0 {
            return Err(Error::BudgetExhausted);
        }
        if node >= state.status.len()
            || state.status[node] != NodeStatus::Inactive
            || state.day >= self.config.horizon
        {
            return Err(Error::MaskedAction { action: node });
        }
        let mut next = state.clone();
        next.status[node] = NodeStatus::Active;
        let pos = next.frontier.binary_search(&node).unwrap_or_else(|p| p);
        next.frontier.insert(pos, node);
        next.remaining_budget -= 1;
        next.influenced_count += 1;
        Ok((next, 1.0))
    }

    fn end_of_day<R: Rng + ?Sized>(&self, state: &AimState, rng: &mut R) -> (AimState, f64) {
        let mut next = state.clone();
        let mut activated = Vec::new();
        for &u in &state.frontier {
            for &(v, p) in self.graph.out_neighbors(u) {
                if next.status[v] == NodeStatus::Inactive && rng.random::<f64>() < p {
                    next.status[v] = NodeStatus::Active;
                    activated.push(v);
                }
            }
            next.status[u] = NodeStatus::Removed;
        }
        activated.sort_unstable();
        next.frontier = activated;
        next.influenced_count += next.frontier.len();
        next.day += 1;
        let reward = next.frontier.len() as f64;
        (next, reward)
    }

    fn feature_dim(&self) -> usize {
        AIM_FEATURES
    }

    fn node_features(&self, state: &AimState, decision_remaining: f64) -> Tensor {
        let n = self.graph.node_count;
        let budget = state.remaining_budget as f64 / self.config.budget.max(1) as f64;
        let day = state.day as f64 / self.config.horizon.max(1) as f64;
        let mut out = Tensor::zeros(n, AIM_FEATURES);
        for u in 0..n {
            let status = match state.status[u] {
                NodeStatus::Inactive => 0,
                NodeStatus::Active => 1,
                NodeStatus::Removed => 2,
            };
            let spread: f64 = self
                .graph
                .out_neighbors(u)
                .iter()
                .filter(|(v, _)| state.status[*v] == NodeStatus::Inactive)
                .map(|(_, p)| p)
                .sum();
            let row = [
                (status == 0) as u8 as f64,
                (status == 1) as u8 as f64,
                (status == 2) as u8 as f64,
                self.graph.in_degree(u) as f64 / self.max_in,
                self.graph.out_degree(u) as f64 / self.max_out,
                spread / self.max_out,
                self.activation_prob(state, u),
                budget,
                day,
                decision_remaining,
            ];
            for (j, x) in row.into_iter().enumerate() {
                out.set(u, j, x);
            }
        }
        out
    }

    fn adjacency(&self) -> &Arc<Tensor> {
        &self.adjacency
    }
}
