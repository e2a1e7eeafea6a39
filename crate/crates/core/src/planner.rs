//! PUCT tree search over subgoals in latent space.
//!
//! Each edge is one high-level decision: the dynamics head jumps straight to
//! the next decision-time latent and predicts the macro reward collected on
//! the way. Search never touches the environment or the parameters.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::world_model::WorldModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub simulations: usize,
    pub c_init: f64,
    pub c_base: f64,
    pub dirichlet_alpha: f64,
    pub noise_mix: f64,
    pub temperature: f64,
    /// Discount applied once per high-level decision.
    pub discount: f64,
    /// Rescale Q into `[0, 1]` by the min and max seen in the tree.
    pub normalize_q: bool,
}

impl SearchConfig {
    pub fn aim() -> Self {
        Self {
            simulations: 150,
            c_init: 2.5,
            c_base: 19652.0,
            dirichlet_alpha: 0.30,
            noise_mix: 0.30,
            temperature: 1.0,
            discount: 0.997,
            normalize_q: true,
        }
    }

    pub fn sop() -> Self {
        Self {
            simulations: 250,
            c_init: 1.5,
            dirichlet_alpha: 0.20,
            noise_mix: 0.20,
            temperature: 1.5,
            ..Self::aim()
        }
    }

    pub fn desk() -> Self {
        Self {
            simulations: 32,
            ..Self::aim()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.simulations < 1 {
            return Err(crate::Error::Config(
                "simulations must be at least 1".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(crate::Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_mix) || !(0.0..=1.0).contains(&self.discount) {
            return Err(crate::Error::Config(
                "noise_mix and discount must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// What the search needs from a model: a prior/value head and a
/// deterministic latent transition with a reward.
pub trait LatentModel {
    fn subgoal_count(&self) -> usize;
    fn predict(&self, h: &[f64]) -> (Vec<f64>, f64);
    fn dynamics_step(&self, h: &[f64], z: usize) -> (Vec<f64>, f64);
}

impl LatentModel for WorldModel {
    fn subgoal_count(&self) -> usize {
        WorldModel::subgoal_count(self)
    }

    fn predict(&self, h: &[f64]) -> (Vec<f64>, f64) {
        WorldModel::predict(self, h)
    }

    fn dynamics_step(&self, h: &[f64], z: usize) -> (Vec<f64>, f64) {
        WorldModel::dynamics_step(self, h, z)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub prior: f64,
    pub visits: u32,
    pub value_sum: f64,
    pub reward: f64,
    pub child: Option<usize>,
}

impl Edge {
    pub fn q(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.value_sum / self.visits as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub latent: Vec<f64>,
    /// Decisions between the root and this node.
    pub depth: usize,
    pub edges: Vec<Edge>,
    pub expanded: bool,
    /// The horizon was reached; the node is never expanded.
    pub terminal: bool,
}

impl SearchNode {
    pub fn visit_count(&self) -> u32 {
        self.edges.iter().map(|e| e.visits).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn new() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    pub fn update(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn normalize(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            v
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub bounds: MinMax,
}

impl SearchTree {
    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub policy: Vec<f64>,
    pub root_value: f64,
    pub visits: Vec<u32>,
    pub tree: SearchTree,
}

/// `c(h) = c_init + ln((ΣN + c_base + 1) / c_base)`.
pub fn exploration_coefficient(total_visits: u32, config: &SearchConfig) -> f64 {
    config.c_init + ((total_visits as f64 + config.c_base + 1.0) / config.c_base).ln()
}

/// PUCT score of every edge. Unvisited edges have `Q = 0`; at a node that
/// has never been visited the square-root factor is taken as 1 so the prior
/// decides the first pick.
pub fn puct_scores(node: &SearchNode, config: &SearchConfig, bounds: &MinMax) -> Vec<f64> {
    let total = node.visit_count();
    let c = exploration_coefficient(total, config);
    let sqrt_total = (total.max(1) as f64).sqrt();
    node.edges
        .iter()
        .map(|e| {
            let q = if e.visits == 0 {
                0.0
            } else if config.normalize_q {
                bounds.normalize(e.q())
            } else {
                e.q()
            };
            q + c * e.prior * sqrt_total / (1.0 + e.visits as f64)
        })
        .collect()
}

/// Highest PUCT score; ties go to the lowest subgoal index.
pub fn puct_select(node: &SearchNode, config: &SearchConfig, bounds: &MinMax) -> usize {
    let scores = puct_scores(node, config, bounds);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Walks `path` (node, subgoal) from the leaf upwards with
/// `G_d = R̂_d + γ G_{d+1}`, starting from `G = leaf_value` below the last edge.
pub fn backup(tree: &mut SearchTree, path: &[(usize, usize)], leaf_value: f64, discount: f64) {
    let mut g = leaf_value;
    for &(node, z) in path.iter().rev() {
        let edge = &mut tree.nodes[node].edges[z];
        g = edge.reward + discount * g;
        edge.value_sum += g;
        edge.visits += 1;
        tree.bounds.update(edge.q());
    }
}

/// `P ← (1 − mix) P + mix · Dirichlet(α)`.
pub fn add_root_noise<R: Rng + ?Sized>(node: &mut SearchNode, alpha: f64, mix: f64, rng: &mut R) {
    if mix == 0.0 || node.edges.is_empty() {
        return;
    }
    let gamma = Gamma::new(alpha, 1.0).expect("dirichlet alpha must be positive");
    let draws: Vec<f64> = node.edges.iter().map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let k = node.edges.len() as f64;
    for (e, g) in node.edges.iter_mut().zip(draws) {
        let noise = if total > 0.0 { g / total } else { 1.0 / k };
        e.prior = (1.0 - mix) * e.prior + mix * noise;
    }
}

/// `π(z) ∝ N(z)^{1/T}`; a temperature of zero gives a point mass on the most
/// visited subgoal (lowest index on ties).
pub fn visit_policy(visits: &[u32], temperature: f64) -> Vec<f64> {
    let mut p = vec![0.0; visits.len()];
    if visits.is_empty() {
        return p;
    }
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in visits.iter().enumerate() {
            if v > visits[best] {
                best = i;
            }
        }
        p[best] = 1.0;
        return p;
    }
    let max = *visits.iter().max().unwrap() as f64;
    if max == 0.0 {
        return vec![1.0 / visits.len() as f64; visits.len()];
    }
    for (pi, &v) in p.iter_mut().zip(visits) {
        *pi = (v as f64 / max).powf(1.0 / temperature);
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn new_node(latent: Vec<f64>, depth: usize, prior: Option<&[f64]>) -> SearchNode {
    let (edges, expanded, terminal) = match prior {
        Some(p) => (
            p.iter()
                .map(|&prior| Edge {
                    prior,
                    ..Edge::default()
                })
                .collect(),
            true,
            false,
        ),
        None => (Vec::new(), false, true),
    };
    SearchNode {
        latent,
        depth,
        edges,
        expanded,
        terminal,
    }
}

/// Runs `config.simulations` simulations from `root`. `decisions_left` is the
/// number of high-level decisions remaining in the episode (at least 1);
/// nodes that reach it are terminal with value 0. `noise` enables the root
/// Dirichlet mixture (training only); without it the search uses no
/// randomness.
pub fn run_search<M: LatentModel, R: Rng + ?Sized>(
    model: &M,
    root: &[f64],
    decisions_left: usize,
    config: &SearchConfig,
    noise: bool,
    rng: &mut R,
) -> SearchResult {
    let (prior, _) = model.predict(root);
    let mut tree = SearchTree {
        nodes: vec![new_node(root.to_vec(), 0, Some(&prior))],
        bounds: MinMax::new(),
    };
    if noise {
        add_root_noise(
            &mut tree.nodes[0],
            config.dirichlet_alpha,
            config.noise_mix,
            rng,
        );
    }
    let decisions_left = decisions_left.max(1);
    let mut path = Vec::new();
    for _ in 0..config.simulations {
        path.clear();
        let mut node = 0;
        let leaf_value = loop {
            let z = puct_select(&tree.nodes[node], config, &tree.bounds);
            path.push((node, z));
            match tree.nodes[node].edges[z].child {
                Some(child) if tree.nodes[child].terminal => break 0.0,
                Some(child) => node = child,
                None => {
                    let (h, r) = model.dynamics_step(&tree.nodes[node].latent, z);
                    let depth = tree.nodes[node].depth + 1;
                    let (child, value) = if depth >= decisions_left {
                        (new_node(h, depth, None), 0.0)
                    } else {
                        let (p, v) = model.predict(&h);
                        (new_node(h, depth, Some(&p)), v)
                    };
                    tree.nodes.push(child);
                    let id = tree.nodes.len() - 1;
                    let edge = &mut tree.nodes[node].edges[z];
                    edge.reward = r;
                    edge.child = Some(id);
                    break value;
                }
            }
        };
        backup(&mut tree, &path, leaf_value, config.discount);
    }
    let visits: Vec<u32> = tree.root().edges.iter().map(|e| e.visits).collect();
    let total: u32 = visits.iter().sum();
    let root_value =
        tree.root().edges.iter().map(|e| e.value_sum).sum::<f64>() / total.max(1) as f64;
    SearchResult {
        policy: visit_policy(&visits, config.temperature),
        root_value,
        visits,
        tree,
    }
}
