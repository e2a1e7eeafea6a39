//! Environment contract and the two stochastic benchmark simulators.
//!
//! An episode is a sequence of `horizon` days. Each day the agent issues up to
//! some number of primitive selections (seed a node, visit a city), after
//! which [`Environment::end_of_day`] applies the day's stochastic transition.

pub mod aim;
pub mod io;
pub mod sop;

use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::Tensor;
use crate::Result;

pub use aim::{aim_generate, AimConfig, AimEnv, AimState, GraphInstance, NodeStatus};
pub use sop::{sop_day_profit, SopConfig, SopEnv, SopInstance, SopParams, SopState};

pub trait Environment: Send + Sync {
    type State: Clone + Debug + PartialEq + Send + Sync;

    fn name(&self) -> &'static str;
    fn instance_id(&self) -> u64;
    /// Number of primitive actions (nodes or cities).
    fn action_count(&self) -> usize;
    /// Number of high-level decisions (days) per episode.
    fn horizon(&self) -> usize;
    fn total_budget(&self) -> usize;
    /// Size of the fixed budget universe `{0..=B_max}` for one decision.
    fn max_decision_budget(&self) -> usize;
    /// Upper bound on any single primitive reward.
    fn reward_bound(&self) -> f64;

    fn reset(&self) -> Self::State;
    fn day(&self, state: &Self::State) -> usize;
    fn remaining_budget(&self, state: &Self::State) -> usize;
    fn legal_mask(&self, state: &Self::State) -> Vec<bool>;
    fn primitive_step(&self, state: &Self::State, action: usize) -> Result<(Self::State, f64)>;
    fn end_of_day<R: Rng + ?Sized>(&self, state: &Self::State, rng: &mut R) -> (Self::State, f64);

    fn feature_dim(&self) -> usize;
    /// Per-node feature rows. `decision_remaining` is the fraction of the
    /// current decision's budget still unspent (0 at decision time).
    fn node_features(&self, state: &Self::State, decision_remaining: f64) -> Tensor;
    /// Row-normalised message-passing operator over nodes.
    fn adjacency(&self) -> &Arc<Tensor>;

    fn is_done(&self, state: &Self::State) -> bool {
        self.day(state) >= self.horizon()
    }

    /// Budget that may be committed at the current decision.
    fn feasible_budget(&self, state: &Self::State) -> usize {
        self.remaining_budget(state).min(self.max_decision_budget())
    }
}

pub fn any_legal(mask: &[bool]) -> bool {
    mask.iter().any(|&m| m)
}

/// Independent random stream keyed by `(seed, episode, step)`.
pub fn stream_rng(seed: u64, episode: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(episode)));
    rng.set_stream(step);
    rng
}

pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Sample from a categorical distribution given non-negative weights.
pub fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return weights.len().saturating_sub(1);
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

/// Index of the maximum value; ties go to the lowest index. Entries with
/// `mask[i] == false` are ignored. Returns `None` when nothing is allowed.
pub fn masked_argmax(values: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &ok)) in values.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}
