//! FIFO replay storage with uniform sampling.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Bounded first-in first-out buffer; the oldest item is dropped on overflow.
#[derive(Clone, Debug)]
pub struct Fifo<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T> Fifo<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| rng.random_range(0..self.items.len()))
            .collect()
    }
}

/// One executed high-level decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HlTransition<S> {
    pub day: usize,
    /// Decision-time state `s_k`.
    pub state: S,
    pub subgoal: usize,
    pub budget: usize,
    /// Feasible cap `B_k` at decision time.
    pub cap: usize,
    pub duration: usize,
    /// Undiscounted reward of each primitive step.
    pub primitive_rewards: Vec<f64>,
    /// Reward of the stochastic end-of-day transition.
    pub day_end_reward: f64,
    pub macro_reward: f64,
    /// Last state of the primitive chain, before the end-of-day transition.
    pub endpoint: S,
    /// Next decision-time state `s_{k+1}`.
    pub next_state: S,
    pub search_policy: Vec<f64>,
    pub search_value: f64,
    /// Root value of the search at `s_{k+1}`; zero after the last day.
    pub next_root_value: f64,
}

/// `Σ_{i<τ} γ^i r_i`, with the end-of-day reward credited to the last
/// primitive step (or to step 0 when nothing was executed).
pub fn macro_reward(primitive_rewards: &[f64], day_end_reward: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut w = 1.0;
    for &r in primitive_rewards {
        total += w * r;
        w *= gamma;
    }
    let last = primitive_rewards.len().saturating_sub(1) as i32;
    total + gamma.powi(last) * day_end_reward
}

/// One primitive step of the low-level policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LlTransition<S> {
    pub instance: usize,
    pub subgoal: usize,
    pub state: S,
    pub action: usize,
    /// Includes the end-of-day reward on the last step of a segment.
    pub reward: f64,
    pub next_state: S,
    /// Unspent fraction of the decision budget before and after the step.
    pub remaining_before: f64,
    pub remaining_after: f64,
    /// The segment ended here: decision budget spent or no legal action left.
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Game<S> {
    pub instance: usize,
    pub transitions: Vec<HlTransition<S>>,
}

pub struct ReplayBuffers<S> {
    pub hl: Fifo<Game<S>>,
    pub ll: Fifo<LlTransition<S>>,
}

impl<S> ReplayBuffers<S> {
    pub fn new(hl_capacity: usize, ll_capacity: usize) -> Self {
        Self {
            hl: Fifo::new(hl_capacity),
            ll: Fifo::new(ll_capacity),
        }
    }

    /// Uniform draws over stored high-level transitions as (game, position).
    pub fn sample_hl<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        let total: usize = self.hl.iter().map(|g| g.transitions.len()).sum();
        if total == 0 {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                for (gi, g) in self.hl.iter().enumerate() {
                    if k < g.transitions.len() {
                        return (gi, k);
                    }
                    k -= g.transitions.len();
                }
                unreachable!("index within total")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fifo_enforces_capacity() {
        let mut f = Fifo::new(3);
        for i in 0..10 {
            f.push(i);
            assert!(f.len() <= 3);
        }
        assert_eq!(f.iter().copied().collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    #[test]
    fn macro_reward_examples() {
        assert_eq!(macro_reward(&[], 2.0, 0.5), 2.0);
        assert_eq!(macro_reward(&[1.0, 1.0], 4.0, 0.5), 1.0 + 0.5 + 0.5 * 4.0);
    }

    #[test]
    fn hl_sampling_is_uniform_over_transitions() {
        let mut b: ReplayBuffers<u8> = ReplayBuffers::new(4, 4);
        for len in [1usize, 3] {
            b.hl.push(Game {
                instance: 0,
                transitions: (0..len)
                    .map(|d| HlTransition {
                        day: d,
                        state: 0,
                        subgoal: 0,
                        budget: 0,
                        cap: 0,
                        duration: 0,
                        primitive_rewards: vec![],
                        day_end_reward: 0.0,
                        macro_reward: 0.0,
                        endpoint: 0,
                        next_state: 0,
                        search_policy: vec![],
                        search_value: 0.0,
                        next_root_value: 0.0,
                    })
                    .collect(),
            });
        }
        let draws = b.sample_hl(40_000, &mut ChaCha8Rng::seed_from_u64(0));
        let first = draws.iter().filter(|d| d.0 == 0).count() as f64 / 40_000.0;
        assert!((first - 0.25).abs() < 0.01, "{first}");
    }
}
