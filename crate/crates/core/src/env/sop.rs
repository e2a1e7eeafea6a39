//! Stochastic orienteering: daily routes over cities whose profits drift.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::diff::{euclidean, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SopInstance {
    pub city_coords: Vec<[f64; 2]>,
    pub depot: usize,
    pub daily_limit: f64,
    pub penalty_rate: f64,
    pub profit_init: Vec<f64>,
    pub noise_scale: f64,
    pub p_max: f64,
    pub instance_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SopParams {
    pub daily_limit: f64,
    pub penalty_rate: f64,
    pub p_max: f64,
    /// Noise standard deviation as a fraction of `p_max`.
    pub noise_fraction: f64,
}

impl Default for SopParams {
    fn default() -> Self {
        Self {
            daily_limit: 1.0,
            penalty_rate: 1.0,
            p_max: 1.0,
            noise_fraction: 0.1,
        }
    }
}

impl SopInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.city_coords.len();
        if n < 2 {
            return Err(Error::InvalidInstance(format!(
                "need at least 2 cities, got {n}"
            )));
        }
        if self.depot >= n {
            return Err(Error::InvalidInstance(format!(
                "depot {} out of range",
                self.depot
            )));
        }
        if self.daily_limit.is_nan() || self.daily_limit <= 0.0 {
            return Err(Error::InvalidInstance(
                "daily limit must be positive".into(),
            ));
        }
        if self.profit_init.len() != n {
            return Err(Error::InvalidInstance("profit list length mismatch".into()));
        }
        if self.profit_init.iter().any(|p| p.is_nan() || *p < 0.0)
            || self.penalty_rate.is_nan()
            || self.penalty_rate < 0.0
            || self.noise_scale.is_nan()
            || self.noise_scale < 0.0
        {
            return Err(Error::InvalidInstance(
                "negative profit, penalty or noise".into(),
            ));
        }
        Ok(())
    }

    pub fn generate(n: usize, seed: u64, params: &SopParams) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let city_coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let profit_init = (0..n)
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    rng.random::<f64>() * params.p_max
                }
            })
            .collect();
        let inst = Self {
            city_coords,
            depot: 0,
            daily_limit: params.daily_limit,
            penalty_rate: params.penalty_rate,
            profit_init,
            noise_scale: params.noise_fraction * params.p_max,
            p_max: params.p_max,
            instance_id: seed,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn city_count(&self) -> usize {
        self.city_coords.len()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        euclidean(&self.city_coords[a], &self.city_coords[b])
    }
}

/// Rank-discounted aggregate `Σ_j ρ^j p_(j)` over profits in descending order.
/// Input order does not matter.
pub fn sop_day_profit(profits: &[f64], rho: f64) -> f64 {
    let mut sorted = profits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut w = 1.0;
    let mut total = 0.0;
    for p in sorted {
        total += w * p;
        w *= rho;
    }
    total
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SopState {
    pub profits: Vec<f64>,
    pub visited: Vec<bool>,
    pub current_city: usize,
    pub day: usize,
    pub remaining_budget: usize,
    pub day_distance: f64,
    /// Profits collected so far today, in visit order.
    pub day_profits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SopConfig {
    pub horizon: usize,
    pub budget: usize,
    /// Maximum city selections per day.
    pub daily_cap: usize,
    pub rho: f64,
}

pub struct SopEnv {
    instance: SopInstance,
    config: SopConfig,
    adjacency: Arc<Tensor>,
}

pub const SOP_FEATURES: usize = 11;
const KNN: usize = 5;

impl SopEnv {
    pub fn new(instance: SopInstance, config: SopConfig) -> Self {
        let n = instance.city_count();
        let k = KNN.min(n - 1);
        let mut adj = Tensor::zeros(n, n);
        for i in 0..n {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                instance
                    .distance(i, a)
                    .total_cmp(&instance.distance(i, b))
                    .then(a.cmp(&b))
            });
            for &j in &others[..k] {
                adj.set(i, j, 1.0 / k as f64);
            }
        }
        Self {
            instance,
            config,
            adjacency: Arc::new(adj),
        }
    }

    pub fn instance(&self) -> &SopInstance {
        &self.instance
    }

    pub fn config(&self) -> &SopConfig {
        &self.config
    }

    fn excess(&self, distance: f64) -> f64 {
        (distance - self.instance.daily_limit).max(0.0)
    }

    /// Cities reachable without exceeding today's remaining limit.
    pub fn penalty_free(&self, state: &SopState, city: usize) -> bool {
        state.day_distance + self.instance.distance(state.current_city, city)
            <= self.instance.daily_limit
    }
}

impl Environment for SopEnv {
    type State = SopState;

    fn name(&self) -> &'static str {
        "sop"
    }

    fn instance_id(&self) -> u64 {
        self.instance.instance_id
    }

    fn action_count(&self) -> usize {
        self.instance.city_count()
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn total_budget(&self) -> usize {
        self.config.budget
    }

    fn max_decision_budget(&self) -> usize {
        self.config.daily_cap
    }

    fn reward_bound(&self) -> f64 {
        self.instance.p_max
    }

    fn reset(&self) -> SopState {
        let n = self.instance.city_count();
        let mut visited = vec![false; n];
        visited[self.instance.depot] = true;
        let mut profits = self.instance.profit_init.clone();
        profits[self.instance.depot] = 0.0;
        SopState {
            profits,
            visited,
            current_city: self.instance.depot,
            day: 0,
            remaining_budget: self.config.budget,
            day_distance: 0.0,
            day_profits: Vec::new(),
        }
    }

    fn day(&self, state: &SopState) -> usize {
        state.day
    }

    fn remaining_budget(&self, state: &SopState) -> usize {
        state.remaining_budget
    }

    fn legal_mask(&self, state: &SopState) -> Vec<bool> {
        let open = state.remaining_budget > 0
            && state.day < self.config.horizon
            && state.day_distance < self.instance.daily_limit;
        (0..self.instance.city_count())
            .map(|c| open && !state.visited[c] && c != state.current_city)
            .collect()
    }

    fn primitive_step(&self, state: &SopState, city: usize) -> Result<(SopState, f64)> {
        if state.remaining_budget == 0 {
            return Err(Error::BudgetExhausted);
        }
        if !self.legal_mask(state).get(city).copied().unwrap_or(false) {
            return Err(Error::MaskedAction { action: city });
        }
        let mut next = state.clone();
        let before = sop_day_profit(&state.day_profits, self.config.rho)
            - self.instance.penalty_rate * self.excess(state.day_distance);
        next.day_distance += self.instance.distance(state.current_city, city);
        next.day_profits.push(state.profits[city]);
        next.profits[city] = 0.0;
        next.visited[city] = true;
        next.current_city = city;
        next.remaining_budget -= 1;
        let after = sop_day_profit(&next.day_profits, self.config.rho)
            - self.instance.penalty_rate * self.excess(next.day_distance);
        Ok((next, after - before))
    }

    fn end_of_day<R: Rng + ?Sized>(&self, state: &SopState, rng: &mut R) -> (SopState, f64) {
        let mut next = state.clone();
        if self.instance.noise_scale > 0.0 {
            let noise = Normal::new(0.0, self.instance.noise_scale).expect("finite noise scale");
            for c in 0..next.profits.len() {
                if !next.visited[c] {
                    let p = next.profits[c] + noise.sample(rng);
                    next.profits[c] = p.clamp(0.0, self.instance.p_max);
                }
            }
        }
        next.day_distance = 0.0;
        next.day_profits.clear();
        next.day += 1;
        (next, 0.0)
    }

    fn feature_dim(&self) -> usize {
        SOP_FEATURES
    }

    fn node_features(&self, state: &SopState, decision_remaining: f64) -> Tensor {
        let n = self.instance.city_count();
        let inst = &self.instance;
        let budget = state.remaining_budget as f64 / self.config.budget.max(1) as f64;
        let day = state.day as f64 / self.config.horizon.max(1) as f64;
        let used = state.day_distance / inst.daily_limit;
        let mut out = Tensor::zeros(n, SOP_FEATURES);
        for c in 0..n {
            let row = [
                inst.city_coords[c][0],
                inst.city_coords[c][1],
                state.profits[c] / inst.p_max.max(f64::MIN_POSITIVE),
                state.visited[c] as u8 as f64,
                (c == state.current_city) as u8 as f64,
                inst.distance(state.current_city, c) / std::f64::consts::SQRT_2,
                (!state.visited[c] && self.penalty_free(state, c)) as u8 as f64,
                budget,
                day,
                used,
                decision_remaining,
            ];
            for (j, x) in row.into_iter().enumerate() {
                out.set(c, j, x);
            }
        }
        out
    }

    fn adjacency(&self) -> &Arc<Tensor> {
        &self.adjacency
    }
}
