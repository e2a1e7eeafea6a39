//! Rollouts of the full two-level agent: search picks a subgoal, the budget
//! head picks how many primitive steps it gets, the low-level Q network
//! executes them, then the environment advances the day.

use rand::Rng;

use super::replay::{macro_reward, Game, HlTransition, LlTransition};
use crate::env::{any_legal, masked_argmax, sample_weighted, stream_rng, Environment};
use crate::heuristics::{budget_allocate, BudgetSchedule};
use crate::planner::{run_search, visit_policy, SearchConfig};
use crate::world_model::{LowLevelQ, WorldModel};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlayMode {
    /// Root noise, sampled subgoals and budgets, ε-greedy primitives. During
    /// warm-up budgets come from the average schedule instead of the head.
    Train { epsilon: f64, warmup: bool },
    /// No noise, most-visited subgoal, modal budget, greedy primitives.
    Eval,
}

#[derive(Clone, Copy)]
pub struct Agent<'a> {
    pub model: &'a WorldModel,
    pub low_level: &'a LowLevelQ,
    pub search: &'a SearchConfig,
    pub ll_discount: f64,
}

/// Primitive chain of one subgoal execution.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment<S> {
    /// `τ + 1` states, starting at the decision state.
    pub states: Vec<S>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl<S> Segment<S> {
    pub fn duration(&self) -> usize {
        self.actions.len()
    }
}

/// Runs up to `budget` primitive steps, stopping early when no action is
/// legal. Exploration draws from `rng` only when `epsilon > 0`.
pub fn execute_subgoal<E: Environment, R: Rng + ?Sized>(
    env: &E,
    low_level: &LowLevelQ,
    z: &[f64],
    state: &E::State,
    budget: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Segment<E::State>> {
    let mut seg = Segment {
        states: vec![state.clone()],
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    for i in 0..budget {
        let cur = seg.states.last().unwrap();
        let mask = env.legal_mask(cur);
        if !any_legal(&mask) {
            break;
        }
        let explore = epsilon > 0.0 && rng.random::<f64>() < epsilon;
        let action = if explore {
            let legal: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
            legal[rng.random_range(0..legal.len())]
        } else {
            let remaining = (budget - i) as f64 / budget as f64;
            let q = low_level.q_values(env, cur, remaining, z);
            masked_argmax(&q, &mask).expect("mask has a legal action")
        };
        let (next, r) = env.primitive_step(cur, action)?;
        seg.actions.push(action);
        seg.rewards.push(r);
        seg.states.push(next);
    }
    Ok(seg)
}

pub struct EpisodeRecord<S> {
    pub game: Game<S>,
    pub ll: Vec<LlTransition<S>>,
    /// Primitive chain of every decision, kept only when requested.
    pub chains: Vec<Vec<S>>,
    pub total_reward: f64,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Plays one episode. Day-end randomness comes from
/// `stream_rng(instance_id, episode, day)` so that different policies can be
/// compared on common random numbers; everything else draws from `rng`.
pub fn play_episode<E: Environment, R: Rng + ?Sized>(
    env: &E,
    instance: usize,
    agent: Agent<'_>,
    mode: PlayMode,
    episode: u64,
    keep_chains: bool,
    rng: &mut R,
) -> Result<EpisodeRecord<E::State>> {
    let model = agent.model;
    let horizon = env.horizon();
    let mut state = env.reset();
    let mut hl = Vec::with_capacity(horizon);
    let mut ll = Vec::new();
    let mut chains = Vec::new();
    let mut total = 0.0;
    let (train, epsilon, warmup) = match mode {
        PlayMode::Train { epsilon, warmup } => (true, epsilon, warmup),
        PlayMode::Eval => (false, 0.0, false),
    };
    for day in 0..horizon {
        let h = model.encode(env, &state);
        let search = run_search(model, &h, horizon - day, agent.search, train, rng);
        let subgoal = if train {
            sample_weighted(&search.policy, rng)
        } else {
            argmax(&visit_policy(&search.visits, 0.0))
        };
        let cap = env.feasible_budget(&state);
        let budget = if warmup {
            budget_allocate(&BudgetSchedule::average(), env.total_budget(), horizon, day).min(cap)
        } else {
            let dist = model.budget_distribution(&h, subgoal, cap)?;
            if train {
                sample_weighted(&dist, rng)
            } else {
                argmax(&dist)
            }
        };
        let z = model.subgoal(subgoal).to_vec();
        let seg = execute_subgoal(env, agent.low_level, &z, &state, budget, epsilon, rng)?;
        let endpoint = seg.states.last().unwrap().clone();
        let mut day_rng = stream_rng(env.instance_id(), episode, day as u64);
        let (next, day_reward) = env.end_of_day(&endpoint, &mut day_rng);
        let tau = seg.duration();
        for i in 0..tau {
            let last = i + 1 == tau;
            ll.push(LlTransition {
                instance,
                subgoal,
                state: seg.states[i].clone(),
                action: seg.actions[i],
                reward: seg.rewards[i] + if last { day_reward } else { 0.0 },
                next_state: seg.states[i + 1].clone(),
                remaining_before: (budget - i) as f64 / budget as f64,
                remaining_after: (budget - i - 1) as f64 / budget as f64,
                terminal: last,
            });
        }
        total += seg.rewards.iter().sum::<f64>() + day_reward;
        hl.push(HlTransition {
            day,
            state: state.clone(),
            subgoal,
            budget,
            cap,
            duration: tau,
            macro_reward: macro_reward(&seg.rewards, day_reward, agent.ll_discount),
            primitive_rewards: seg.rewards,
            day_end_reward: day_reward,
            endpoint,
            next_state: next.clone(),
            search_policy: search.policy,
            search_value: search.root_value,
            next_root_value: 0.0,
        });
        if keep_chains {
            chains.push(seg.states);
        }
        state = next;
    }
    for k in 0..hl.len().saturating_sub(1) {
        hl[k].next_root_value = hl[k + 1].search_value;
    }
    Ok(EpisodeRecord {
        game: Game {
            instance,
            transitions: hl,
        },
        ll,
        chains,
        total_reward: total,
    })
}
