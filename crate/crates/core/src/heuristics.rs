//! Baseline policies: budget schedules combined with greedy node or city
//! selection, and a genetic algorithm over daily budget allocations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{stream_rng, AimState, Environment, GraphInstance, NodeStatus, SopEnv, SopState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Spread K evenly over the horizon, remainder to the earliest stages.
    Average,
    /// Spend everything at stage 0.
    Normal,
    /// Spend only at the first stage of each cycle.
    Static,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub kind: ScheduleKind,
    pub cycle_length: usize,
}

impl BudgetSchedule {
    pub fn average() -> Self {
        Self {
            kind: ScheduleKind::Average,
            cycle_length: 1,
        }
    }

    pub fn normal() -> Self {
        Self {
            kind: ScheduleKind::Normal,
            cycle_length: 1,
        }
    }

    pub fn fixed_cycle(cycle_length: usize) -> Self {
        Self {
            kind: ScheduleKind::Static,
            cycle_length,
        }
    }
}

fn spread(total: usize, parts: usize, i: usize) -> usize {
    total / parts + usize::from(i < total % parts)
}

/// Budget for `stage` out of `horizon`, ignoring what has already been spent.
pub fn budget_allocate(schedule: &BudgetSchedule, k: usize, horizon: usize, stage: usize) -> usize {
    assert!(stage < horizon, "stage {stage} outside horizon {horizon}");
    match schedule.kind {
        ScheduleKind::Average => spread(k, horizon, stage),
        ScheduleKind::Normal => {
            if stage == 0 {
                k
            } else {
                0
            }
        }
        ScheduleKind::Static => {
            let cycle = schedule.cycle_length.max(1);
            if !stage.is_multiple_of(cycle) {
                return 0;
            }
            let starts = horizon.div_ceil(cycle);
            spread(k, starts, stage / cycle)
        }
    }
}

/// Top `count` entries of `scores` among allowed ones, ties to the lowest index.
fn top_by(scores: &[f64], allowed: &[bool], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| allowed[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

fn seedable(state: &AimState) -> Vec<bool> {
    state
        .status
        .iter()
        .map(|&s| s == NodeStatus::Inactive)
        .collect()
}

pub fn select_by_degree(graph: &GraphInstance, state: &AimState, count: usize) -> Vec<usize> {
    let scores: Vec<f64> = (0..graph.node_count)
        .map(|u| graph.out_degree(u) as f64)
        .collect();
    top_by(&scores, &seedable(state), count.min(state.remaining_budget))
}

/// Expected immediate influence `s_v = Σ_{u ∈ N_in(v)} p(u, v)`.
pub fn influence_scores(graph: &GraphInstance) -> Vec<f64> {
    (0..graph.node_count)
        .map(|v| graph.in_neighbors(v).iter().map(|(_, p)| p).sum())
        .collect()
}

pub fn select_by_score(graph: &GraphInstance, state: &AimState, count: usize) -> Vec<usize> {
    top_by(
        &influence_scores(graph),
        &seedable(state),
        count.min(state.remaining_budget),
    )
}

/// Highest-profit city reachable within today's remaining limit; if none is,
/// the highest-profit legal city. Ties go to the lowest index.
pub fn sop_greedy_policy(env: &SopEnv, state: &SopState) -> Option<usize> {
    let mask = env.legal_mask(state);
    let free: Vec<bool> = mask
        .iter()
        .enumerate()
        .map(|(c, &m)| m && env.penalty_free(state, c))
        .collect();
    let pool = if free.iter().any(|&f| f) {
        &free
    } else {
        &mask
    };
    top_by(&state.profits, pool, 1).first().copied()
}

/// Runs one episode where `allocate` fixes each day's budget and `pick`
/// chooses primitive actions one at a time. Day-end randomness comes from
/// `stream_rng(instance_id, episode, day)`. Returns the undiscounted return.
pub fn run_allocation_episode<E, A, P>(
    env: &E,
    episode: u64,
    mut allocate: A,
    mut pick: P,
) -> Result<f64>
where
    E: Environment,
    A: FnMut(&E::State, usize) -> usize,
    P: FnMut(&E::State) -> Option<usize>,
{
    let mut state = env.reset();
    let mut total = 0.0;
    for day in 0..env.horizon() {
        let b = allocate(&state, day).min(env.remaining_budget(&state));
        for _ in 0..b {
            if !env.legal_mask(&state).iter().any(|&m| m) {
                break;
            }
            let Some(a) = pick(&state) else { break };
            let (next, r) = env.primitive_step(&state, a)?;
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AimSelector {
    Degree,
    Score,
}

/// Schedule plus selector for AIM. Selection is static within a day, so one
/// node at a time equals taking the top-b set.
pub fn aim_heuristic_episode(
    env: &crate::env::AimEnv,
    schedule: &BudgetSchedule,
    selector: AimSelector,
    episode: u64,
) -> Result<f64> {
    let g = env.graph();
    let (k, t) = (env.total_budget(), env.horizon());
    run_allocation_episode(
        env,
        episode,
        |_, day| budget_allocate(schedule, k, t, day),
        |s| {
            match selector {
                AimSelector::Degree => select_by_degree(g, s, 1),
                AimSelector::Score => select_by_score(g, s, 1),
            }
            .first()
            .copied()
        },
    )
}

pub fn sop_allocation_episode(env: &SopEnv, allocation: &[usize], episode: u64) -> Result<f64> {
    run_allocation_episode(
        env,
        episode,
        |_, day| allocation[day],
        |s| sop_greedy_policy(env, s),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub crossover_rate: f64,
    pub elitism: usize,
    /// Common evaluation episodes shared by every individual.
    pub eval_episodes: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 20,
            generations: 30,
            mutation_rate: 0.2,
            crossover_rate: 0.8,
            elitism: 2,
            eval_episodes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub allocation: Vec<usize>,
    pub fitness: f64,
    /// Best fitness after initialisation and after each generation.
    pub history: Vec<f64>,
}

/// Clamps every gene to `[0, cap]` then moves the surplus or deficit across
/// genes in proportion to their room, so the total becomes exactly `k`.
pub fn repair_allocation(alloc: &mut [usize], k: usize, cap: usize) -> Result<()> {
    let t = alloc.len();
    if k > t * cap {
        return Err(Error::Infeasible(format!(
            "budget {k} cannot be spread over {t} days of at most {cap}"
        )));
    }
    alloc.iter_mut().for_each(|a| *a = (*a).min(cap));
    let sum: usize = alloc.iter().sum();
    if sum == k {
        return Ok(());
    }
    let (need, grow) = if sum < k {
        (k - sum, true)
    } else {
        (sum - k, false)
    };
    let room: Vec<usize> = alloc
        .iter()
        .map(|&a| if grow { cap - a } else { a })
        .collect();
    let total_room: usize = room.iter().sum();
    let mut moved = 0;
    for (a, &r) in alloc.iter_mut().zip(&room) {
        let share = r * need / total_room;
        if grow {
            *a += share;
        } else {
            *a -= share;
        }
        moved += share;
    }
    let mut i = 0;
    while moved < need {
        let ok = if grow { alloc[i] < cap } else { alloc[i] > 0 };
        if ok {
            if grow {
                alloc[i] += 1;
            } else {
                alloc[i] -= 1;
            }
            moved += 1;
        }
        i = (i + 1) % t;
    }
    Ok(())
}

/// Genetic search over daily allocations; each individual is scored by the
/// mean return of `episode(alloc, e)` over the same evaluation episodes.
pub fn ga_optimize<F>(
    horizon: usize,
    k: usize,
    cap: usize,
    config: &GaConfig,
    seed: u64,
    episode: F,
) -> Result<GaResult>
where
    F: Fn(&[usize], u64) -> Result<f64>,
{
    if config.population < 2 {
        return Err(Error::Config("GA population must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fitness = |a: &[usize]| -> Result<f64> {
        let mut s = 0.0;
        for e in 0..config.eval_episodes.max(1) {
            s += episode(a, e as u64)?;
        }
        Ok(s / config.eval_episodes.max(1) as f64)
    };
    let mut pop: Vec<(Vec<usize>, f64)> = Vec::with_capacity(config.population);
    for _ in 0..config.population {
        let mut a: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..=cap)).collect();
        repair_allocation(&mut a, k, cap)?;
        let f = fitness(&a)?;
        pop.push((a, f));
    }
    let by_fitness = |p: &mut Vec<(Vec<usize>, f64)>| {
        p.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    };
    by_fitness(&mut pop);
    let mut history = vec![pop[0].1];
    for _ in 0..config.generations {
        let elite = config.elitism.min(config.population);
        let mut next: Vec<(Vec<usize>, f64)> = pop[..elite].to_vec();
        while next.len() < config.population {
            let pa = tournament(&pop, &mut rng);
            let pb = tournament(&pop, &mut rng);
            let mut child = pa.to_vec();
            if rng.random::<f64>() < config.crossover_rate {
                for (c, &b) in child.iter_mut().zip(pb) {
                    if rng.random::<bool>() {
                        *c = b;
                    }
                }
            }
            for i in 0..horizon {
                if rng.random::<f64>() < config.mutation_rate && horizon > 1 {
                    let j = rng.random_range(0..horizon);
                    if child[i] > 0 && child[j] < cap && i != j {
                        child[i] -= 1;
                        child[j] += 1;
                    }
                }
            }
            repair_allocation(&mut child, k, cap)?;
            let f = fitness(&child)?;
            next.push((child, f));
        }
        pop = next;
        by_fitness(&mut pop);
        history.push(pop[0].1);
    }
    let (allocation, fitness) = pop.swap_remove(0);
    Ok(GaResult {
        allocation,
        fitness,
        history,
    })
}

fn tournament<'a, R: Rng>(pop: &'a [(Vec<usize>, f64)], rng: &mut R) -> &'a [usize] {
    let a = rng.random_range(0..pop.len());
    let b = rng.random_range(0..pop.len());
    // Population is sorted best-first, so the lower index wins.
    &pop[a.min(b)].0
}

/// Every allocation of exactly `k` over `horizon` days with per-day cap.
pub fn all_allocations(horizon: usize, k: usize, cap: usize) -> Vec<Vec<usize>> {
    fn rec(
        day: usize,
        left: usize,
        cap: usize,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        h: usize,
    ) {
        if day == h {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for a in 0..=left.min(cap) {
            cur.push(a);
            rec(day + 1, left - a, cap, cur, out, h);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, cap, &mut Vec::new(), &mut out, horizon);
    out
}
