//! Validation protocols run against a trained agent: duration ordering,
//! Monte-Carlo geometry checks and value calibration.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_ci, kendall_tau_b, mean_sem, spearman, Interval};
use crate::env::{sample_weighted, Environment};
use crate::geometry::chordal_distance;
use crate::trainer::{execute_subgoal, play_episode, Agent, HlTransition, PlayMode};
use crate::Result;

/// Episode ids used for protocol rollouts, disjoint from training,
/// validation and final evaluation ids.
pub const PROTOCOL_EPISODE_BASE: u64 = 3 << 40;

/// One executed high-level decision with its primitive chain.
#[derive(Clone, Debug)]
pub struct ExecutedDecision<S> {
    pub instance: usize,
    pub transition: HlTransition<S>,
    /// `τ + 1` states from the decision state to the endpoint.
    pub chain: Vec<S>,
}

/// Greedy rollouts that keep every primitive chain.
pub fn collect_decisions<E: Environment, R: Rng + ?Sized>(
    envs: &[E],
    agent: Agent<'_>,
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<ExecutedDecision<E::State>>> {
    let mut out = Vec::new();
    for (i, env) in envs.iter().enumerate() {
        for e in 0..episodes {
            let rec = play_episode(
                env,
                i,
                agent,
                PlayMode::Eval,
                PROTOCOL_EPISODE_BASE + e as u64,
                true,
                rng,
            )?;
            for (t, chain) in rec.game.transitions.into_iter().zip(rec.chains) {
                out.push(ExecutedDecision {
                    instance: i,
                    transition: t,
                    chain,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallConfig {
    /// States ranked per seed.
    pub states: usize,
    /// Executions of each subgoal per state.
    pub executions: usize,
}

impl KendallConfig {
    pub fn desk() -> Self {
        Self {
            states: 20,
            executions: 5,
        }
    }

    pub fn full() -> Self {
        Self {
            states: 100,
            executions: 5,
        }
    }
}

/// Per-state correlations of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallSeed {
    pub per_state: Vec<f64>,
    /// States where one ranking was constant. Tau-b is undefined there and
    /// they are left out of the mean.
    pub undefined_states: usize,
    pub mean_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallReport {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub sem: f64,
}

impl KendallReport {
    pub fn from_seeds(seeds: &[KendallSeed]) -> Self {
        let per_seed: Vec<f64> = seeds.iter().map(|s| s.mean_tau).collect();
        let (mean, sem) = mean_sem(&per_seed);
        Self {
            per_seed,
            mean,
            sem,
        }
    }
}

/// Ranks every subgoal at sampled decision states by `σ` and by its mean
/// executed duration, and averages tau-b over states.
///
/// States are drawn uniformly from the decision points of one greedy
/// rollout per held-out instance. Each execution samples a budget from the
/// budget actor and runs the greedy low-level policy.
pub fn kendall_protocol<E: Environment, R: Rng + ?Sized>(
    envs: &[E],
    agent: Agent<'_>,
    config: &KendallConfig,
    rng: &mut R,
) -> Result<KendallSeed> {
    let mut decisions = collect_decisions(envs, agent, 1, rng)?;
    decisions.retain(|d| envs[d.instance].feasible_budget(&d.transition.state) > 0);
    let chosen = sample(rng, decisions.len(), config.states.min(decisions.len()));
    let model = agent.model;
    let mut per_state = Vec::with_capacity(chosen.len());
    let mut undefined = 0;
    for idx in chosen.iter() {
        let d = &decisions[idx];
        let env = &envs[d.instance];
        let state = &d.transition.state;
        let h = model.encode(env, state);
        let cap = env.feasible_budget(state);
        let mut sigma = Vec::with_capacity(model.subgoal_count());
        let mut duration = Vec::with_capacity(model.subgoal_count());
        for z in 0..model.subgoal_count() {
            sigma.push(model.sigma(&h, z));
            let dist = model.budget_distribution(&h, z, cap)?;
            let emb = model.subgoal(z).to_vec();
            let mut total = 0usize;
            for _ in 0..config.executions {
                let b = sample_weighted(&dist, rng);
                let seg = execute_subgoal(env, agent.low_level, &emb, state, b, 0.0, rng)?;
                total += seg.duration();
            }
            duration.push(total as f64 / config.executions as f64);
        }
        match kendall_tau_b(&sigma, &duration) {
            Some(t) => per_state.push(t),
            None => undefined += 1,
        }
    }
    // A model with no informative state scores zero.
    let mean_tau = mean_sem(&per_state).0;
    Ok(KendallSeed {
        per_state,
        undefined_states: undefined,
        mean_tau,
    })
}

/// Per-subgoal summary inside [`GeometryDiagnostics`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgoalGeometry {
    pub subgoal: usize,
    pub count: usize,
    pub margin: f64,
    pub mean_duration: f64,
    pub duration_sem: f64,
    pub mean_push_residual: f64,
    /// `(m − residual − ε̂_dyn) / (κ + ε̂_cap)`.
    pub duration_bound: f64,
    pub bound_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryDiagnostics {
    pub transitions: usize,
    pub primitive_steps: usize,
    pub kappa: f64,
    /// Mean of `(d(h(s'_t), h(s'_{t+1})) − κ)₊²` over primitive steps.
    pub cap_risk: f64,
    pub eps_cap: f64,
    /// Mean chordal error of the dynamics against the encoded chain endpoint.
    pub eps_dyn: f64,
    pub mean_displacement: f64,
    pub mean_duration: f64,
    /// Mean and s.e. of `d(h(s'_t), h(s'_{t+τ}))` over transitions.
    pub macro_mean: f64,
    pub macro_sem: f64,
    /// `mean τ · (κ + ε̂_cap)`.
    pub macro_bound: f64,
    pub macro_holds: bool,
    pub subgoals: Vec<SubgoalGeometry>,
    pub kendall_tau: Option<f64>,
}

impl GeometryDiagnostics {
    /// Both Monte-Carlo checks within three standard errors.
    pub fn holds(&self) -> bool {
        self.macro_holds && self.subgoals.iter().all(|s| s.bound_holds)
    }
}

/// Measures the geometry constants on executed decisions and checks the
/// macro-micro inequality and the per-subgoal duration lower bound.
pub fn geometry_diagnostics<E: Environment>(
    envs: &[E],
    agent: Agent<'_>,
    decisions: &[ExecutedDecision<E::State>],
    kappa: f64,
) -> GeometryDiagnostics {
    let model = agent.model;
    let m = model.subgoal_count();
    let margins = model.margins();
    let mut sq_excess = 0.0;
    let mut steps = 0usize;
    let mut macro_d = Vec::with_capacity(decisions.len());
    let mut durations = vec![Vec::new(); m];
    let mut residuals = vec![Vec::new(); m];
    let mut dyn_err = 0.0;
    let mut displacement = 0.0;
    for d in decisions {
        let env = &envs[d.instance];
        let latents: Vec<Vec<f64>> = d.chain.iter().map(|s| model.encode(env, s)).collect();
        for w in latents.windows(2) {
            let e = (chordal_distance(&w[0], &w[1]) - kappa).max(0.0);
            sq_excess += e * e;
            steps += 1;
        }
        let h = &latents[0];
        let end = latents.last().unwrap();
        macro_d.push(chordal_distance(h, end));
        let z = d.transition.subgoal;
        let (g, _) = model.dynamics_step(h, z);
        let disp = chordal_distance(h, &g);
        displacement += disp;
        dyn_err += chordal_distance(&g, end);
        durations[z].push(d.transition.duration as f64);
        residuals[z].push((margins[z] - disp).max(0.0));
    }
    let n = decisions.len().max(1) as f64;
    let cap_risk = if steps > 0 {
        sq_excess / steps as f64
    } else {
        0.0
    };
    let eps_cap = cap_risk.sqrt();
    let eps_dyn = dyn_err / n;
    let mean_duration = steps as f64 / n;
    let (macro_mean, macro_sem) = mean_sem(&macro_d);
    let macro_bound = mean_duration * (kappa + eps_cap);
    let macro_holds = macro_mean <= macro_bound + 3.0 * macro_sem;

    let subgoals = (0..m)
        .filter(|&z| !durations[z].is_empty())
        .map(|z| {
            let (mean_duration, duration_sem) = mean_sem(&durations[z]);
            let mean_push_residual = mean_sem(&residuals[z]).0;
            let duration_bound = (margins[z] - mean_push_residual - eps_dyn) / (kappa + eps_cap);
            SubgoalGeometry {
                subgoal: z,
                count: durations[z].len(),
                margin: margins[z],
                mean_duration,
                duration_sem,
                mean_push_residual,
                duration_bound,
                bound_holds: mean_duration >= duration_bound - 3.0 * duration_sem,
            }
        })
        .collect();

    GeometryDiagnostics {
        transitions: decisions.len(),
        primitive_steps: steps,
        kappa,
        cap_risk,
        eps_cap,
        eps_dyn,
        mean_displacement: displacement / n,
        mean_duration,
        macro_mean,
        macro_sem,
        macro_bound,
        macro_holds,
        subgoals,
        kendall_tau: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub pairs: usize,
    pub kendall: Option<Interval>,
    pub spearman: Option<Interval>,
}

/// Rank agreement between predicted latent displacement and the change in
/// value target, with percentile-bootstrap intervals.
pub fn calibration_pairs<E: Environment>(
    envs: &[E],
    agent: Agent<'_>,
    decisions: &[ExecutedDecision<E::State>],
) -> Vec<(f64, f64)> {
    let model = agent.model;
    decisions
        .iter()
        .map(|d| {
            let h = model.encode(&envs[d.instance], &d.transition.state);
            let disp = model.displacement(&h, d.transition.subgoal);
            let dv = (d.transition.next_root_value - d.transition.search_value).abs();
            (disp, dv)
        })
        .collect()
}

pub fn calibration<R: Rng + ?Sized>(
    pairs: &[(f64, f64)],
    resamples: usize,
    rng: &mut R,
) -> CalibrationReport {
    let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
        (
            idx.iter().map(|&i| x[i]).collect(),
            idx.iter().map(|&i| y[i]).collect(),
        )
    };
    let kendall = bootstrap_ci(pairs.len(), resamples, 0.95, rng, |idx| {
        let (a, b) = pick(idx);
        kendall_tau_b(&a, &b)
    });
    let spearman = bootstrap_ci(pairs.len(), resamples, 0.95, rng, |idx| {
        let (a, b) = pick(idx);
        spearman(&a, &b)
    });
    CalibrationReport {
        pairs: pairs.len(),
        kendall,
        spearman,
    }
}
