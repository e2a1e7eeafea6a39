//! Gradient updates: the combined high-level objective (unrolled model
//! losses, geometry terms and budget actor-critic) and the low-level DQN.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::replay::{Game, LlTransition};
use super::TrainConfig;
use crate::diff::{optimizer_step_filtered, OptimizerConfig, Tape, Tensor, Var};
use crate::env::{any_legal, Environment};
use crate::geometry::{
    cap_loss, displacement, duration_label, order_loss, push_loss, unified_loss, MtsLossConfig,
    UnifiedTerms,
};
use crate::world_model::{LowLevelQ, WorldModel, BUDGET_PREFIX};

/// Component values of one update, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub policy: f64,
    pub value: f64,
    pub reward: f64,
    pub consistency: f64,
    pub cap: f64,
    pub push: f64,
    pub order: f64,
    pub margin_reg: f64,
    pub unified: f64,
    pub critic: f64,
    pub actor: f64,
    pub entropy: f64,
    pub budget: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        let pairs = [
            (&mut self.policy, other.policy),
            (&mut self.value, other.value),
            (&mut self.reward, other.reward),
            (&mut self.consistency, other.consistency),
            (&mut self.cap, other.cap),
            (&mut self.push, other.push),
            (&mut self.order, other.order),
            (&mut self.margin_reg, other.margin_reg),
            (&mut self.unified, other.unified),
            (&mut self.critic, other.critic),
            (&mut self.actor, other.actor),
            (&mut self.entropy, other.entropy),
            (&mut self.budget, other.budget),
            (&mut self.total, other.total),
            (&mut self.grad_norm, other.grad_norm),
        ];
        for (a, b) in pairs {
            *a += weight * b;
        }
    }
}

/// A high-level minibatch: unroll roots, independently drawn partners for
/// the order loss, and primitive pairs for the cap loss.
pub struct HlBatch<'a, E: Environment> {
    pub envs: &'a [E],
    pub items: Vec<(&'a Game<E::State>, usize)>,
    pub order_partners: Vec<(&'a Game<E::State>, usize)>,
    pub cap_pairs: Vec<&'a LlTransition<E::State>>,
}

fn features<E: Environment>(env: &E, state: &E::State) -> (Arc<Tensor>, Tensor) {
    (Arc::clone(env.adjacency()), env.node_features(state, 0.0))
}

fn column(values: Vec<f64>) -> Tensor {
    Tensor::from_vec(values.len(), 1, values)
}

fn mse(tape: &mut Tape, pred: Var, target: Tensor) -> Var {
    let t = tape.input(target);
    let d = tape.sub(pred, t);
    let sq = tape.square(d);
    tape.mean(sq)
}

/// Budget actor-critic on decision latents `h` (`B x d`) and subgoal rows `z`.
/// Returns `w_bc·critic + w_ba·actor − w_ent·β·entropy`; the actor and
/// entropy terms are left out when `actor` is false. The advantage baseline
/// is `baseline` when given, otherwise the critic's current output.
#[allow(clippy::too_many_arguments)]
pub fn budget_loss<S>(
    tape: &mut Tape,
    model: &WorldModel,
    items: &[(&Game<S>, usize)],
    h: Var,
    z: Var,
    cfg: &TrainConfig,
    actor: bool,
    baseline: Option<&[f64]>,
    bd: &mut LossBreakdown,
) -> Var {
    let b = items.len() as f64;
    let targets: Vec<f64> = items
        .iter()
        .map(|(g, k)| {
            let t = &g.transitions[*k];
            t.macro_reward + cfg.discount * t.next_root_value
        })
        .collect();
    let v = model.critic_tape(tape, h, z);
    let values = match baseline {
        Some(b) => b.to_vec(),
        None => tape.value(v).data().to_vec(),
    };
    let critic = mse(tape, v, column(targets.clone()));
    bd.critic = tape.scalar(critic);
    let mut parts = vec![tape.scale(critic, cfg.w_critic)];
    if actor {
        let caps: Vec<usize> = items.iter().map(|(g, k)| g.transitions[*k].cap).collect();
        let logp = model.budget_log_probs_tape(tape, h, z, &caps);
        let width = model.config.budget.max_budget + 1;
        let mut weighted = Tensor::zeros(items.len(), width);
        for (i, (g, k)) in items.iter().enumerate() {
            let advantage = targets[i] - values[i];
            weighted.set(i, g.transitions[*k].budget, advantage);
        }
        let w = tape.input(weighted);
        let picked = tape.mul(w, logp);
        let s = tape.sum(picked);
        let actor_loss = tape.scale(s, -1.0 / b);
        let p = tape.exp(logp);
        let plogp = tape.mul(p, logp);
        let s = tape.sum(plogp);
        let entropy = tape.scale(s, -1.0 / b);
        bd.actor = tape.scalar(actor_loss);
        bd.entropy = tape.scalar(entropy);
        parts.push(tape.scale(actor_loss, cfg.w_actor));
        parts.push(tape.scale(entropy, -cfg.w_entropy * cfg.entropy_beta));
    }
    let total = tape.add_all(&parts);
    bd.budget = tape.scalar(total);
    total
}

/// The combined high-level loss on one tape.
pub fn hl_loss<E: Environment>(
    tape: &mut Tape,
    model: &WorldModel,
    batch: &HlBatch<'_, E>,
    cfg: &TrainConfig,
    mts: &MtsLossConfig,
    actor: bool,
) -> (Var, LossBreakdown) {
    hl_loss_frozen(tape, model, None, batch, cfg, mts, actor)
}

/// [`hl_loss`] with the stop-gradient quantities (consistency targets and
/// the advantage baseline) taken from `frozen` instead of `model`. Used to
/// check gradients against finite differences, where the detached terms
/// must stay fixed while parameters move.
pub fn hl_loss_frozen<E: Environment>(
    tape: &mut Tape,
    model: &WorldModel,
    frozen: Option<&WorldModel>,
    batch: &HlBatch<'_, E>,
    cfg: &TrainConfig,
    mts: &MtsLossConfig,
    actor: bool,
) -> (Var, LossBreakdown) {
    let source = frozen.unwrap_or(model);
    let mut bd = LossBreakdown::default();
    let items = &batch.items;
    let b = items.len();
    let m = model.subgoal_count();
    let d = model.config.latent_dim;
    let env_of = |g: &Game<E::State>| &batch.envs[g.instance];
    let roots: Vec<_> = items
        .iter()
        .map(|(g, k)| features(env_of(g), &g.transitions[*k].state))
        .collect();
    let h0 = model.encode_batch(tape, &roots);
    let z0: Vec<usize> = items
        .iter()
        .map(|(g, k)| g.transitions[*k].subgoal)
        .collect();

    let mut policy_terms = Vec::new();
    let mut value_terms = Vec::new();
    let mut reward_terms = Vec::new();
    let mut consistency_terms = Vec::new();
    let mut h = h0;
    let mut first_step: Option<(Var, Var)> = None;
    for u in 0..=cfg.unroll {
        let (logits, value) = model.predict_tape(tape, h);
        let mut target_p = Tensor::zeros(b, m);
        let mut target_v = vec![0.0; b];
        for (i, (g, k)) in items.iter().enumerate() {
            if let Some(t) = g.transitions.get(k + u) {
                for (j, &p) in t.search_policy.iter().enumerate() {
                    target_p.set(i, j, p);
                }
                target_v[i] = t.search_value;
            }
        }
        let logp = tape.log_softmax_rows(logits, None, 0.0);
        let tp = tape.input(target_p);
        let prod = tape.mul(tp, logp);
        let s = tape.sum(prod);
        policy_terms.push(tape.scale(s, -1.0 / b as f64));
        value_terms.push(mse(tape, value, column(target_v)));
        if u == cfg.unroll {
            break;
        }
        let zs: Vec<usize> = items
            .iter()
            .map(|(g, k)| g.transitions.get(k + u).map_or(0, |t| t.subgoal))
            .collect();
        let zr = model.subgoal_rows(tape, &zs);
        let (next, rhat) = model.dynamics_tape(tape, h, zr);
        let target_r: Vec<f64> = items
            .iter()
            .map(|(g, k)| g.transitions.get(k + u).map_or(0.0, |t| t.macro_reward))
            .collect();
        reward_terms.push(mse(tape, rhat, column(target_r)));
        if cfg.w_consistency > 0.0 {
            let mut target = Tensor::zeros(b, d);
            let mut mask = Tensor::zeros(b, d);
            let mut count = 0usize;
            for (i, (g, k)) in items.iter().enumerate() {
                if let Some(t) = g.transitions.get(k + u) {
                    let env = env_of(g);
                    let enc = source.encode(env, &t.next_state);
                    for (j, &x) in enc.iter().enumerate() {
                        target.set(i, j, x);
                        mask.set(i, j, 1.0);
                    }
                    count += 1;
                }
            }
            if count > 0 {
                let t = tape.input(target);
                let mk = tape.input(mask);
                let diff = tape.sub(next, t);
                let masked = tape.mul(diff, mk);
                let sq = tape.square(masked);
                let s = tape.sum(sq);
                consistency_terms.push(tape.scale(s, 1.0 / count as f64));
            }
        }
        if u == 0 {
            first_step = Some((next, zr));
        }
        h = next;
    }
    let (h1, zr0) = match first_step {
        Some(x) => x,
        None => {
            let zr = model.subgoal_rows(tape, &z0);
            (model.dynamics_tape(tape, h0, zr).0, zr)
        }
    };

    let policy = tape.add_all(&policy_terms);
    let value = tape.add_all(&value_terms);
    let reward = tape.add_all(&reward_terms);
    let consistency = tape.add_all(&consistency_terms);
    bd.policy = tape.scalar(policy);
    bd.value = tape.scalar(value);
    bd.reward = tape.scalar(reward);
    bd.consistency = tape.scalar(consistency);

    // Geometry terms.
    let (m0, m_all) = model.margin_rows(tape, &z0);
    let d0 = displacement(tape, h0, h1);
    let push = (mts.w_push > 0.0).then(|| push_loss(tape, m0, d0));
    let order = (mts.w_order > 0.0 && !batch.order_partners.is_empty()).then(|| {
        let partners: Vec<_> = batch
            .order_partners
            .iter()
            .map(|(g, k)| features(env_of(g), &g.transitions[*k].state))
            .collect();
        let zp: Vec<usize> = batch
            .order_partners
            .iter()
            .map(|(g, k)| g.transitions[*k].subgoal)
            .collect();
        let hp = model.encode_batch(tape, &partners);
        let zpr = model.subgoal_rows(tape, &zp);
        let (hp1, _) = model.dynamics_tape(tape, hp, zpr);
        let dp = displacement(tape, hp, hp1);
        let (mp, _) = model.margin_rows(tape, &zp);
        let sigma_a = tape.add(d0, m0);
        let sigma_b = tape.add(dp, mp);
        let labels: Vec<f64> = items
            .iter()
            .zip(&batch.order_partners)
            .map(|((ga, ka), (gb, kb))| {
                duration_label(ga.transitions[*ka].duration, gb.transitions[*kb].duration)
            })
            .collect();
        order_loss(tape, sigma_a, sigma_b, &labels)
    });
    let cap = (mts.w_cap > 0.0 && !batch.cap_pairs.is_empty()).then(|| {
        let env_ll = |t: &LlTransition<E::State>| &batch.envs[t.instance];
        let a: Vec<_> = batch
            .cap_pairs
            .iter()
            .map(|t| features(env_ll(t), &t.state))
            .collect();
        let c: Vec<_> = batch
            .cap_pairs
            .iter()
            .map(|t| features(env_ll(t), &t.next_state))
            .collect();
        let ha = model.encode_batch(tape, &a);
        let hc = model.encode_batch(tape, &c);
        cap_loss(tape, ha, hc, mts.kappa)
    });
    let (unified, ub) = unified_loss(
        tape,
        &UnifiedTerms {
            cap,
            push,
            order,
            margins: m_all,
        },
        mts,
    );
    bd.cap = ub.cap;
    bd.push = ub.push;
    bd.order = ub.order;
    bd.margin_reg = ub.margin_reg;
    bd.unified = ub.total;

    let baseline: Option<Vec<f64>> = frozen.map(|f| {
        items
            .iter()
            .map(|(g, k)| {
                let t = &g.transitions[*k];
                f.critic_value(&f.encode(env_of(g), &t.state), t.subgoal)
            })
            .collect()
    });
    let budget = budget_loss(
        tape,
        model,
        items,
        h0,
        zr0,
        cfg,
        actor,
        baseline.as_deref(),
        &mut bd,
    );

    let parts = [
        tape.scale(policy, cfg.w_policy),
        tape.scale(value, cfg.w_value),
        tape.scale(reward, cfg.w_reward),
        tape.scale(consistency, cfg.w_consistency),
        tape.scale(unified, cfg.lambda_mts),
        tape.scale(budget, cfg.lambda_budget),
    ];
    let total = tape.add_all(&parts);
    bd.total = tape.scalar(total);
    (total, bd)
}

fn optimizer_for(lr: f64, cfg: &TrainConfig) -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: lr,
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
        ..OptimizerConfig::default()
    }
}

/// One optimizer step on the combined high-level loss. With `actor` false
/// the budget actor is frozen and contributes no loss.
pub fn hl_update<E: Environment>(
    model: &mut WorldModel,
    batch: &HlBatch<'_, E>,
    cfg: &TrainConfig,
    mts: &MtsLossConfig,
    actor: bool,
) -> LossBreakdown {
    let mut tape = Tape::new();
    let (loss, mut bd) = hl_loss(&mut tape, model, batch, cfg, mts, actor);
    tape.backward(loss);
    model.params.zero_grad();
    tape.accumulate_param_grads(&mut model.params);
    let report = optimizer_step_filtered(&mut model.params, &optimizer_for(cfg.hl_lr, cfg), |n| {
        actor || !n.starts_with(BUDGET_PREFIX)
    });
    model.params.zero_grad();
    bd.grad_norm = report.grad_norm;
    bd
}

/// One optimizer step on the budget actor-critic loss alone.
pub fn budget_update<E: Environment>(
    model: &mut WorldModel,
    envs: &[E],
    items: &[(&Game<E::State>, usize)],
    cfg: &TrainConfig,
) -> LossBreakdown {
    let mut tape = Tape::new();
    let mut bd = LossBreakdown::default();
    let roots: Vec<_> = items
        .iter()
        .map(|(g, k)| features(&envs[g.instance], &g.transitions[*k].state))
        .collect();
    let h = model.encode_batch(&mut tape, &roots);
    let zs: Vec<usize> = items
        .iter()
        .map(|(g, k)| g.transitions[*k].subgoal)
        .collect();
    let z = model.subgoal_rows(&mut tape, &zs);
    let loss = budget_loss(&mut tape, model, items, h, z, cfg, true, None, &mut bd);
    tape.backward(loss);
    model.params.zero_grad();
    tape.accumulate_param_grads(&mut model.params);
    let report =
        optimizer_step_filtered(&mut model.params, &optimizer_for(cfg.hl_lr, cfg), |_| true);
    model.params.zero_grad();
    bd.total = bd.budget;
    bd.grad_norm = report.grad_norm;
    bd
}

/// `r` for a terminal step, otherwise `r + γ max_{legal a'} Q'(s', a')`.
pub fn dqn_target(
    reward: f64,
    terminal: bool,
    next_q: &[f64],
    next_mask: &[bool],
    gamma: f64,
) -> f64 {
    if terminal || !any_legal(next_mask) {
        return reward;
    }
    let best = next_q
        .iter()
        .zip(next_mask)
        .filter(|(_, &ok)| ok)
        .map(|(&q, _)| q)
        .fold(f64::NEG_INFINITY, f64::max);
    reward + gamma * best
}

/// Mean squared TD error of the low-level network against a frozen target.
pub fn ll_loss<E: Environment>(
    tape: &mut Tape,
    low_level: &LowLevelQ,
    target: &LowLevelQ,
    model: &WorldModel,
    envs: &[E],
    batch: &[&LlTransition<E::State>],
    gamma: f64,
) -> Var {
    let mut terms = Vec::with_capacity(batch.len());
    for t in batch {
        let env = &envs[t.instance];
        let z = model.subgoal(t.subgoal);
        let mask = env.legal_mask(&t.next_state);
        let y = if t.terminal || !any_legal(&mask) {
            t.reward
        } else {
            let next_q = target.q_values(env, &t.next_state, t.remaining_after, z);
            dqn_target(t.reward, false, &next_q, &mask, gamma)
        };
        let feats = env.node_features(&t.state, t.remaining_before);
        let q = low_level.q_tape(tape, env.adjacency(), &feats, z);
        let qa = tape.pick(q, t.action, 0);
        let diff = tape.add_scalar(qa, -y);
        terms.push(tape.square(diff));
    }
    let s = tape.add_all(&terms);
    tape.scale(s, 1.0 / batch.len().max(1) as f64)
}

pub fn ll_update<E: Environment>(
    low_level: &mut LowLevelQ,
    target: &LowLevelQ,
    model: &WorldModel,
    envs: &[E],
    batch: &[&LlTransition<E::State>],
    cfg: &TrainConfig,
) -> f64 {
    let mut tape = Tape::new();
    let loss = ll_loss(
        &mut tape,
        low_level,
        target,
        model,
        envs,
        batch,
        cfg.ll_discount,
    );
    let value = tape.scalar(loss);
    tape.backward(loss);
    low_level.params.zero_grad();
    tape.accumulate_param_grads(&mut low_level.params);
    optimizer_step_filtered(
        &mut low_level.params,
        &optimizer_for(cfg.ll_lr, cfg),
        |_| true,
    );
    low_level.params.zero_grad();
    value
}

/// Hard copy `Q' ← Q`.
pub fn sync_target(target: &mut LowLevelQ, low_level: &LowLevelQ) {
    target.params.copy_values_from(&low_level.params);
}
