//! Learned high-level model and the subgoal-conditioned low-level Q network.
//!
//! The high-level model has a graph encoder onto the unit sphere, a latent
//! dynamics head that jumps a whole subgoal execution at once, a
//! policy/value prediction head, a budget actor with feasibility masking and
//! a budget critic. All of them share the encoder.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{GraphEncoder, Linear, Mlp, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::env::Environment;
use crate::geometry::{chordal_distance, normalize, one_hot, MarginHead};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ssco-agent";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub max_budget: usize,
    pub mask_fill: f64,
}

impl BudgetConfig {
    pub fn new(max_budget: usize) -> Self {
        Self {
            max_budget,
            mask_fill: -1e9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Latent width `d`; subgoal embeddings use the same width.
    pub latent_dim: usize,
    pub hidden: usize,
    pub gnn_hidden: usize,
    pub subgoals: usize,
    pub budget: BudgetConfig,
    /// Standard deviation of the subgoal embedding initialisation.
    pub subgoal_init_scale: f64,
    /// Initial raw (pre-softplus) margin.
    pub margin_init: f64,
}

impl ModelConfig {
    pub fn for_env<E: Environment>(env: &E, latent_dim: usize, subgoals: usize) -> Self {
        Self {
            feature_dim: env.feature_dim(),
            latent_dim,
            hidden: 64,
            gnn_hidden: 32,
            subgoals,
            budget: BudgetConfig::new(env.max_decision_budget()),
            subgoal_init_scale: 1.0,
            margin_init: -1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget.max_budget < 1 {
            return Err(Error::Config("max_budget must be at least 1".into()));
        }
        if self.subgoals < 1 || self.latent_dim < 1 || self.hidden < 1 || self.gnn_hidden < 1 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

pub type Latent = Vec<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub encoder: GraphEncoder,
    /// `M x d` subgoal embeddings.
    pub dictionary: ParamId,
    pub dyn_trunk: Mlp,
    pub dyn_latent: Linear,
    pub dyn_reward: Linear,
    pub policy: Mlp,
    pub value: Mlp,
    pub budget: Mlp,
    pub critic: Mlp,
    pub margin: MarginHead,
}

/// Parameter-name prefix of the budget actor, used to freeze it during warm-up.
pub const BUDGET_PREFIX: &str = "budget.";

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.latent_dim;
        let mut ps = ParameterSet::new();
        let encoder = GraphEncoder::new(&mut ps, "enc", c.feature_dim, c.gnn_hidden, d, rng);
        let dict_data = (0..c.subgoals * d)
            .map(|_| {
                let g: f64 = rng.sample(rand_distr::StandardNormal);
                g * c.subgoal_init_scale
            })
            .collect();
        let dictionary = ps.add("subgoals", Tensor::from_vec(c.subgoals, d, dict_data));
        let dyn_trunk = Mlp::new(&mut ps, "dyn.trunk", &[2 * d, c.hidden, c.hidden], rng);
        let dyn_latent = Linear::new(&mut ps, "dyn.latent", c.hidden, d, rng);
        let dyn_reward = Linear::new(&mut ps, "dyn.reward", c.hidden, 1, rng);
        let policy = Mlp::new(&mut ps, "pred.policy", &[d, c.hidden, c.subgoals], rng);
        let value = Mlp::new(&mut ps, "pred.value", &[d, c.hidden, 1], rng);
        let budget = Mlp::new(
            &mut ps,
            "budget.actor",
            &[2 * d, c.hidden, c.budget.max_budget + 1],
            rng,
        );
        let critic = Mlp::new(&mut ps, "critic", &[2 * d, c.hidden, 1], rng);
        let margin = MarginHead::new(&mut ps, "margin", c.subgoals, c.margin_init);
        Ok(Self {
            config,
            params: ps,
            encoder,
            dictionary,
            dyn_trunk,
            dyn_latent,
            dyn_reward,
            policy,
            value,
            budget,
            critic,
            margin,
        })
    }

    pub fn subgoal_count(&self) -> usize {
        self.config.subgoals
    }

    pub fn subgoal(&self, z: usize) -> &[f64] {
        self.params.value(self.dictionary).row_slice(z)
    }

    // Inference paths.

    pub fn encode_features(&self, adjacency: &Tensor, features: &Tensor) -> Latent {
        let raw = self.encoder.infer(&self.params, adjacency, features);
        normalize(raw.data())
    }

    /// Decision-time latent of an environment state.
    pub fn encode<E: Environment>(&self, env: &E, state: &E::State) -> Latent {
        self.encode_features(env.adjacency(), &env.node_features(state, 0.0))
    }

    fn hz_row(&self, h: &[f64], z: usize) -> Tensor {
        let mut row = h.to_vec();
        row.extend_from_slice(self.subgoal(z));
        Tensor::row(row)
    }

    pub fn dynamics_step(&self, h: &[f64], z: usize) -> (Latent, f64) {
        let x = self.hz_row(h, z);
        let mut t = self.dyn_trunk.infer(&self.params, &x);
        t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let delta = self.dyn_latent.infer(&self.params, &t);
        let next: Vec<f64> = h.iter().zip(delta.data()).map(|(a, b)| a + b).collect();
        let reward = self.dyn_reward.infer(&self.params, &t).item();
        (normalize(&next), reward)
    }

    /// Softmax prior over subgoals and the scalar value.
    pub fn predict(&self, h: &[f64]) -> (Vec<f64>, f64) {
        let x = Tensor::row(h.to_vec());
        let logits = self.policy.infer(&self.params, &x);
        let value = self.value.infer(&self.params, &x).item();
        (softmax(logits.data()), value)
    }

    /// Distribution over `{0..=B_max}` with all mass on `{0..=cap}`.
    pub fn budget_distribution(&self, h: &[f64], z: usize, cap: usize) -> Result<Vec<f64>> {
        let logits = self.budget.infer(&self.params, &self.hz_row(h, z));
        masked_budget_softmax(logits.data(), cap, self.config.budget.mask_fill)
    }

    /// Log-probabilities of [`Self::budget_distribution`]; finite exactly on
    /// `{0..=cap}` even where the probabilities underflow.
    pub fn budget_log_probs(&self, h: &[f64], z: usize, cap: usize) -> Result<Vec<f64>> {
        let logits = self.budget.infer(&self.params, &self.hz_row(h, z));
        masked_budget_log_softmax(logits.data(), cap)
    }

    pub fn critic_value(&self, h: &[f64], z: usize) -> f64 {
        self.critic.infer(&self.params, &self.hz_row(h, z)).item()
    }

    pub fn margins(&self) -> Vec<f64> {
        self.margin.values(&self.params)
    }

    /// Predicted macro displacement `d(h, g(h, z))`.
    pub fn displacement(&self, h: &[f64], z: usize) -> f64 {
        chordal_distance(h, &self.dynamics_step(h, z).0)
    }

    /// Subgoal score `σ(s, z) = d_θ(s, z) + m(z)`.
    pub fn sigma(&self, h: &[f64], z: usize) -> f64 {
        self.displacement(h, z) + self.margins()[z]
    }

    // Tape paths; every batch argument is `B x d`.

    pub fn encode_tape(&self, tape: &mut Tape, adjacency: &Arc<Tensor>, features: &Tensor) -> Var {
        let x = tape.input(features.clone());
        let raw = self.encoder.forward(tape, &self.params, adjacency, x);
        tape.l2_normalize_rows(raw)
    }

    pub fn encode_batch(&self, tape: &mut Tape, items: &[(Arc<Tensor>, Tensor)]) -> Var {
        let rows: Vec<Var> = items
            .iter()
            .map(|(a, f)| self.encode_tape(tape, a, f))
            .collect();
        tape.concat_rows(&rows)
    }

    pub fn subgoal_rows(&self, tape: &mut Tape, z: &[usize]) -> Var {
        let dict = tape.param(&self.params, self.dictionary);
        tape.const_matmul(&one_hot(z, self.config.subgoals), dict)
    }

    /// Next latents (`B x d`, unit rows) and macro rewards (`B x 1`).
    pub fn dynamics_tape(&self, tape: &mut Tape, h: Var, z: Var) -> (Var, Var) {
        let x = tape.concat_cols(h, z);
        let t = self.dyn_trunk.forward(tape, &self.params, x);
        let t = tape.relu(t);
        let delta = self.dyn_latent.forward(tape, &self.params, t);
        let next = tape.add(h, delta);
        let next = tape.l2_normalize_rows(next);
        let reward = self.dyn_reward.forward(tape, &self.params, t);
        (next, reward)
    }

    /// Policy logits (`B x M`) and values (`B x 1`).
    pub fn predict_tape(&self, tape: &mut Tape, h: Var) -> (Var, Var) {
        let logits = self.policy.forward(tape, &self.params, h);
        let value = self.value.forward(tape, &self.params, h);
        (logits, value)
    }

    /// Masked budget log-probabilities (`B x (B_max + 1)`), one cap per row.
    pub fn budget_log_probs_tape(&self, tape: &mut Tape, h: Var, z: Var, caps: &[usize]) -> Var {
        let x = tape.concat_cols(h, z);
        let logits = self.budget.forward(tape, &self.params, x);
        let width = self.config.budget.max_budget + 1;
        let mask: Vec<bool> = caps
            .iter()
            .flat_map(|&c| (0..width).map(move |b| b <= c))
            .collect();
        tape.log_softmax_rows(logits, Some(mask), self.config.budget.mask_fill)
    }

    pub fn critic_tape(&self, tape: &mut Tape, h: Var, z: Var) -> Var {
        let x = tape.concat_cols(h, z);
        self.critic.forward(tape, &self.params, x)
    }

    /// Margins of the given subgoals (`B x 1`) and the full `M x 1` column.
    pub fn margin_rows(&self, tape: &mut Tape, z: &[usize]) -> (Var, Var) {
        let all = self.margin.forward(tape, &self.params);
        let rows = tape.const_matmul(&one_hot(z, self.config.subgoals), all);
        (rows, all)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Replaces logits above `cap` by `fill`, then normalises. Masked entries
/// are set to exactly zero.
pub fn masked_budget_softmax(logits: &[f64], cap: usize, fill: f64) -> Result<Vec<f64>> {
    if cap >= logits.len() {
        return Err(Error::InvalidInstance(format!(
            "budget cap {cap} outside the support 0..={}",
            logits.len() - 1
        )));
    }
    let masked: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(b, &l)| if b <= cap { l } else { fill })
        .collect();
    let mut p = softmax(&masked);
    p[cap + 1..].iter_mut().for_each(|x| *x = 0.0);
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    Ok(p)
}

/// Log-softmax over `{0..=cap}`; entries above `cap` are `-inf`.
pub fn masked_budget_log_softmax(logits: &[f64], cap: usize) -> Result<Vec<f64>> {
    if cap >= logits.len() {
        return Err(Error::InvalidInstance(format!(
            "budget cap {cap} outside the support 0..={}",
            logits.len() - 1
        )));
    }
    let feasible = &logits[..=cap];
    let mx = feasible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + feasible.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    Ok(logits
        .iter()
        .enumerate()
        .map(|(b, &l)| if b <= cap { l - lse } else { f64::NEG_INFINITY })
        .collect())
}

/// Per-node Q values conditioned on a subgoal embedding.
///
/// Node rows from a two-round graph encoder are projected, concatenated with
/// the (constant) subgoal embedding and mapped to one Q value per node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLevelQ {
    pub params: ParameterSet,
    pub encoder: GraphEncoder,
    pub head: Mlp,
    pub subgoal_dim: usize,
}

impl LowLevelQ {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        subgoal_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut ps = ParameterSet::new();
        let encoder = GraphEncoder::new(&mut ps, "ll.enc", feature_dim, hidden, hidden, rng);
        let head = Mlp::new(&mut ps, "ll.head", &[hidden + subgoal_dim, hidden, 1], rng);
        Self {
            params: ps,
            encoder,
            head,
            subgoal_dim,
        }
    }

    pub fn q_values_features(&self, adjacency: &Tensor, features: &Tensor, z: &[f64]) -> Vec<f64> {
        let nodes = self
            .encoder
            .infer_node_embeddings(&self.params, adjacency, features);
        let proj = self.encoder.projection.infer(&self.params, &nodes);
        let zr = Tensor::row(z.to_vec()).repeat_rows(proj.rows());
        self.head
            .infer(&self.params, &proj.concat_cols(&zr))
            .into_vec()
    }

    pub fn q_values<E: Environment>(
        &self,
        env: &E,
        state: &E::State,
        decision_remaining: f64,
        z: &[f64],
    ) -> Vec<f64> {
        self.q_values_features(
            env.adjacency(),
            &env.node_features(state, decision_remaining),
            z,
        )
    }

    /// Q values as an `n x 1` column on the tape.
    pub fn q_tape(
        &self,
        tape: &mut Tape,
        adjacency: &Arc<Tensor>,
        features: &Tensor,
        z: &[f64],
    ) -> Var {
        let x = tape.input(features.clone());
        let nodes = self
            .encoder
            .node_embeddings(tape, &self.params, adjacency, x);
        let proj = self.encoder.projection.forward(tape, &self.params, nodes);
        let n = features.rows();
        let zr = tape.input(Tensor::row(z.to_vec()).repeat_rows(n));
        let joined = tape.concat_cols(proj, zr);
        self.head.forward(tape, &self.params, joined)
    }
}

/// Everything needed to resume training or evaluate a trained agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub format: String,
    pub version: u32,
    pub model: WorldModel,
    pub low_level: LowLevelQ,
    pub low_level_target: LowLevelQ,
    /// Opaque training metadata (epoch counters and the like).
    pub meta: serde_json::Value,
}

impl AgentCheckpoint {
    pub fn new(model: WorldModel, low_level: LowLevelQ, low_level_target: LowLevelQ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            low_level,
            low_level_target,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ck: AgentCheckpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.model.params.rebuild_index()?;
        ck.low_level.params.rebuild_index()?;
        ck.low_level_target.params.rebuild_index()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{grad_check, GradCheckConfig};
    use crate::env::{aim_generate, AimConfig, AimEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (AimEnv, WorldModel) {
        let g = aim_generate(10, 3, 3.0).unwrap();
        let env = AimEnv::new(
            g,
            AimConfig {
                horizon: 4,
                budget: 4,
                max_decision_budget: None,
            },
        );
        let mut cfg = ModelConfig::for_env(&env, 8, 4);
        cfg.hidden = 12;
        cfg.gnn_hidden = 6;
        let model = WorldModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (env, model)
    }

    #[test]
    fn encode_is_unit_and_deterministic() {
        let (env, m) = tiny();
        let s = env.reset();
        let h = m.encode(&env, &s);
        assert_eq!(h, m.encode(&env, &s));
        let n: f64 = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let (s2, _) = env.primitive_step(&s, 0).unwrap();
        assert_ne!(m.encode(&env, &s2), h);
    }

    #[test]
    fn dynamics_is_unit_and_deterministic() {
        let (env, m) = tiny();
        let h = m.encode(&env, &env.reset());
        let (a, r) = m.dynamics_step(&h, 2);
        assert_eq!((a.clone(), r), m.dynamics_step(&h, 2));
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prior_sums_to_one_and_zero_logits_are_uniform() {
        let (env, m) = tiny();
        let (p, v) = m.predict(&m.encode(&env, &env.reset()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(v.is_finite());
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn budget_masking_examples() {
        let p = masked_budget_softmax(&[0.0; 6], 3, -1e9).unwrap();
        assert_eq!(p, vec![0.25, 0.25, 0.25, 0.25, 0.0, 0.0]);
        let p = masked_budget_softmax(&[5.0, -1.0, 9.0], 0, -1e9).unwrap();
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        assert!(masked_budget_softmax(&[0.0; 3], 3, -1e9).is_err());
        let lp = masked_budget_log_softmax(&[0.0, 1000.0, 2.0, 7.0], 2).unwrap();
        assert_eq!(
            masked_budget_softmax(&[0.0, 1000.0, 2.0, 7.0], 2, -1e9).unwrap()[0],
            0.0
        );
        assert_eq!(lp[..3], [-1000.0, 0.0, -998.0]);
        assert_eq!(lp[3], f64::NEG_INFINITY);
        let lp = masked_budget_log_softmax(&[5.0, -1.0, 9.0], 2).unwrap();
        let p = masked_budget_softmax(&[5.0, -1.0, 9.0], 2, -1e9).unwrap();
        for (a, b) in lp.iter().zip(&p) {
            assert!((a.exp() - b).abs() < 1e-15);
        }
        let (env, m) = tiny();
        let h = m.encode(&env, &env.reset());
        for cap in 0..=4 {
            let p = m.budget_distribution(&h, 1, cap).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p[cap + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tape_and_inference_agree() {
        let (env, m) = tiny();
        let s = env.reset();
        let h = m.encode(&env, &s);
        let mut t = Tape::new();
        let hv = m.encode_tape(&mut t, env.adjacency(), &env.node_features(&s, 0.0));
        let zv = m.subgoal_rows(&mut t, &[3]);
        let (nv, rv) = m.dynamics_tape(&mut t, hv, zv);
        let (n, r) = m.dynamics_step(&h, 3);
        for (a, b) in t.value(hv).data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in t.value(nv).data().iter().zip(&n) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((t.scalar(rv) - r).abs() < 1e-12);
        let lp = m.budget_log_probs_tape(&mut t, hv, zv, &[2]);
        let p = m.budget_distribution(&h, 3, 2).unwrap();
        for (a, b) in t.value(lp).data().iter().zip(&p).take(3) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
        let ll = LowLevelQ::new(env.feature_dim(), 8, 6, &mut ChaCha8Rng::seed_from_u64(2));
        let z = m.subgoal(1).to_vec();
        let q = ll.q_values(&env, &s, 0.5, &z);
        let qv = ll.q_tape(&mut t, env.adjacency(), &env.node_features(&s, 0.5), &z);
        for (a, b) in t.value(qv).data().iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_heads_gradient_check() {
        let (env, m) = tiny();
        let s0 = env.reset();
        let (s1, _) = env.primitive_step(&s0, 4).unwrap();
        let items = vec![
            (Arc::clone(env.adjacency()), env.node_features(&s0, 0.0)),
            (Arc::clone(env.adjacency()), env.node_features(&s1, 0.0)),
        ];
        let loss = |ps: &ParameterSet, t: &mut Tape| {
            let mut mm = m.clone();
            mm.params = ps.clone();
            let h = mm.encode_batch(t, &items);
            let z = mm.subgoal_rows(t, &[0, 2]);
            let (n, r) = mm.dynamics_tape(t, h, z);
            let (lg, v) = mm.predict_tape(t, n);
            let lb = mm.budget_log_probs_tape(t, h, z, &[1, 4]);
            let lb = t.exp(lb);
            let c = mm.critic_tape(t, h, z);
            let (mr, _) = mm.margin_rows(t, &[0, 2]);
            let parts: Vec<Var> = [r, lg, v, lb, c, mr, n]
                .iter()
                .map(|&x| {
                    let sq = t.square(x);
                    t.mean(sq)
                })
                .collect();
            t.add_all(&parts)
        };
        let cfg = GradCheckConfig {
            samples_per_param: 3,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&m.params, loss, &cfg);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (env, m) = tiny();
        let ll = LowLevelQ::new(env.feature_dim(), 8, 6, &mut ChaCha8Rng::seed_from_u64(2));
        let ck = AgentCheckpoint::new(m, ll.clone(), ll);
        let back = AgentCheckpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model.params.id("subgoals"), Some(ck.model.dictionary));
        let mut bad: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        bad["version"] = 99.into();
        assert!(AgentCheckpoint::from_json(&bad.to_string()).is_err());
    }
}
