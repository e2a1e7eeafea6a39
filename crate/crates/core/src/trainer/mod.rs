//! Self-play training of the two-level agent.
//!
//! One epoch plays a handful of episodes with the current networks, stores
//! them in the replay buffers, then runs high-level updates (model, geometry
//! and budget losses) followed by low-level DQN updates.

mod episode;
mod replay;
mod updates;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use episode::{execute_subgoal, play_episode, Agent, EpisodeRecord, PlayMode, Segment};
pub use replay::{macro_reward, Fifo, Game, HlTransition, LlTransition, ReplayBuffers};
pub use updates::{
    budget_loss, budget_update, dqn_target, hl_loss, hl_loss_frozen, hl_update, ll_loss, ll_update,
    sync_target, HlBatch, LossBreakdown,
};

use crate::env::{splitmix, Environment};
use crate::geometry::MtsLossConfig;
pub use crate::harness::stats::mean_sem;
use crate::planner::SearchConfig;
use crate::world_model::{AgentCheckpoint, LowLevelQ, ModelConfig, WorldModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Discount per high-level decision.
    pub discount: f64,
    /// Discount per primitive step.
    pub ll_discount: f64,
    pub unroll: usize,
    pub hl_batch: usize,
    pub ll_batch: usize,
    pub hl_lr: f64,
    pub ll_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay: f64,
    /// Low-level updates between hard target-network copies.
    pub target_update: usize,
    pub entropy_beta: f64,
    pub warmup_epochs: usize,
    pub w_policy: f64,
    pub w_value: f64,
    pub w_reward: f64,
    /// Weight of the squared latent error between the dynamics output and
    /// the encoded next decision state.
    pub w_consistency: f64,
    pub lambda_mts: f64,
    pub lambda_budget: f64,
    pub w_critic: f64,
    pub w_actor: f64,
    pub w_entropy: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub hl_updates_per_epoch: usize,
    pub ll_updates_per_epoch: usize,
    pub hl_capacity: usize,
    pub ll_capacity: usize,
    /// Validate every this many epochs (0 disables periodic validation).
    pub eval_every: usize,
    pub validation_episodes: usize,
    /// Restore the snapshot with the best validation return after training.
    pub keep_best: bool,
    /// Episodes per instance in the final evaluation.
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            discount: 0.997,
            ll_discount: 0.997,
            unroll: 5,
            hl_batch: 8,
            ll_batch: 8,
            hl_lr: 1e-3,
            ll_lr: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 5.0,
            epsilon_start: 0.90,
            epsilon_end: 0.05,
            epsilon_decay: 0.995,
            target_update: 100,
            entropy_beta: 0.01,
            warmup_epochs: 3,
            w_policy: 1.0,
            w_value: 1.0,
            w_reward: 1.0,
            w_consistency: 1.0,
            lambda_mts: 1.0,
            lambda_budget: 1.0,
            w_critic: 1.0,
            w_actor: 1.0,
            w_entropy: 1.0,
            epochs: 100,
            episodes_per_epoch: 4,
            hl_updates_per_epoch: 4,
            ll_updates_per_epoch: 8,
            hl_capacity: 1000,
            ll_capacity: 10_000,
            eval_every: 0,
            validation_episodes: 32,
            keep_best: false,
            eval_episodes: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hl_lr", self.hl_lr),
            ("ll_lr", self.ll_lr),
            ("epsilon_decay", self.epsilon_decay),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("hl_batch", self.hl_batch),
            ("ll_batch", self.ll_batch),
            ("target_update", self.target_update),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("hl_capacity", self.hl_capacity),
            ("ll_capacity", self.ll_capacity),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("discount", self.discount),
            ("ll_discount", self.ll_discount),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_end) || self.epsilon_end > self.epsilon_start {
            return Err(Error::Config("epsilon bounds are inconsistent".into()));
        }
        Ok(())
    }

    pub fn epsilon(&self, epoch: usize) -> f64 {
        (self.epsilon_start * self.epsilon_decay.powi(epoch as i32)).max(self.epsilon_end)
    }
}

/// `max(0.05, 0.90 · 0.995^epoch)`.
pub fn epsilon_schedule(epoch: usize) -> f64 {
    TrainConfig::default().epsilon(epoch)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    pub sem: f64,
    pub episodes: usize,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub epsilon: f64,
    pub warmup: bool,
    pub self_play_return: f64,
    pub eval_return_mean: Option<f64>,
    pub eval_return_sem: Option<f64>,
    pub hl: LossBreakdown,
    pub ll_loss: f64,
    pub hl_games: usize,
    pub ll_transitions: usize,
    pub ll_updates: usize,
}

/// First episode id used by evaluation rollouts; training ids stay below it.
pub const EVAL_EPISODE_BASE: u64 = 1 << 40;
/// Validation episodes never coincide with final evaluation episodes.
pub const VALIDATION_EPISODE_BASE: u64 = 1 << 41;

#[derive(Clone)]
struct Snapshot {
    epoch: usize,
    score: f64,
    model: WorldModel,
    low_level: LowLevelQ,
}

pub struct Trainer<'a, E: Environment> {
    pub envs: &'a [E],
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub loss: MtsLossConfig,
    pub model: WorldModel,
    pub low_level: LowLevelQ,
    pub target: LowLevelQ,
    pub buffers: ReplayBuffers<E::State>,
    pub epoch: usize,
    pub ll_updates: usize,
    episode_counter: u64,
    seed: u64,
    rng: ChaCha8Rng,
    best: Option<Snapshot>,
}

impl<'a, E: Environment> Trainer<'a, E> {
    pub fn new(
        envs: &'a [E],
        model_config: ModelConfig,
        ll_hidden: usize,
        train: TrainConfig,
        search: SearchConfig,
        loss: MtsLossConfig,
        seed: u64,
    ) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::Config("training needs at least one instance".into()));
        }
        train.validate()?;
        search.validate()?;
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = WorldModel::new(model_config, &mut rng)?;
        let low_level = LowLevelQ::new(
            envs[0].feature_dim(),
            model.config.latent_dim,
            ll_hidden,
            &mut rng,
        );
        let target = low_level.clone();
        let buffers = ReplayBuffers::new(train.hl_capacity, train.ll_capacity);
        Ok(Self {
            envs,
            train,
            search,
            loss,
            model,
            low_level,
            target,
            buffers,
            epoch: 0,
            ll_updates: 0,
            episode_counter: 0,
            seed,
            rng,
            best: None,
        })
    }

    pub fn agent(&self) -> Agent<'_> {
        Agent {
            model: &self.model,
            low_level: &self.low_level,
            search: &self.search,
            ll_discount: self.train.ll_discount,
        }
    }

    pub fn in_warmup(&self) -> bool {
        self.epoch < self.train.warmup_epochs
    }

    fn next_episode_id(&mut self) -> u64 {
        let id =
            splitmix(self.seed ^ 0x5eed).wrapping_add(self.episode_counter) % EVAL_EPISODE_BASE;
        self.episode_counter += 1;
        id
    }

    /// Plays the epoch's episodes and applies its updates.
    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        let epsilon = self.train.epsilon(self.epoch);
        let warmup = self.in_warmup();
        let mut returns = Vec::new();
        for i in 0..self.train.episodes_per_epoch {
            let instance = (self.epoch * self.train.episodes_per_epoch + i) % self.envs.len();
            let episode = self.next_episode_id();
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng.random());
            let record = play_episode(
                &self.envs[instance],
                instance,
                self.agent(),
                PlayMode::Train { epsilon, warmup },
                episode,
                false,
                &mut rng,
            )?;
            returns.push(record.total_reward);
            self.buffers.hl.push(record.game);
            for t in record.ll {
                self.buffers.ll.push(t);
            }
        }

        let mut hl = LossBreakdown::default();
        let n_hl = self.train.hl_updates_per_epoch;
        for _ in 0..n_hl {
            let idx = self.buffers.sample_hl(self.train.hl_batch, &mut self.rng);
            let partners = self.buffers.sample_hl(self.train.hl_batch, &mut self.rng);
            let cap_idx = self
                .buffers
                .ll
                .sample_indices(self.train.ll_batch, &mut self.rng);
            let games = &self.buffers.hl;
            let batch = HlBatch {
                envs: self.envs,
                items: idx.iter().map(|&(g, k)| (games.get(g), k)).collect(),
                order_partners: partners.iter().map(|&(g, k)| (games.get(g), k)).collect(),
                cap_pairs: cap_idx.iter().map(|&i| self.buffers.ll.get(i)).collect(),
            };
            let bd = hl_update(&mut self.model, &batch, &self.train, &self.loss, !warmup);
            hl.accumulate(&bd, 1.0 / n_hl as f64);
        }

        let mut ll_loss_sum = 0.0;
        let n_ll = if self.buffers.ll.is_empty() {
            0
        } else {
            self.train.ll_updates_per_epoch
        };
        for _ in 0..n_ll {
            let idx = self
                .buffers
                .ll
                .sample_indices(self.train.ll_batch, &mut self.rng);
            let batch: Vec<_> = idx.iter().map(|&i| self.buffers.ll.get(i)).collect();
            ll_loss_sum += ll_update(
                &mut self.low_level,
                &self.target,
                &self.model,
                self.envs,
                &batch,
                &self.train,
            );
            self.ll_updates += 1;
            if self.ll_updates.is_multiple_of(self.train.target_update) {
                sync_target(&mut self.target, &self.low_level);
            }
        }

        self.epoch += 1;
        let (eval_mean, eval_sem) = if self.train.eval_every > 0
            && (self.epoch.is_multiple_of(self.train.eval_every) || self.epoch == self.train.epochs)
        {
            let returns = evaluate_agent_from(
                self.envs,
                self.agent(),
                self.train.validation_episodes,
                VALIDATION_EPISODE_BASE,
            )?;
            let s = mean_sem(&returns);
            let improved = self.best.as_ref().is_none_or(|b| s.0 > b.score);
            if self.train.keep_best && !warmup && improved {
                self.best = Some(Snapshot {
                    epoch: self.epoch,
                    score: s.0,
                    model: self.model.clone(),
                    low_level: self.low_level.clone(),
                });
            }
            (Some(s.0), Some(s.1))
        } else {
            (None, None)
        };
        Ok(MetricsRecord {
            epoch: self.epoch,
            epsilon,
            warmup,
            self_play_return: mean_sem(&returns).0,
            eval_return_mean: eval_mean,
            eval_return_sem: eval_sem,
            hl,
            ll_loss: if n_ll > 0 {
                ll_loss_sum / n_ll as f64
            } else {
                0.0
            },
            hl_games: self.buffers.hl.len(),
            ll_transitions: self.buffers.ll.len(),
            ll_updates: self.ll_updates,
        })
    }

    /// Greedy returns over `episodes` evaluation episodes on every instance.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalSummary> {
        let returns = evaluate_agent(self.envs, self.agent(), episodes)?;
        let (mean, sem) = mean_sem(&returns);
        Ok(EvalSummary {
            mean,
            sem,
            episodes: returns.len(),
        })
    }

    /// Epoch and validation return of the kept snapshot, if any.
    pub fn best_epoch(&self) -> Option<(usize, f64)> {
        self.best.as_ref().map(|b| (b.epoch, b.score))
    }

    /// Swaps in the best validated networks. Returns false when none was kept.
    pub fn restore_best(&mut self) -> bool {
        match self.best.take() {
            Some(b) => {
                self.model = b.model;
                self.low_level = b.low_level;
                self.target = self.low_level.clone();
                true
            }
            None => false,
        }
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        let mut ck = AgentCheckpoint::new(
            self.model.clone(),
            self.low_level.clone(),
            self.target.clone(),
        );
        ck.meta = serde_json::json!({
            "epoch": self.epoch,
            "ll_updates": self.ll_updates,
            "seed": self.seed,
        });
        ck
    }
}

/// Greedy episode returns, `episodes` per instance, on common random numbers.
pub fn evaluate_agent<E: Environment>(
    envs: &[E],
    agent: Agent<'_>,
    episodes: usize,
) -> Result<Vec<f64>> {
    evaluate_agent_from(envs, agent, episodes, EVAL_EPISODE_BASE)
}

/// As [`evaluate_agent`], with episode ids starting at `base`.
pub fn evaluate_agent_from<E: Environment>(
    envs: &[E],
    agent: Agent<'_>,
    episodes: usize,
    base: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(envs.len() * episodes);
    for (i, env) in envs.iter().enumerate() {
        for e in 0..episodes {
            let r = play_episode(
                env,
                i,
                agent,
                PlayMode::Eval,
                base + e as u64,
                false,
                &mut rng,
            )?;
            out.push(r.total_reward);
        }
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub checkpoint: AgentCheckpoint,
    pub metrics: Vec<MetricsRecord>,
    pub final_eval: EvalSummary,
}

/// Runs every epoch, then a final greedy evaluation. `observe` sees each
/// metrics record as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train<E: Environment>(
    envs: &[E],
    model_config: ModelConfig,
    ll_hidden: usize,
    train: TrainConfig,
    search: SearchConfig,
    loss: MtsLossConfig,
    seed: u64,
    mut observe: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    let epochs = train.epochs;
    let eval_episodes = train.eval_episodes;
    let mut trainer = Trainer::new(envs, model_config, ll_hidden, train, search, loss, seed)?;
    let mut metrics = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let m = trainer.run_epoch()?;
        observe(&m);
        metrics.push(m);
    }
    trainer.restore_best();
    let final_eval = trainer.evaluate(eval_episodes)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
        final_eval,
    })
}
