//! Run configuration: one TOML document with `env`, `model`, `train`,
//! `search` and `loss` tables, plus the built-in presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{aim_generate, AimConfig, AimEnv, SopConfig, SopEnv, SopInstance, SopParams};
use crate::geometry::MtsLossConfig;
use crate::planner::SearchConfig;
use crate::trainer::TrainConfig;
use crate::world_model::{BudgetConfig, ModelConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Aim,
    Sop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    /// Nodes (AIM) or cities (SOP).
    pub nodes: usize,
    pub horizon: usize,
    pub budget: usize,
    /// Per-decision budget cap; defaults to the total budget.
    pub max_decision_budget: Option<usize>,
    /// Training instances generated from consecutive seeds.
    pub instances: usize,
    pub instance_seed: u64,
    pub avg_degree: f64,
    pub daily_cap: usize,
    pub rho: f64,
    pub daily_limit: f64,
    pub penalty_rate: f64,
    pub p_max: f64,
    pub noise_fraction: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let sop = SopParams::default();
        Self {
            kind: EnvKind::Aim,
            nodes: 10,
            horizon: 4,
            budget: 4,
            max_decision_budget: None,
            instances: 1,
            instance_seed: 1000,
            avg_degree: 3.0,
            daily_cap: 4,
            rho: 0.9,
            daily_limit: sop.daily_limit,
            penalty_rate: sop.penalty_rate,
            p_max: sop.p_max,
            noise_fraction: sop.noise_fraction,
        }
    }
}

impl EnvSection {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 2 || self.horizon < 1 || self.instances < 1 {
            return Err(Error::Config(
                "env needs at least 2 nodes, 1 day and 1 instance".into(),
            ));
        }
        if let Some(b) = self.max_decision_budget {
            if b < 1 {
                return Err(Error::Config(
                    "max_decision_budget must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn aim_config(&self) -> AimConfig {
        AimConfig {
            horizon: self.horizon,
            budget: self.budget,
            max_decision_budget: self.max_decision_budget,
        }
    }

    pub fn sop_params(&self) -> SopParams {
        SopParams {
            daily_limit: self.daily_limit,
            penalty_rate: self.penalty_rate,
            p_max: self.p_max,
            noise_fraction: self.noise_fraction,
        }
    }

    pub fn sop_config(&self) -> SopConfig {
        SopConfig {
            horizon: self.horizon,
            budget: self.budget,
            daily_cap: self.daily_cap,
            rho: self.rho,
        }
    }

    /// AIM environments for instance seeds `seed .. seed + count`.
    pub fn aim_envs(&self, seed: u64, count: usize) -> Result<Vec<AimEnv>> {
        (0..count as u64)
            .map(|i| {
                let g = aim_generate(self.nodes, seed + i, self.avg_degree)?;
                Ok(AimEnv::new(g, self.aim_config()))
            })
            .collect()
    }

    pub fn sop_envs(&self, seed: u64, count: usize) -> Result<Vec<SopEnv>> {
        let params = self.sop_params();
        (0..count as u64)
            .map(|i| {
                let inst = SopInstance::generate(self.nodes, seed + i, &params)?;
                Ok(SopEnv::new(inst, self.sop_config()))
            })
            .collect()
    }
}

/// Network widths; input sizes are filled in from the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub subgoals: usize,
    pub hidden: usize,
    pub gnn_hidden: usize,
    pub ll_hidden: usize,
    pub subgoal_init_scale: f64,
    pub margin_init: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            subgoals: 32,
            hidden: 64,
            gnn_hidden: 32,
            ll_hidden: 32,
            subgoal_init_scale: 1.0,
            margin_init: -1.0,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, feature_dim: usize, max_budget: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            gnn_hidden: self.gnn_hidden,
            subgoals: self.subgoals,
            budget: BudgetConfig::new(max_budget),
            subgoal_init_scale: self.subgoal_init_scale,
            margin_init: self.margin_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub loss: MtsLossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub const PRESETS: [&str; 3] = ["desk", "paper-aim", "paper-sop"];

impl RunConfig {
    /// Tiny AIM (10 nodes, 4 days, 4 seeds) at CPU scale.
    pub fn desk() -> Self {
        let train = TrainConfig {
            epochs: 1000,
            hl_updates_per_epoch: 8,
            ll_updates_per_epoch: 16,
            eval_every: 50,
            validation_episodes: 100,
            keep_best: true,
            eval_episodes: 400,
            ..TrainConfig::default()
        };
        Self {
            env: EnvSection::default(),
            model: ModelSection::default(),
            train,
            search: SearchConfig::desk(),
            loss: MtsLossConfig::default(),
        }
    }

    /// AIM at full scale (500 nodes, 10 days, budget 70).
    pub fn paper_aim() -> Self {
        let env = EnvSection {
            kind: EnvKind::Aim,
            nodes: 500,
            horizon: 10,
            budget: 70,
            instances: 50,
            ..EnvSection::default()
        };
        let model = ModelSection {
            latent_dim: 128,
            hidden: 128,
            gnn_hidden: 64,
            ll_hidden: 64,
            ..ModelSection::default()
        };
        let train = TrainConfig {
            epochs: 1000,
            episodes_per_epoch: 16,
            eval_every: 25,
            validation_episodes: 10,
            eval_episodes: 10,
            ..TrainConfig::default()
        };
        Self {
            env,
            model,
            train,
            search: SearchConfig::aim(),
            loss: MtsLossConfig::default(),
        }
    }

    /// SOP at full scale (500 cities, 10 days, budget 70).
    pub fn paper_sop() -> Self {
        let mut cfg = Self::paper_aim();
        cfg.env.kind = EnvKind::Sop;
        cfg.env.daily_cap = 14;
        cfg.train.ll_lr = 5e-4;
        cfg.train.entropy_beta = 0.02;
        cfg.train.target_update = 200;
        cfg.search = SearchConfig::sop();
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-aim" => Ok(Self::paper_aim()),
            "paper-sop" => Ok(Self::paper_sop()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        self.loss.validate()?;
        if self.model.latent_dim < 1 || self.model.subgoals < 1 || self.model.ll_hidden < 1 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            let text = cfg.to_toml().unwrap();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 7\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.hl_lr, 1e-3);
        assert_eq!(cfg.env, EnvSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepochz = 7\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn full_scale_presets_keep_reference_values() {
        let aim = RunConfig::paper_aim();
        assert_eq!(aim.model.latent_dim, 128);
        assert_eq!(aim.search.simulations, 150);
        assert_eq!(aim.train.episodes_per_epoch, 16);
        let sop = RunConfig::paper_sop();
        assert_eq!(sop.train.ll_lr, 5e-4);
        assert_eq!(sop.train.entropy_beta, 0.02);
        assert_eq!(sop.search.simulations, 250);
    }
}
