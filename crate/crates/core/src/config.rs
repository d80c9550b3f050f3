//! Run configuration, loadable from TOML. Every field has a default, so a
//! config file only needs the fields it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{build_scenario, Difficulty, GopSpec, ANCHOR_QPS};
use crate::error::{Error, Result};
use crate::nn::CriticLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dual,
    Single,
    Clone,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Mode::Dual),
            "single" => Ok(Mode::Single),
            "clone" => Ok(Mode::Clone),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dual => "dual",
            Mode::Single => "single",
            Mode::Clone => "clone",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: Mode,
    /// Number of training episodes.
    pub episodes: usize,
    pub gop_size: usize,
    pub gamma: f64,
    /// Critic minibatch size drawn from the replay buffer once per episode.
    pub batch: usize,
    pub lambda_single_critic: f64,
    pub noise_theta: f64,
    pub noise_sigma: f64,
    /// Multiplier applied to the noise volatility after every episode.
    pub noise_decay: f64,
    pub seed: u64,
    /// Anchor QPs whose constant-QP rollouts define the GOP budgets.
    pub target_rate_anchor: Vec<u8>,
    pub difficulties: Vec<Difficulty>,
    /// Scenario seeds per difficulty in the training pool.
    pub scenario_count: usize,
    /// First scenario seed of the pool.
    pub scenario_seed_base: u64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub replay_capacity: usize,
    /// Write a checkpoint every this many episodes (0 disables).
    pub checkpoint_every: usize,
    pub actor_widths: Vec<usize>,
    pub critic_layout: CriticLayout,
    pub clone_lr: f64,
    pub clone_batch: usize,
    pub clone_min_steps: usize,
    pub clone_max_steps: usize,
    pub clone_target_mae: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dual,
            episodes: 5000,
            gop_size: 16,
            gamma: 1.0,
            batch: 32,
            lambda_single_critic: 1.0,
            noise_theta: 0.15,
            noise_sigma: 0.2,
            noise_decay: 0.995,
            seed: 0,
            target_rate_anchor: ANCHOR_QPS.to_vec(),
            difficulties: vec![Difficulty::Slow, Difficulty::Fast],
            scenario_count: 16,
            scenario_seed_base: 1000,
            tau: 0.001,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            replay_capacity: 50_000,
            checkpoint_every: 500,
            actor_widths: vec![800, 500],
            critic_layout: CriticLayout::default(),
            clone_lr: 1e-3,
            clone_batch: 32,
            clone_min_steps: 2000,
            clone_max_steps: 20_000,
            clone_target_mae: 2.0,
        }
    }
}

impl TrainerConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainerConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.episodes == 0 {
            return fail("episodes must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if self.batch == 0 || self.clone_batch == 0 {
            return fail("batch sizes must be >= 1");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau must lie in (0, 1]");
        }
        if self.target_rate_anchor.is_empty() || self.target_rate_anchor.iter().any(|&q| q > 51) {
            return fail("target_rate_anchor needs QPs in [0, 51]");
        }
        if self.difficulties.is_empty() || self.scenario_count == 0 {
            return fail("scenario pool would be empty");
        }
        if self.actor_widths.is_empty() || self.actor_widths.contains(&0) {
            return fail("actor_widths must be non-empty and positive");
        }
        if self.replay_capacity < self.batch {
            return fail("replay_capacity must be >= batch");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_theta >= 0.0 && self.noise_decay > 0.0) {
            return fail("noise parameters must be non-negative");
        }
        Ok(())
    }

    /// Training scenarios: every (difficulty, seed, anchor) combination.
    pub fn scenario_pool(&self) -> Result<Vec<GopSpec>> {
        let mut pool = Vec::new();
        for &d in &self.difficulties {
            for k in 0..self.scenario_count as u64 {
                let base = build_scenario(self.gop_size, self.scenario_seed_base + k, d, self.target_rate_anchor[0])?;
                for &a in &self.target_rate_anchor {
                    pool.push(base.with_anchor(a)?);
                }
            }
        }
        Ok(pool)
    }
}
