use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::potential::GmmConfig;
use crate::ptrans::BridgeConfig;
use crate::tica::DEFAULT_RANK_EPS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TicaSettings {
    pub lag_steps: usize,
    pub rank_eps: f64,
    pub max_dim: Option<usize>,
}

impl Default for TicaSettings {
    fn default() -> Self {
        TicaSettings {
            lag_steps: 10,
            rank_eps: DEFAULT_RANK_EPS,
            max_dim: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeSettings {
    pub m: usize,
    pub k_s: usize,
}

impl Default for BridgeSettings {
    fn default() -> Self {
        let b = BridgeConfig::default();
        BridgeSettings { m: b.m, k_s: b.k_s }
    }
}

impl BridgeSettings {
    pub fn with_tau(self, tau: f64) -> BridgeConfig {
        BridgeConfig {
            m: self.m,
            k_s: self.k_s,
            tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Reaction-coordinate dimension `d`.
    pub rc_dim: usize,
    /// Lag of the training pairs in frames.
    pub lag_steps: usize,
    /// Lag in reduced-dynamics time units. Defaults to `lag_steps` times the
    /// frame spacing, or to 1 for unit-free data.
    pub tau: Option<f64>,
    /// Treat the frame spacing of the input as meaningless.
    pub unit_free: bool,
    pub alpha: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub gmm_init_epochs: usize,
    pub joint_epochs: usize,
    pub learning_rate: f64,
    /// Joint-phase decay factor applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
    /// Abort when a batch loss exceeds this value.
    pub divergence_threshold: f64,
    pub tica: Option<TicaSettings>,
    pub flow: FlowConfig,
    pub gmm: GmmConfig,
    pub bridge: BridgeSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rc_dim: 1,
            lag_steps: 10,
            tau: None,
            unit_free: false,
            alpha: 0.1,
            batch_size: 256,
            pretrain_epochs: 5,
            gmm_init_epochs: 5,
            joint_epochs: 20,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            lr_decay_every: 5,
            seed: 0,
            divergence_threshold: 1e6,
            tica: None,
            flow: FlowConfig::default(),
            gmm: GmmConfig::default(),
            bridge: BridgeSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    GmmInit,
    Joint,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Pretrain, Phase::GmmInit, Phase::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::GmmInit => "gmm_init",
            Phase::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.rc_dim == 0 {
            return bad("rc_dim must be at least 1");
        }
        if self.lag_steps == 0 {
            return bad("lag_steps must be at least 1");
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) || !t.is_finite() {
                return bad("tau must be positive");
            }
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return bad("learning-rate schedule needs lr > 0, 0 < decay <= 1 and a positive period");
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive");
        }
        if let Some(t) = &self.tica {
            if t.lag_steps == 0 || !(t.rank_eps >= 0.0) || t.max_dim == Some(0) {
                return bad("TICA needs lag_steps >= 1, rank_eps >= 0 and max_dim >= 1");
            }
        }
        if self.flow.n_blocks == 0 {
            return bad("flow needs at least one coupling block");
        }
        self.bridge.with_tau(1.0).validate()
    }

    /// Learning rate for the 1-based `phase_epoch`. Only the joint phase
    /// decays.
    pub fn learning_rate_for(&self, phase: Phase, phase_epoch: usize) -> f64 {
        match phase {
            Phase::Joint => {
                let k = (phase_epoch.max(1) - 1) / self.lr_decay_every;
                self.learning_rate * self.lr_decay.powi(k as i32)
            }
            _ => self.learning_rate,
        }
    }

    pub fn epochs_for(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.pretrain_epochs,
            Phase::GmmInit => self.gmm_init_epochs,
            Phase::Joint => self.joint_epochs,
        }
    }
}
