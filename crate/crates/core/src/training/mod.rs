//! Losses and the three-phase training procedure.
//!
//! Pairs `(x_t, x_{t+τ})` are scored by the reduced transition density of
//! their projections times the noise factor of the later frame; single
//! frames by the equilibrium density `μ(Φ(x)) S(x)`. Training first fits
//! the flow against a flat reduced potential, then fits the mixture with
//! the flow frozen, then fits both jointly.

mod config;
mod dataset;
mod loss;
mod trainer;

pub use config::{BridgeSettings, Phase, TicaSettings, TrainConfig};
pub use dataset::{PairIndex, TransitionDataset};
pub use loss::{batch_loss, frozen_batch_loss, loss_eq, loss_kin, loss_total, BatchLoss, Trainable};
pub use trainer::{epoch_order, fit_pipeline, Checkpoint, EpochRecord, Trainer, CHECKPOINT_VERSION};
