use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Phase, TrainConfig};
use super::dataset::TransitionDataset;
use super::loss::{batch_loss, frozen_batch_loss, BatchLoss, Trainable};
use crate::diffcore::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::flow::{log_std_normal, FlowModel};
use crate::potential::{GmmPotential, GmmSnapshot, GridSpec};
use crate::ptrans::{BridgeConfig, NoiseCache};
use crate::tica::{fit_tica_multi, TicaModel};
use crate::trajectory::Trajectory;

pub const CHECKPOINT_VERSION: u32 = 1;

const PROJECTION_CHUNK: usize = 4096;
/// Pairs per independently evaluated piece of a mini-batch.
const PAIR_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// 1-based count over all phases.
    pub epoch: usize,
    pub phase: Phase,
    /// 1-based count within the phase.
    pub phase_epoch: usize,
    pub learning_rate: f64,
    pub loss_kin: f64,
    pub loss_eq: Option<f64>,
    pub loss_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Reduced-dynamics time per saved frame of the training data.
    pub time_per_frame: f64,
    pub tica: Option<TicaModel>,
    pub flow: FlowModel,
    pub potential: Option<GmmPotential>,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Lag of the training pairs in reduced-dynamics time.
    pub fn tau(&self) -> f64 {
        self.time_per_frame * self.config.lag_steps as f64
    }

    pub fn rc_dim(&self) -> usize {
        self.flow.rc_dim()
    }

    /// Dimension of the raw configurations the model accepts.
    pub fn input_dim(&self) -> usize {
        self.tica.as_ref().map_or(self.flow.dim(), |t| t.input_dim())
    }

    pub fn potential(&self) -> Result<&GmmPotential> {
        self.potential
            .as_ref()
            .ok_or_else(|| Error::config("checkpoint has no trained potential yet"))
    }

    pub fn snapshot(&self) -> Result<GmmSnapshot> {
        self.potential()?.snapshot()
    }

    /// Raw configurations to flow inputs.
    pub fn to_flow_space(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        match &self.tica {
            Some(t) => t.transform(x),
            None => {
                if x.ncols() != self.flow.dim() {
                    return Err(Error::config(format!(
                        "model expects dimension {}, got {}",
                        self.flow.dim(),
                        x.ncols()
                    )));
                }
                Ok(x.to_owned())
            }
        }
    }

    /// `Φ(x)` for raw configurations.
    pub fn project(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let y = self.to_flow_space(x)?;
        project_chunked(&self.flow, y.view()).map(|(z, _)| z)
    }

    /// `F⁻¹(z, v)`, followed by the TICA reconstruction map when present.
    pub fn reconstruct(&self, zv: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let y = self.flow.inverse_batch(zv)?;
        match &self.tica {
            Some(t) => t.reconstruct(y.view()),
            None => Ok(y),
        }
    }
}

/// `(Φ(x), log S(x))` in bounded chunks.
fn project_chunked(flow: &FlowModel, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let d = flow.rc_dim();
    let mut z = Array2::zeros((x.nrows(), d));
    let mut log_s = Array1::zeros(x.nrows());
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + PROJECTION_CHUNK).min(x.nrows());
        let (y, logdet) = flow.forward_batch(x.slice(ndarray::s![start..end, ..]))?;
        z.slice_mut(ndarray::s![start..end, ..]).assign(&y.slice(ndarray::s![.., ..d]));
        for (i, row) in y.rows().into_iter().enumerate() {
            let v: Vec<f64> = row.iter().skip(d).copied().collect();
            log_s[start + i] = log_std_normal(&v) + logdet[i];
        }
        start = end;
    }
    Ok((z, log_s))
}

struct FrozenProjection {
    z: Vec<Array2<f64>>,
    log_s: Vec<Array1<f64>>,
}

impl FrozenProjection {
    fn new(flow: &FlowModel, ds: &TransitionDataset) -> Result<Self> {
        let mut z = Vec::new();
        let mut log_s = Vec::new();
        for p in ds.parts() {
            let (a, b) = project_chunked(flow, p.view())?;
            z.push(a);
            log_s.push(b);
        }
        Ok(FrozenProjection { z, log_s })
    }

    #[allow(clippy::type_complexity)]
    fn gather(&self, ds: &TransitionDataset, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let d = self.z[0].ncols();
        let n = idx.len();
        let (mut zf, mut zt) = (Array2::zeros((n, d)), Array2::zeros((n, d)));
        let (mut lf, mut lt) = (Array2::zeros((n, 1)), Array2::zeros((n, 1)));
        for (r, &i) in idx.iter().enumerate() {
            let p = ds.pairs()[i];
            let later = p.frame + ds.lag_steps();
            zf.row_mut(r).assign(&self.z[p.trajectory].row(p.frame));
            zt.row_mut(r).assign(&self.z[p.trajectory].row(later));
            lf[[r, 0]] = self.log_s[p.trajectory][p.frame];
            lt[[r, 0]] = self.log_s[p.trajectory][later];
        }
        (zf, zt, lf, lt)
    }
}

/// Seeded visiting order of `n` pairs for the given global epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
        Error::Divergence(m) => Error::Divergence(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Reduced-dynamics lag for trajectories with the given settings.
fn lag_time(config: &TrainConfig, trajs: &[Trajectory]) -> Result<f64> {
    if let Some(t) = config.tau {
        return Ok(t);
    }
    if config.unit_free {
        return Ok(1.0);
    }
    let dt = trajs[0].frame_dt();
    if let Some(i) = trajs.iter().position(|t| ((t.frame_dt() - dt) / dt).abs() > 1e-12) {
        return Err(Error::config(format!(
            "trajectory {i} has frame spacing {} but trajectory 0 has {dt}; set tau explicitly",
            trajs[i].frame_dt()
        )));
    }
    Ok(config.lag_steps as f64 * dt)
}

fn check_inputs(trajs: &[Trajectory]) -> Result<()> {
    let first = trajs.first().ok_or_else(|| Error::config("no training trajectories"))?;
    if let Some(i) = trajs.iter().position(|t| t.dim() != first.dim()) {
        return Err(Error::config(format!(
            "trajectory {i} has dimension {}, expected {}",
            trajs[i].dim(),
            first.dim()
        )));
    }
    Ok(())
}

fn transformed_parts(trajs: &[Trajectory], tica: Option<&TicaModel>) -> Result<Vec<Array2<f64>>> {
    trajs
        .iter()
        .map(|t| match tica {
            Some(m) => m.transform(t.frames()),
            None => Ok(t.frames().to_owned()),
        })
        .collect()
}

/// Three-phase training state: flat-potential pretraining of the flow,
/// mixture initialization with the flow frozen, then joint training.
pub struct Trainer {
    config: TrainConfig,
    dataset: TransitionDataset,
    tica: Option<TicaModel>,
    flow: FlowModel,
    potential: Option<GmmPotential>,
    history: Vec<EpochRecord>,
    noise: NoiseCache,
}

impl Trainer {
    pub fn new(config: TrainConfig, trajs: &[Trajectory]) -> Result<Self> {
        config.validate()?;
        check_inputs(trajs)?;
        let tau = lag_time(&config, trajs)?;
        let tica = match &config.tica {
            Some(s) => {
                let views: Vec<_> = trajs.iter().map(|t| t.frames()).collect();
                Some(fit_tica_multi(&views, s.lag_steps, s.rank_eps, s.max_dim)?)
            }
            None => None,
        };
        let parts = transformed_parts(trajs, tica.as_ref())?;
        let dataset = TransitionDataset::new(parts, config.lag_steps, tau)?;
        if config.rc_dim > dataset.dim() {
            return Err(Error::config(format!(
                "rc_dim {} exceeds the data dimension {}",
                config.rc_dim,
                dataset.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let flow = FlowModel::new(dataset.dim(), config.rc_dim, &config.flow, &mut rng)?;
        Ok(Trainer {
            noise: NoiseCache::new(config.seed),
            config,
            dataset,
            tica,
            flow,
            potential: None,
            history: Vec::new(),
        })
    }

    /// Continue from a checkpoint. The TICA model, flow, mixture and epoch
    /// numbering are kept; epoch counts and learning rates come from
    /// `config`. Optimizer moments restart.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig, trajs: &[Trajectory]) -> Result<Self> {
        config.validate()?;
        check_inputs(trajs)?;
        let old = &checkpoint.config;
        if old.rc_dim != config.rc_dim || old.lag_steps != config.lag_steps || old.tica.is_some() != config.tica.is_some() {
            return Err(Error::config(
                "resume config must keep rc_dim, lag_steps and the TICA setting of the checkpoint",
            ));
        }
        let tau = lag_time(&config, trajs)?;
        if ((tau - checkpoint.tau()) / checkpoint.tau()).abs() > 1e-12 {
            return Err(Error::config(format!(
                "resumed data give lag time {tau}, checkpoint was trained at {}",
                checkpoint.tau()
            )));
        }
        let parts = transformed_parts(trajs, checkpoint.tica.as_ref())?;
        let dataset = TransitionDataset::new(parts, config.lag_steps, tau)?;
        if dataset.dim() != checkpoint.flow.dim() {
            return Err(Error::config(format!(
                "data dimension {} does not match the checkpoint flow ({})",
                dataset.dim(),
                checkpoint.flow.dim()
            )));
        }
        Ok(Trainer {
            noise: NoiseCache::new(config.seed),
            config,
            dataset,
            tica: checkpoint.tica,
            flow: checkpoint.flow,
            potential: checkpoint.potential,
            history: checkpoint.history,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &TransitionDataset {
        &self.dataset
    }

    pub fn flow(&self) -> &FlowModel {
        &self.flow
    }

    pub fn potential(&self) -> Option<&GmmPotential> {
        self.potential.as_ref()
    }

    pub fn tica(&self) -> Option<&TicaModel> {
        self.tica.as_ref()
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            time_per_frame: self.dataset.tau() / self.dataset.lag_steps() as f64,
            tica: self.tica.clone(),
            flow: self.flow.clone(),
            potential: self.potential.clone(),
            history: self.history.clone(),
        }
    }

    fn bridge_for(&self, phase: Phase) -> BridgeConfig {
        match phase {
            // the flat-potential transition density is exactly one Euler step
            Phase::Pretrain => BridgeConfig {
                m: 1,
                k_s: 1,
                tau: self.dataset.tau(),
            },
            _ => self.config.bridge.with_tau(self.dataset.tau()),
        }
    }

    fn noise_for(&self, epoch: u64, idx: &[usize], bridge: &BridgeConfig) -> Array2<f64> {
        if bridge.m == 1 {
            Array2::zeros((idx.len() * bridge.k_s, 0))
        } else {
            self.noise.batch_noise(epoch, idx, bridge, self.config.rc_dim)
        }
    }

    /// Mixture on a grid covering the projected data.
    pub fn init_potential(&mut self) -> Result<()> {
        let frozen = FrozenProjection::new(&self.flow, &self.dataset)?;
        let views: Vec<_> = frozen.z.iter().map(|z| z.view()).collect();
        let all = concatenate(Axis(0), &views).expect("same width");
        let k = self.config.gmm.k_for(self.config.rc_dim);
        let grid = GridSpec::from_data(all.view(), k, self.config.gmm.grid_margin)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1);
        self.potential = Some(GmmPotential::new(grid, &self.config.gmm, &mut rng)?);
        Ok(())
    }

    /// Run every phase that has epochs left. `on_epoch` sees the state
    /// after each completed epoch.
    pub fn run(&mut self, on_epoch: &mut dyn FnMut(&Trainer) -> Result<()>) -> Result<()> {
        for (i, &phase) in Phase::ALL.iter().enumerate() {
            let later_started = self.history.iter().any(|r| Phase::ALL[i + 1..].contains(&r.phase));
            if later_started {
                continue;
            }
            if phase != Phase::Pretrain && self.potential.is_none() {
                self.init_potential()?;
            }
            let done = self.history.iter().filter(|r| r.phase == phase).count();
            let total = self.config.epochs_for(phase);
            if done >= total {
                continue;
            }
            let mut flow_adam = AdamState::new(self.flow.params().len(), AdamConfig::default());
            let mut pot_adam = self
                .potential
                .as_ref()
                .map(|p| AdamState::new(p.params().len(), AdamConfig::default()));
            let frozen = match phase {
                Phase::GmmInit => Some(FrozenProjection::new(&self.flow, &self.dataset)?),
                _ => None,
            };
            for pe in done + 1..=total {
                let record = self.run_epoch(phase, pe, &mut flow_adam, pot_adam.as_mut(), frozen.as_ref())?;
                log::info!(
                    "epoch {} ({phase} {pe}/{total}): kin {:.6} eq {} total {:.6} lr {:.1e}",
                    record.epoch,
                    record.loss_kin,
                    record.loss_eq.map_or("-".to_string(), |v| format!("{v:.6}")),
                    record.loss_total,
                    record.learning_rate
                );
                self.history.push(record);
                on_epoch(self)?;
            }
        }
        Ok(())
    }

    fn run_epoch(
        &mut self,
        phase: Phase,
        phase_epoch: usize,
        flow_adam: &mut AdamState,
        mut pot_adam: Option<&mut AdamState>,
        frozen: Option<&FrozenProjection>,
    ) -> Result<EpochRecord> {
        let epoch = self.history.len() + 1;
        let lr = self.config.learning_rate_for(phase, phase_epoch);
        flow_adam.set_learning_rate(lr);
        if let Some(a) = pot_adam.as_deref_mut() {
            a.set_learning_rate(lr);
        }
        let order = epoch_order(self.config.seed, epoch, self.dataset.len());
        let bridge = self.bridge_for(phase);
        let alpha = self.config.alpha;
        let (mut sum_kin, mut sum_eq, mut sum_total) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let ctx = format!("{phase} epoch {epoch} batch {b}");
            let loss = self
                .chunked_loss(idx, |chunk| {
                    let noise = self.noise_for(epoch as u64, chunk, &bridge);
                    match phase {
                        Phase::Pretrain => {
                            let (xf, xt) = self.dataset.gather(chunk);
                            let t = Trainable {
                                flow: true,
                                potential: false,
                            };
                            batch_loss(&self.flow, None, xf.view(), xt.view(), &bridge, &noise, alpha, t)
                        }
                        Phase::GmmInit => {
                            let (zf, zt, lf, lt) = frozen.expect("projection cached").gather(&self.dataset, chunk);
                            let pot = self.potential.as_ref();
                            frozen_batch_loss(pot, zf.view(), zt.view(), lf.view(), lt.view(), &bridge, &noise, alpha, true)
                        }
                        Phase::Joint => {
                            let (xf, xt) = self.dataset.gather(chunk);
                            let t = Trainable {
                                flow: true,
                                potential: true,
                            };
                            let pot = self.potential.as_ref();
                            batch_loss(&self.flow, pot, xf.view(), xt.view(), &bridge, &noise, alpha, t)
                        }
                    }
                })
                .map_err(|e| with_context(e, &ctx))?;
            self.check_divergence(&loss, &ctx)?;
            if let Some(g) = &loss.flow_grad {
                flow_adam
                    .step(self.flow.params_mut().values_mut(), g)
                    .map_err(|e| with_context(e, &ctx))?;
            }
            if let (Some(g), Some(a), Some(p)) = (&loss.potential_grad, pot_adam.as_deref_mut(), self.potential.as_mut()) {
                a.step(p.params_mut().values_mut(), g).map_err(|e| with_context(e, &ctx))?;
            }
            let w = idx.len() as f64;
            sum_kin += w * loss.kin;
            sum_eq += w * loss.eq.unwrap_or(0.0);
            sum_total += w * loss.total;
        }
        let n = self.dataset.len() as f64;
        Ok(EpochRecord {
            epoch,
            phase,
            phase_epoch,
            learning_rate: lr,
            loss_kin: sum_kin / n,
            loss_eq: (phase != Phase::Pretrain).then_some(sum_eq / n),
            loss_total: sum_total / n,
        })
    }

    /// Batch loss as the size-weighted mean of per-chunk losses. Chunks
    /// have a fixed size and are reduced in order, so the result does not
    /// depend on the number of worker threads.
    fn chunked_loss<F>(&self, idx: &[usize], f: F) -> Result<BatchLoss>
    where
        F: Fn(&[usize]) -> Result<BatchLoss> + Sync,
    {
        let parts: Vec<(usize, BatchLoss)> = idx
            .par_chunks(PAIR_CHUNK)
            .map(|c| f(c).map(|l| (c.len(), l)))
            .collect::<Result<_>>()?;
        if parts.len() == 1 {
            return Ok(parts.into_iter().next().expect("one chunk").1);
        }
        let n = idx.len() as f64;
        let mut out = BatchLoss {
            kin: 0.0,
            eq: parts[0].1.eq.map(|_| 0.0),
            total: 0.0,
            flow_grad: None,
            potential_grad: None,
        };
        let add = |acc: &mut Option<Vec<f64>>, g: &Option<Vec<f64>>, w: f64| {
            if let Some(g) = g {
                let a = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                for (x, y) in a.iter_mut().zip(g) {
                    *x += w * y;
                }
            }
        };
        for (len, l) in &parts {
            let w = *len as f64 / n;
            out.kin += w * l.kin;
            out.total += w * l.total;
            if let (Some(acc), Some(e)) = (out.eq.as_mut(), l.eq) {
                *acc += w * e;
            }
            add(&mut out.flow_grad, &l.flow_grad, w);
            add(&mut out.potential_grad, &l.potential_grad, w);
        }
        Ok(out)
    }

    fn check_divergence(&self, loss: &BatchLoss, ctx: &str) -> Result<()> {
        if !loss.total.is_finite() || loss.total > self.config.divergence_threshold {
            return Err(Error::Divergence(format!(
                "{ctx}: loss {} exceeds the limit {}",
                loss.total, self.config.divergence_threshold
            )));
        }
        Ok(())
    }

    /// Losses of the current model over all pairs, with the bridge noise of
    /// epoch 0. Before a mixture exists the flat potential is used and
    /// there is no equilibrium term.
    pub fn evaluate(&self) -> Result<BatchLoss> {
        let phase = if self.potential.is_some() { Phase::Joint } else { Phase::Pretrain };
        let bridge = self.bridge_for(phase);
        let frozen = Trainable {
            flow: false,
            potential: false,
        };
        let order: Vec<usize> = (0..self.dataset.len()).collect();
        let (mut k, mut e, mut t) = (0.0, 0.0, 0.0);
        for idx in order.chunks(self.config.batch_size) {
            let l = self.chunked_loss(idx, |chunk| {
                let (xf, xt) = self.dataset.gather(chunk);
                let noise = self.noise_for(0, chunk, &bridge);
                batch_loss(
                    &self.flow,
                    self.potential.as_ref(),
                    xf.view(),
                    xt.view(),
                    &bridge,
                    &noise,
                    self.config.alpha,
                    frozen,
                )
            })?;
            let w = idx.len() as f64;
            k += w * l.kin;
            e += w * l.eq.unwrap_or(0.0);
            t += w * l.total;
        }
        let n = self.dataset.len() as f64;
        Ok(BatchLoss {
            kin: k / n,
            eq: self.potential.is_some().then_some(e / n),
            total: t / n,
            flow_grad: None,
            potential_grad: None,
        })
    }
}

/// Optional TICA, then all three phases with the given settings.
pub fn fit_pipeline(trajs: &[Trajectory], config: TrainConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config, trajs)?;
    trainer.run(&mut |_| Ok(()))?;
    Ok(trainer.checkpoint())
}
