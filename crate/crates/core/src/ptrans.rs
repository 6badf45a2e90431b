//! Transition density of the reduced Brownian dynamics by diffusion-bridge
//! importance sampling.
//!
//! The lag `τ` is split into `M` Euler–Maruyama steps of length `Δ = τ/M`.
//! Intermediate points are drawn from the Gaussian bridge proposal pinned at
//! both endpoints, and `p_τ(z_from, z_to)` is estimated by averaging
//! `Π_m f(u_m, u_{m+1}) / Π_m g_m(u_m, u_{m+1})` over `K_s` paths. The
//! standard normal draws behind the paths are supplied by the caller, so the
//! estimate is a smooth function of the endpoints and the potential.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Graph;
use crate::diffcore::Var;
use crate::error::{Error, Result};
use crate::potential::{mixture_drift_graph, GmmPotential, GmmSnapshot, GmmVars};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    /// Number of sub-intervals.
    pub m: usize,
    /// Number of importance samples per transition pair.
    pub k_s: usize,
    /// Lag in reduced-dynamics time units.
    pub tau: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            m: 10,
            k_s: 20,
            tau: 1.0,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k_s == 0 {
            return Err(Error::config("bridge needs M >= 1 and K_s >= 1"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("lag must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn delta(&self) -> f64 {
        self.tau / self.m as f64
    }

    /// Columns of the per-pair noise block: `(M - 1) · d`.
    pub fn noise_cols(&self, d: usize) -> usize {
        (self.m - 1) * d
    }
}

/// Deterministic standard normal draws keyed by `(seed, epoch, pair)`.
///
/// Draws are regenerated on demand rather than stored, so refreshing the
/// noise between epochs is a matter of passing a new epoch number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseCache {
    seed: u64,
}

impl NoiseCache {
    pub fn new(seed: u64) -> Self {
        NoiseCache { seed }
    }

    fn rng(&self, epoch: u64, pair: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&epoch.to_le_bytes());
        key[16..24].copy_from_slice(&pair.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    /// `K_s × (M-1)·d` draws for one pair.
    pub fn pair_noise(&self, epoch: u64, pair: u64, cfg: &BridgeConfig, d: usize) -> Array2<f64> {
        let mut rng = self.rng(epoch, pair);
        Array2::from_shape_simple_fn((cfg.k_s, cfg.noise_cols(d)), || StandardNormal.sample(&mut rng))
    }

    /// Stacked draws for a batch of pairs, `B·K_s × (M-1)·d`, pair-major.
    pub fn batch_noise(&self, epoch: u64, pairs: &[usize], cfg: &BridgeConfig, d: usize) -> Array2<f64> {
        let cols = cfg.noise_cols(d);
        let mut out = Array2::zeros((pairs.len() * cfg.k_s, cols));
        for (b, &p) in pairs.iter().enumerate() {
            let block = self.pair_noise(epoch, p as u64, cfg, d);
            out.slice_mut(ndarray::s![b * cfg.k_s..(b + 1) * cfg.k_s, ..]).assign(&block);
        }
        out
    }
}

/// A drift field `-∇V` that can be recorded on a graph.
pub trait DriftField {
    fn drift_graph(&self, g: &mut Graph, z: Var) -> Var;
}

/// `∇V ≡ 0`.
pub struct FlatDrift;

impl DriftField for FlatDrift {
    fn drift_graph(&self, g: &mut Graph, z: Var) -> Var {
        let shape = g.shape(z);
        g.constant(Array2::zeros(shape))
    }
}

/// `-∇V` for `V = rate · ‖z‖² / 2`.
pub struct LinearDrift {
    pub rate: f64,
}

impl DriftField for LinearDrift {
    fn drift_graph(&self, g: &mut Graph, z: Var) -> Var {
        g.scale(z, -self.rate)
    }
}

/// Drift of a trainable mixture whose components are already on the graph.
pub struct GmmDrift<'a> {
    pub potential: &'a GmmPotential,
    pub vars: GmmVars,
}

impl DriftField for GmmDrift<'_> {
    fn drift_graph(&self, g: &mut Graph, z: Var) -> Var {
        self.potential.drift_graph(g, &self.vars, z)
    }
}

impl DriftField for GmmSnapshot {
    fn drift_graph(&self, g: &mut Graph, z: Var) -> Var {
        let k = self.log_weights().len();
        let lw = g.constant(Array2::from_shape_vec((1, k), self.log_weights().to_vec()).expect("row"));
        let s = g.constant(self.sigma().clone());
        mixture_drift_graph(g, self.centers(), z, lw, s)
    }
}

/// Row-wise `log N(u' | u + drift(u) Δ, 2Δ I)`, `n × 1`.
pub fn log_euler_density_graph(g: &mut Graph, drift: &dyn DriftField, u: Var, u_next: Var, delta: f64) -> Var {
    let d = g.shape(u).1 as f64;
    let dr = drift.drift_graph(g, u);
    let step = g.scale(dr, delta);
    let mean = g.add(u, step);
    let diff = g.sub(u_next, mean);
    let sq = g.square(diff);
    let ss = g.sum_cols(sq);
    let quad = g.scale(ss, -1.0 / (4.0 * delta));
    g.offset(quad, -0.5 * d * (4.0 * PI * delta).ln())
}

/// Mean and variance of the bridge proposal `g_m`.
pub fn proposal_moments(m: usize, big_m: usize, delta: f64) -> Result<(f64, f64)> {
    if big_m < 2 || m + 2 > big_m {
        return Err(Error::config(format!(
            "proposal step m = {m} is only defined for 0 <= m <= M - 2 (M = {big_m})"
        )));
    }
    let remaining = (big_m - m) as f64;
    Ok((1.0 / remaining, 2.0 * delta * (remaining - 1.0) / remaining))
}

/// Row-wise `log g_m(u, u')` with the bridge pinned at `u_end`, `n × 1`.
pub fn log_proposal_density_graph(
    g: &mut Graph,
    u: Var,
    u_next: Var,
    u_end: Var,
    m: usize,
    big_m: usize,
    delta: f64,
) -> Result<Var> {
    let (pull, var) = proposal_moments(m, big_m, delta)?;
    let mean = proposal_mean(g, u, u_end, pull);
    Ok(gaussian_log_density_graph(g, u_next, mean, var))
}

fn proposal_mean(g: &mut Graph, u: Var, u_end: Var, pull: f64) -> Var {
    let gap = g.sub(u_end, u);
    let shift = g.scale(gap, pull);
    g.add(u, shift)
}

fn gaussian_log_density_graph(g: &mut Graph, x: Var, mean: Var, var: f64) -> Var {
    let d = g.shape(x).1 as f64;
    let diff = g.sub(x, mean);
    let sq = g.square(diff);
    let ss = g.sum_cols(sq);
    let quad = g.scale(ss, -0.5 / var);
    g.offset(quad, -0.5 * d * (2.0 * PI * var).ln())
}

/// Per-path log importance weights `Σ_m log f - Σ_m log g`, one row per
/// (pair, sample), pair-major. `noise` is `B·K_s × (M-1)·d`.
pub fn bridge_log_weights_graph(
    g: &mut Graph,
    drift: &dyn DriftField,
    z_from: Var,
    z_to: Var,
    cfg: &BridgeConfig,
    noise: &Array2<f64>,
) -> Result<Var> {
    cfg.validate()?;
    let (b, d) = g.shape(z_from);
    if g.shape(z_to) != (b, d) {
        return Err(Error::config("transition endpoints disagree in shape"));
    }
    if noise.dim() != (b * cfg.k_s, cfg.noise_cols(d)) {
        return Err(Error::config(format!(
            "bridge noise has shape {:?}, expected {:?}",
            noise.dim(),
            (b * cfg.k_s, cfg.noise_cols(d))
        )));
    }
    let delta = cfg.delta();
    let start = g.repeat_rows(z_from, cfg.k_s);
    let end = g.repeat_rows(z_to, cfg.k_s);
    let mut u = start;
    let mut total: Option<Var> = None;
    let mut accumulate = |g: &mut Graph, term: Var, sign: f64| {
        let t = if sign < 0.0 { g.neg(term) } else { term };
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    };
    for m in 0..cfg.m - 1 {
        let (pull, var) = proposal_moments(m, cfg.m, delta)?;
        let mean = proposal_mean(g, u, end, pull);
        let xi = g.constant(noise.slice(ndarray::s![.., m * d..(m + 1) * d]).to_owned());
        let step = g.scale(xi, var.sqrt());
        let next = g.add(mean, step);
        let log_f = log_euler_density_graph(g, drift, u, next, delta);
        let log_g = gaussian_log_density_graph(g, next, mean, var);
        accumulate(g, log_f, 1.0);
        accumulate(g, log_g, -1.0);
        u = next;
    }
    let last = log_euler_density_graph(g, drift, u, end, delta);
    accumulate(g, last, 1.0);
    Ok(total.expect("at least one step"))
}

/// `log p_τ(z_from, z_to)` per row, `B × 1`.
///
/// With `M = 1` this is the single Euler step over the whole lag.
pub fn log_ptrans_graph(
    g: &mut Graph,
    drift: &dyn DriftField,
    z_from: Var,
    z_to: Var,
    cfg: &BridgeConfig,
    noise: &Array2<f64>,
) -> Result<Var> {
    cfg.validate()?;
    if cfg.m == 1 {
        if g.shape(z_from) != g.shape(z_to) {
            return Err(Error::config("transition endpoints disagree in shape"));
        }
        return Ok(log_euler_density_graph(g, drift, z_from, z_to, cfg.tau));
    }
    let b = g.shape(z_from).0;
    let w = bridge_log_weights_graph(g, drift, z_from, z_to, cfg, noise)?;
    if let Some(pos) = g.value(w).iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "importance weight of pair {} sample {} is not finite",
            pos / cfg.k_s,
            pos % cfg.k_s
        )));
    }
    let grid = g.reshape(w, (b, cfg.k_s));
    let lse = g.logsumexp_rows(grid);
    Ok(g.offset(lse, -(cfg.k_s as f64).ln()))
}

fn row_pair(g: &mut Graph, a: &[f64], b: &[f64]) -> Result<(Var, Var)> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::config("transition endpoints must be non-empty and of equal length"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::numeric("transition endpoint is not finite"));
    }
    let va = g.constant(Array2::from_shape_vec((1, a.len()), a.to_vec()).expect("row"));
    let vb = g.constant(Array2::from_shape_vec((1, b.len()), b.to_vec()).expect("row"));
    Ok((va, vb))
}

/// `log f(u, u') = log N(u' | u + drift(u) Δ, 2Δ I)`.
pub fn log_euler_density(drift: &dyn DriftField, u: &[f64], u_next: &[f64], delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::config(format!("step must be positive, got {delta}")));
    }
    let mut g = Graph::new();
    let (a, b) = row_pair(&mut g, u, u_next)?;
    let out = log_euler_density_graph(&mut g, drift, a, b, delta);
    Ok(g.value(out)[[0, 0]])
}

/// `log g_m(u, u')` of the bridge proposal pinned at `u_end`.
pub fn log_proposal_density(u: &[f64], u_next: &[f64], u_end: &[f64], m: usize, big_m: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::config(format!("step must be positive, got {delta}")));
    }
    let mut g = Graph::new();
    let (a, b) = row_pair(&mut g, u, u_next)?;
    let (_, e) = row_pair(&mut g, u, u_end)?;
    let out = log_proposal_density_graph(&mut g, a, b, e, m, big_m, delta)?;
    Ok(g.value(out)[[0, 0]])
}

/// Estimate of `log p_τ(z_from, z_to)` for one pair; `noise` is
/// `K_s × (M-1)·d`.
pub fn log_ptrans(
    drift: &dyn DriftField,
    z_from: &[f64],
    z_to: &[f64],
    cfg: &BridgeConfig,
    noise: ArrayView2<'_, f64>,
) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = row_pair(&mut g, z_from, z_to)?;
    let out = log_ptrans_graph(&mut g, drift, a, b, cfg, &noise.to_owned())?;
    Ok(g.value(out)[[0, 0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference_gradient, max_relative_error};
    use crate::potential::{GmmConfig, GridSpec};
    use rand::Rng;

    fn ou_log_density(z0: f64, z1: f64, tau: f64) -> f64 {
        let mean = z0 * (-tau).exp();
        let var = 1.0 - (-2.0 * tau).exp();
        -0.5 * (2.0 * PI * var).ln() - (z1 - mean).powi(2) / (2.0 * var)
    }

    #[test]
    fn euler_density_examples() {
        let delta = 0.3;
        let v = log_euler_density(&FlatDrift, &[0.4], &[0.4], delta).unwrap();
        assert!((v + 0.5 * (4.0 * PI * delta).ln()).abs() < 1e-14);
        let v = log_euler_density(&FlatDrift, &[0.0], &[(2.0 * delta).sqrt()], delta).unwrap();
        assert!((v - (-0.5 * (4.0 * PI * delta).ln() - 0.5)).abs() < 1e-14);
        // V = z²/2: mean u(1 - Δ)
        let (u, un) = (0.8, 0.1);
        let mean = u * (1.0 - delta);
        let expected = -0.5 * (4.0 * PI * delta).ln() - (un - mean).powi(2) / (4.0 * delta);
        let v = log_euler_density(&LinearDrift { rate: 1.0 }, &[u], &[un], delta).unwrap();
        assert!((v - expected).abs() < 1e-14);
        assert!(log_euler_density(&FlatDrift, &[0.0], &[0.0], 0.0).unwrap_err().is_config());
    }

    #[test]
    fn proposal_examples() {
        let delta = 0.2;
        let (pull, var) = proposal_moments(0, 2, delta).unwrap();
        assert_eq!((pull, var), (0.5, delta));
        let v = log_proposal_density(&[0.0], &[1.0], &[2.0], 0, 2, delta).unwrap();
        assert!((v + 0.5 * (2.0 * PI * delta).ln()).abs() < 1e-14);
        // zero pull when already at the end point
        let v = log_proposal_density(&[0.7], &[0.7], &[0.7], 1, 4, delta).unwrap();
        let var = proposal_moments(1, 4, delta).unwrap().1;
        assert!((v + 0.5 * (2.0 * PI * var).ln()).abs() < 1e-14);
        let vars: Vec<f64> = (0..3).map(|m| proposal_moments(m, 4, 1.0).unwrap().1).collect();
        for (a, b) in vars.iter().zip([1.5, 4.0 / 3.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(proposal_moments(3, 4, 1.0).unwrap_err().is_config());
        assert!(log_proposal_density(&[0.0], &[0.0], &[0.0], 1, 2, 1.0).is_err());
    }

    #[test]
    fn single_step_is_the_euler_density() {
        let snap = GmmSnapshot::new(
            Array2::from_shape_vec((3, 1), vec![-1.0, 0.2, 1.5]).unwrap(),
            vec![0.1, -0.3, 0.4],
            Array2::from_shape_vec((3, 1), vec![0.5, 0.8, 0.3]).unwrap(),
        )
        .unwrap();
        let cfg = BridgeConfig { m: 1, k_s: 7, tau: 0.4 };
        let noise = Array2::zeros((7, 0));
        let a = log_ptrans(&snap, &[0.3], &[-0.6], &cfg, noise.view()).unwrap();
        let b = log_euler_density(&snap, &[0.3], &[-0.6], 0.4).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn flat_potential_has_zero_variance() {
        let cache = NoiseCache::new(3);
        for (m, k_s) in [(2, 5), (10, 20), (25, 3)] {
            let cfg = BridgeConfig { m, k_s, tau: 0.7 };
            let z0 = [0.3, -1.1];
            let z1 = [1.9, 0.4];
            let noise = cache.pair_noise(0, 0, &cfg, 2);
            let mut g = Graph::new();
            let (a, b) = row_pair(&mut g, &z0, &z1).unwrap();
            let w = bridge_log_weights_graph(&mut g, &FlatDrift, a, b, &cfg, &noise).unwrap();
            let vals = g.value(w);
            let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - vals.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(spread < 1e-9, "M = {m}: spread {spread}");
            let est = log_ptrans(&FlatDrift, &z0, &z1, &cfg, noise.view()).unwrap();
            let d2 = (z1[0] - z0[0]).powi(2) + (z1[1] - z0[1]).powi(2);
            let exact = -(4.0 * PI * 0.7).ln() - d2 / (4.0 * 0.7);
            assert!((est - exact).abs() < 1e-9);
        }
    }

    fn ou_errors(m: usize, k_s: usize, n_pairs: usize) -> Vec<f64> {
        let tau = 0.5;
        let cfg = BridgeConfig { m, k_s, tau };
        let cache = NoiseCache::new(17);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n_pairs)
            .map(|p| {
                let z0: f64 = rng.sample(StandardNormal);
                let xi: f64 = rng.sample(StandardNormal);
                let z1 = z0 * (-tau).exp() + (1.0 - (-2.0 * tau).exp()).sqrt() * xi;
                let noise = cache.pair_noise(0, p as u64, &cfg, 1);
                let est = log_ptrans(&LinearDrift { rate: 1.0 }, &[z0], &[z1], &cfg, noise.view()).unwrap();
                let exact = ou_log_density(z0, z1, tau);
                (est - exact).abs() / exact.abs()
            })
            .collect()
    }

    #[test]
    fn ornstein_uhlenbeck_oracle() {
        let errs = ou_errors(20, 1000, 100);
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean < 0.02, "mean relative error {mean}");
    }

    #[test]
    fn more_steps_reduce_error() {
        let median = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let coarse = median(ou_errors(2, 200, 60));
        let fine = median(ou_errors(20, 200, 60));
        assert!(fine < coarse, "M=20 {fine} vs M=2 {coarse}");
    }

    #[test]
    fn sample_permutation_invariance() {
        let cfg = BridgeConfig { m: 6, k_s: 9, tau: 0.8 };
        let noise = NoiseCache::new(5).pair_noise(2, 11, &cfg, 1);
        let perm: Vec<usize> = vec![4, 8, 0, 2, 7, 1, 3, 6, 5];
        let permuted = noise.select(ndarray::Axis(0), &perm);
        let drift = LinearDrift { rate: 1.3 };
        let a = log_ptrans(&drift, &[1.2], &[-0.4], &cfg, noise.view()).unwrap();
        let b = log_ptrans(&drift, &[1.2], &[-0.4], &cfg, permuted.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn noise_is_keyed_and_reproducible() {
        let cfg = BridgeConfig::default();
        let c = NoiseCache::new(1);
        assert_eq!(c.pair_noise(0, 5, &cfg, 2), c.pair_noise(0, 5, &cfg, 2));
        assert_ne!(c.pair_noise(0, 5, &cfg, 2), c.pair_noise(1, 5, &cfg, 2));
        assert_ne!(c.pair_noise(0, 5, &cfg, 2), c.pair_noise(0, 6, &cfg, 2));
        let batch = c.batch_noise(3, &[7, 2], &cfg, 1);
        assert_eq!(batch.nrows(), 2 * cfg.k_s);
        assert_eq!(batch.slice(ndarray::s![cfg.k_s.., ..]), c.pair_noise(3, 2, &cfg, 1));
    }

    #[test]
    fn bad_noise_shape_rejected() {
        let cfg = BridgeConfig { m: 3, k_s: 2, tau: 1.0 };
        let err = log_ptrans(&FlatDrift, &[0.0], &[0.0], &cfg, Array2::zeros((2, 1)).view()).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn gradient_wrt_potential_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let grid = GridSpec::new(vec![-2.0], vec![2.0], 4).unwrap();
        let cfg_g = GmmConfig {
            hidden_widths: vec![6],
            final_layer_scale: 1.0,
            ..GmmConfig::default()
        };
        let pot = GmmPotential::new(grid, &cfg_g, &mut rng).unwrap();
        let cfg = BridgeConfig { m: 4, k_s: 5, tau: 0.6 };
        let z0 = Array2::from_shape_vec((2, 1), vec![-1.0, 0.5]).unwrap();
        let z1 = Array2::from_shape_vec((2, 1), vec![0.3, 1.4]).unwrap();
        let noise = NoiseCache::new(4).batch_noise(0, &[0, 1], &cfg, 1);
        let eval = |p: &GmmPotential| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let bound = p.params().bind(&mut g, true);
            let vars = p.components_graph(&mut g, &bound);
            let a = g.constant(z0.clone());
            let b = g.constant(z1.clone());
            let lp = log_ptrans_graph(&mut g, &GmmDrift { potential: p, vars }, a, b, &cfg, &noise).unwrap();
            let loss = g.sum(lp);
            let grads = g.backward(loss).unwrap();
            (g.scalar(loss), bound.flat_gradient(&grads, p.params()))
        };
        let (_, tape) = eval(&pot);
        assert!(tape.iter().any(|v| v.abs() > 1e-8));
        let fd = finite_difference_gradient(
            |theta| {
                let mut q = pot.clone();
                q.params_mut().values_mut().copy_from_slice(theta);
                eval(&q).0
            },
            pot.params().values(),
            1e-6,
        );
        let err = max_relative_error(&tape, &fd, 1e-4);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_wrt_endpoints() {
        let drift = LinearDrift { rate: 0.7 };
        let cfg = BridgeConfig { m: 5, k_s: 4, tau: 0.9 };
        let noise = NoiseCache::new(8).pair_noise(0, 0, &cfg, 2);
        let f = |x: &[f64]| log_ptrans(&drift, &x[..2], &x[2..], &cfg, noise.view()).unwrap();
        let x = [0.4, -0.2, 1.1, 0.8];
        let mut g = Graph::new();
        let a = g.leaf(Array2::from_shape_vec((1, 2), x[..2].to_vec()).unwrap());
        let b = g.leaf(Array2::from_shape_vec((1, 2), x[2..].to_vec()).unwrap());
        let lp = log_ptrans_graph(&mut g, &drift, a, b, &cfg, &noise).unwrap();
        let grads = g.backward(lp).unwrap();
        let tape: Vec<f64> = grads.get(a).unwrap().iter().chain(grads.get(b).unwrap().iter()).copied().collect();
        let fd = finite_difference_gradient(f, &x, 1e-6);
        assert!(max_relative_error(&tape, &fd, 1e-4) < 1e-6);
    }
}
