//! Euler–Maruyama integration of Brownian dynamics and the benchmark
//! systems.
//!
//! Every integrator step is `x ← x - ∇V(x) h + √(2h/β) ξ` with
//! `ξ ~ N(0, I)`. Frames are recorded every `save_every` steps after an
//! unrecorded burn-in.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::GmmSnapshot;
use crate::trajectory::Trajectory;

/// An energy function with its gradient.
pub trait Potential {
    fn dim(&self) -> usize;

    /// Energy at `x`; the gradient is written into `grad`.
    fn energy_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64>;

    fn energy(&self, x: &[f64]) -> Result<f64> {
        let mut g = vec![0.0; x.len()];
        self.energy_gradient(x, &mut g)
    }
}

const MUELLER_A: [f64; 4] = [-20.0 / 3.0, -10.0 / 3.0, -17.0 / 3.0, 0.5];
const MUELLER_LA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MUELLER_LB: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MUELLER_LC: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MUELLER_X: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MUELLER_Y: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticPotential {
    /// `5(x₁² - 1)² + 10(x₁² + x₂ - 1)²`.
    DoubleWell,
    /// Four-term exponential Mueller potential.
    Mueller,
    /// `cos(7 atan2(s₂, s₁)) + k_r (r - 1)² + k₃ s₃²` with `r = |(s₁, s₂)|`.
    Circular7PlusOu { radial_stiffness: f64, ou_stiffness: f64 },
    /// `k ‖x‖² / 2`; `k = 0` gives free diffusion.
    Quadratic { dim: usize, stiffness: f64 },
}

impl AnalyticPotential {
    pub fn circular() -> Self {
        AnalyticPotential::Circular7PlusOu {
            radial_stiffness: 10.0,
            ou_stiffness: 10.0,
        }
    }
}

impl Potential for AnalyticPotential {
    fn dim(&self) -> usize {
        match self {
            AnalyticPotential::DoubleWell | AnalyticPotential::Mueller => 2,
            AnalyticPotential::Circular7PlusOu { .. } => 3,
            AnalyticPotential::Quadratic { dim, .. } => *dim,
        }
    }

    fn energy_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if x.len() != self.dim() || grad.len() != self.dim() {
            return Err(Error::config(format!(
                "potential expects dimension {}, got {}",
                self.dim(),
                x.len()
            )));
        }
        match *self {
            AnalyticPotential::DoubleWell => {
                let (x1, x2) = (x[0], x[1]);
                let a = x1 * x1 - 1.0;
                let b = x1 * x1 + x2 - 1.0;
                grad[0] = 20.0 * x1 * a + 40.0 * x1 * b;
                grad[1] = 20.0 * b;
                Ok(5.0 * a * a + 10.0 * b * b)
            }
            AnalyticPotential::Mueller => {
                let mut e = 0.0;
                grad[0] = 0.0;
                grad[1] = 0.0;
                for i in 0..4 {
                    let dx = x[0] - MUELLER_X[i];
                    let dy = x[1] - MUELLER_Y[i];
                    let t = MUELLER_A[i]
                        * (MUELLER_LA[i] * dx * dx + MUELLER_LB[i] * dx * dy + MUELLER_LC[i] * dy * dy).exp();
                    e += t;
                    grad[0] += t * (2.0 * MUELLER_LA[i] * dx + MUELLER_LB[i] * dy);
                    grad[1] += t * (MUELLER_LB[i] * dx + 2.0 * MUELLER_LC[i] * dy);
                }
                Ok(e)
            }
            AnalyticPotential::Circular7PlusOu {
                radial_stiffness,
                ou_stiffness,
            } => {
                let (s1, s2, s3) = (x[0], x[1], x[2]);
                let r2 = s1 * s1 + s2 * s2;
                let r = r2.sqrt();
                if r < 1e-8 {
                    return Err(Error::Singularity(format!(
                        "circular potential is singular at the axis (r = {r:e})"
                    )));
                }
                let theta = s2.atan2(s1);
                let dv_dtheta = -7.0 * (7.0 * theta).sin();
                let radial = 2.0 * radial_stiffness * (r - 1.0) / r;
                grad[0] = dv_dtheta * (-s2 / r2) + radial * s1;
                grad[1] = dv_dtheta * (s1 / r2) + radial * s2;
                grad[2] = 2.0 * ou_stiffness * s3;
                Ok((7.0 * theta).cos() + radial_stiffness * (r - 1.0).powi(2) + ou_stiffness * s3 * s3)
            }
            AnalyticPotential::Quadratic { stiffness, .. } => {
                let mut e = 0.0;
                for (g, &v) in grad.iter_mut().zip(x) {
                    *g = stiffness * v;
                    e += 0.5 * stiffness * v * v;
                }
                Ok(e)
            }
        }
    }
}

/// `V = -log μ` of a frozen mixture.
impl Potential for GmmSnapshot {
    fn dim(&self) -> usize {
        GmmSnapshot::dim(self)
    }

    fn energy_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if x.len() != self.dim() || grad.len() != self.dim() {
            return Err(Error::config("mixture potential evaluated at the wrong dimension"));
        }
        let ld = self.eval_point(x, grad);
        grad.iter_mut().for_each(|g| *g = -*g);
        Ok(-ld)
    }
}

/// `V'(z) = β V(z / √β)`, the potential of the rescaled coordinate
/// `z' = √β z` at unit inverse temperature.
pub struct RescaledPotential<P> {
    pub inner: P,
    pub beta: f64,
}

impl<P: Potential> Potential for RescaledPotential<P> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn energy_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let sb = self.beta.sqrt();
        let inner_x: Vec<f64> = x.iter().map(|v| v / sb).collect();
        let e = self.inner.energy_gradient(&inner_x, grad)?;
        grad.iter_mut().for_each(|g| *g *= sb);
        Ok(self.beta * e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub beta: f64,
    pub step: f64,
    pub save_every: usize,
    pub n_frames: usize,
    pub seed: u64,
    pub burn_in_steps: usize,
    /// Abort when any coordinate exceeds this magnitude.
    pub bound: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            beta: 1.0,
            step: 2e-4,
            save_every: 50,
            n_frames: 1000,
            seed: 0,
            burn_in_steps: 1000,
            bound: 1e3,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.beta > 0.0) || self.save_every == 0 || self.n_frames == 0 {
            return Err(Error::config(
                "simulation needs step > 0, beta > 0, save_every >= 1 and n_frames >= 1",
            ));
        }
        if !(self.bound > 0.0) {
            return Err(Error::config("simulation bound must be positive"));
        }
        Ok(())
    }

    pub fn frame_dt(&self) -> f64 {
        self.step * self.save_every as f64
    }
}

/// Integrate from `x0` and record `cfg.n_frames` frames.
pub fn euler_maruyama(p: &dyn Potential, cfg: &SimConfig, x0: &[f64]) -> Result<Trajectory> {
    cfg.validate()?;
    let d = p.dim();
    if x0.len() != d {
        return Err(Error::config(format!(
            "initial point has dimension {}, potential has {d}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("initial point is not finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (2.0 * cfg.step / cfg.beta).sqrt();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; d];
    let mut frames = Array2::zeros((cfg.n_frames, d));
    let mut step_index: u64 = 0;
    let mut advance = |x: &mut [f64], n: usize| -> Result<()> {
        for _ in 0..n {
            p.energy_gradient(x, &mut grad)?;
            for (xi, gi) in x.iter_mut().zip(&grad) {
                let xi_noise: f64 = rng.sample(StandardNormal);
                *xi += -gi * cfg.step + noise * xi_noise;
            }
            step_index += 1;
            if x.iter().any(|v| !(v.abs() <= cfg.bound)) {
                return Err(Error::Divergence(format!(
                    "trajectory left the box |x| <= {} at step {step_index}",
                    cfg.bound
                )));
            }
        }
        Ok(())
    };
    advance(&mut x, cfg.burn_in_steps)?;
    for f in 0..cfg.n_frames {
        if f > 0 {
            advance(&mut x, cfg.save_every)?;
        }
        frames.row_mut(f).assign(&ndarray::ArrayView1::from(&x));
    }
    Ok(Trajectory::new(frames, cfg.frame_dt())?
        .with_meta("beta", cfg.beta)
        .with_meta("step", cfg.step)
        .with_meta("save_every", cfg.save_every)
        .with_meta("seed", cfg.seed))
}

/// Swiss-roll embedding of `s ∈ R³` into `x ∈ R³`.
pub fn swiss_roll_embed(s: &[f64; 3]) -> Result<[f64; 3]> {
    let s1p = 3.0 * PI * (s[0] + 4.0) / 4.0;
    let s2p = 3.0 * PI * (s[1] + 4.0) / 4.0;
    let (sin, cos) = s1p.sin_cos();
    let u1 = sin + s1p * cos;
    let u3 = -cos + s1p * sin;
    let norm = (u1 * u1 + u3 * u3).sqrt();
    if !(norm > 0.0) {
        return Err(Error::Singularity(format!(
            "Swiss-roll normal vanishes at s₁ = {}",
            s[0]
        )));
    }
    Ok([
        s1p * cos + u1 / norm * s[2],
        s2p,
        s1p * sin + u3 / norm * s[2],
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    DoubleWell,
    Mueller,
    SwissRoll,
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "doublewell" | "double_well" | "double-well" => Ok(Benchmark::DoubleWell),
            "mueller" => Ok(Benchmark::Mueller),
            "swissroll" | "swiss_roll" | "swiss-roll" => Ok(Benchmark::SwissRoll),
            other => Err(Error::config(format!(
                "unknown system '{other}' (expected doublewell, mueller or swissroll)"
            ))),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Benchmark::DoubleWell => "doublewell",
            Benchmark::Mueller => "mueller",
            Benchmark::SwissRoll => "swissroll",
        })
    }
}

/// Optional replacements for a benchmark's simulation settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOverrides {
    pub beta: Option<f64>,
    pub step: Option<f64>,
    pub save_every: Option<usize>,
    pub n_frames: Option<usize>,
    pub seed: Option<u64>,
    pub burn_in_steps: Option<usize>,
    pub bound: Option<f64>,
}

impl Benchmark {
    pub fn potential(self) -> AnalyticPotential {
        match self {
            Benchmark::DoubleWell => AnalyticPotential::DoubleWell,
            Benchmark::Mueller => AnalyticPotential::Mueller,
            Benchmark::SwissRoll => AnalyticPotential::circular(),
        }
    }

    pub fn initial_point(self) -> Vec<f64> {
        match self {
            Benchmark::DoubleWell => vec![1.0, 0.0],
            Benchmark::Mueller => vec![-0.5, 1.5],
            Benchmark::SwissRoll => vec![1.0, 1.0, 0.0],
        }
    }

    pub fn default_config(self) -> SimConfig {
        let (beta, step, n_frames) = match self {
            Benchmark::DoubleWell => (0.5, 2e-4, 150_000),
            Benchmark::Mueller => (1.0, 5e-4, 150_000),
            Benchmark::SwissRoll => (1.0, 2e-4, 300_000),
        };
        SimConfig {
            beta,
            step,
            n_frames,
            ..SimConfig::default()
        }
    }

    pub fn config_with(self, o: &SimOverrides) -> SimConfig {
        let d = self.default_config();
        SimConfig {
            beta: o.beta.unwrap_or(d.beta),
            step: o.step.unwrap_or(d.step),
            save_every: o.save_every.unwrap_or(d.save_every),
            n_frames: o.n_frames.unwrap_or(d.n_frames),
            seed: o.seed.unwrap_or(d.seed),
            burn_in_steps: o.burn_in_steps.unwrap_or(d.burn_in_steps),
            bound: o.bound.unwrap_or(d.bound),
        }
    }
}

/// Observed trajectory plus, for the Swiss roll, the latent `s` trajectory.
#[derive(Clone, Debug)]
pub struct BenchmarkData {
    pub trajectory: Trajectory,
    pub latent: Option<Trajectory>,
}

pub fn make_benchmark_dataset(b: Benchmark, cfg: &SimConfig) -> Result<BenchmarkData> {
    let raw = euler_maruyama(&b.potential(), cfg, &b.initial_point())?.with_meta("system", b);
    match b {
        Benchmark::SwissRoll => {
            let mut x = Array2::zeros(raw.frames().dim());
            for (i, row) in raw.frames().rows().into_iter().enumerate() {
                let e = swiss_roll_embed(&[row[0], row[1], row[2]])?;
                x.row_mut(i).assign(&ndarray::ArrayView1::from(&e));
            }
            let observed = raw.map_frames(x)?.with_meta("embedding", "swissroll");
            Ok(BenchmarkData {
                trajectory: observed,
                latent: Some(raw),
            })
        }
        _ => Ok(BenchmarkData {
            trajectory: raw,
            latent: None,
        }),
    }
}
