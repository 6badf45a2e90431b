//! Post-training analysis of a checkpoint: reduced-dynamics simulation,
//! implied-timescale comparison, potential surfaces, level-set curves and
//! equilibrium sampling.
//!
//! Reduced trajectories are saved once per training frame, so timescales of
//! the full-state and reduced MSMs share the unit `time_per_frame`.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::{assign, its_curve, kmeans, ItsRow, DEFAULT_KMEANS_ITERS, DEFAULT_STATES};
use crate::potential::GmmSnapshot;
use crate::simulate::{euler_maruyama, SimConfig};
use crate::training::Checkpoint;
use crate::trajectory::Trajectory;

pub const DEFAULT_LAGS: [usize; 10] = [1, 2, 5, 10, 20, 30, 50, 75, 100, 150];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReducedSimSettings {
    pub n_frames: usize,
    /// Integrator steps per saved frame.
    pub substeps: usize,
    pub burn_in_frames: usize,
    pub seed: u64,
}

impl Default for ReducedSimSettings {
    fn default() -> Self {
        ReducedSimSettings {
            n_frames: 100_000,
            substeps: 20,
            burn_in_frames: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItsSettings {
    pub n_states: usize,
    pub lags: Vec<usize>,
    pub n_timescales: usize,
    pub kmeans_seed: u64,
    pub kmeans_iters: usize,
}

impl Default for ItsSettings {
    fn default() -> Self {
        ItsSettings {
            n_states: DEFAULT_STATES,
            lags: DEFAULT_LAGS.to_vec(),
            n_timescales: 6,
            kmeans_seed: 0,
            kmeans_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

/// Brownian dynamics at unit inverse temperature on the learned potential,
/// started from a draw of the learned equilibrium density.
pub fn simulate_reduced(ckpt: &Checkpoint, s: &ReducedSimSettings) -> Result<Trajectory> {
    let snap = ckpt.snapshot()?;
    if s.substeps == 0 || s.n_frames == 0 {
        return Err(Error::config("reduced simulation needs substeps >= 1 and n_frames >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let z0 = snap.sample(1, &mut rng);
    let grid = ckpt.potential()?.grid();
    let span = grid
        .lb
        .iter()
        .zip(&grid.ub)
        .map(|(l, u)| l.abs().max(u.abs()) + (u - l))
        .fold(0.0, f64::max);
    let cfg = SimConfig {
        beta: 1.0,
        step: ckpt.time_per_frame / s.substeps as f64,
        save_every: s.substeps,
        n_frames: s.n_frames,
        seed: s.seed.wrapping_add(1),
        burn_in_steps: s.burn_in_frames * s.substeps,
        bound: 100.0 * span,
    };
    let t = euler_maruyama(&snap, &cfg, z0.row(0).as_slice().expect("contiguous"))?;
    let frames = t.into_frames();
    Trajectory::new(frames, ckpt.time_per_frame)
}

/// Implied timescales of a k-means MSM on `parts`, with frames spaced
/// `frame_dt` apart.
pub fn its_from_parts(parts: &[ArrayView2<'_, f64>], frame_dt: f64, s: &ItsSettings) -> Result<Vec<ItsRow>> {
    if parts.is_empty() {
        return Err(Error::config("no trajectories to analyse"));
    }
    let all = concatenate(Axis(0), parts).map_err(|_| Error::config("trajectories differ in dimension"))?;
    let km = kmeans(all.view(), s.n_states, s.kmeans_seed, s.kmeans_iters)?;
    let dtrajs: Vec<Vec<usize>> = parts.iter().map(|p| assign(*p, km.centers.view())).collect();
    let max_len = parts.iter().map(|p| p.nrows()).max().unwrap_or(0);
    let lags: Vec<usize> = s.lags.iter().copied().filter(|&l| l < max_len).collect();
    if lags.is_empty() {
        return Err(Error::config("every lag exceeds the trajectory length"));
    }
    its_curve(&dtrajs, km.centers.view(), &lags, frame_dt, s.n_timescales)
}

/// Index of the first lag whose slowest timescale changes by less than
/// `rel_change` at the next lag; the last lag when none does.
pub fn plateau_index(rows: &[ItsRow], rel_change: f64) -> Option<usize> {
    let t1 = |r: &ItsRow| r.timescales.first().copied().flatten();
    if rows.is_empty() {
        return None;
    }
    for i in 0..rows.len().saturating_sub(1) {
        if let (Some(a), Some(b)) = (t1(&rows[i]), t1(&rows[i + 1])) {
            if ((b - a) / a).abs() < rel_change {
                return Some(i);
            }
        }
    }
    Some(rows.len() - 1)
}

/// Mixture potential `V = -log μ` on a regular grid with `resolution`
/// points per axis. Rows are `(z_1, .., z_d, V)`.
pub fn potential_surface(snap: &GmmSnapshot, lb: &[f64], ub: &[f64], resolution: usize) -> Result<Array2<f64>> {
    let d = snap.dim();
    if lb.len() != d || ub.len() != d {
        return Err(Error::config(format!("surface bounds must have {d} entries")));
    }
    if resolution < 2 {
        return Err(Error::config("surface resolution must be at least 2"));
    }
    if lb.iter().zip(ub).any(|(l, u)| !(l < u)) {
        return Err(Error::config("surface bounds need lb < ub on every axis"));
    }
    let n = resolution.pow(d as u32);
    let mut pts = Array2::zeros((n, d));
    for i in 0..n {
        let mut rem = i;
        for j in (0..d).rev() {
            let k = rem % resolution;
            rem /= resolution;
            pts[[i, j]] = lb[j] + (ub[j] - lb[j]) * k as f64 / (resolution - 1) as f64;
        }
    }
    let log_mu = snap.log_density_batch(pts.view())?;
    let v = log_mu.mapv(|l| -l).insert_axis(Axis(1));
    Ok(concatenate(Axis(1), &[pts.view(), v.view()]).expect("same rows"))
}

/// Strict local minima of values on a `resolution^d` grid (row-major, last
/// axis fastest), compared against all neighbours including diagonals.
/// Boundary points count when they are below every neighbour that exists.
pub fn grid_local_minima(values: &[f64], resolution: usize, d: usize, include: impl Fn(usize) -> bool) -> Vec<usize> {
    let idx = |c: &[usize]| c.iter().fold(0, |acc, &k| acc * resolution + k);
    let mut out = Vec::new();
    let mut coord = vec![0usize; d];
    for i in 0..values.len() {
        let mut rem = i;
        for j in (0..d).rev() {
            coord[j] = rem % resolution;
            rem /= resolution;
        }
        if !include(i) {
            continue;
        }
        let mut is_min = true;
        for off in 0..3usize.pow(d as u32) {
            let mut o = off;
            let mut nb = coord.clone();
            let mut zero = true;
            let mut inside = true;
            for j in (0..d).rev() {
                let step = (o % 3) as isize - 1;
                o /= 3;
                if step != 0 {
                    zero = false;
                }
                let c = coord[j] as isize + step;
                if c < 0 || c >= resolution as isize {
                    inside = false;
                }
                nb[j] = c.max(0) as usize;
            }
            if zero || !inside {
                continue;
            }
            if values[idx(&nb)] <= values[i] {
                is_min = false;
                break;
            }
        }
        if is_min {
            out.push(i);
        }
    }
    out
}

/// Minima of the learned potential over the box spanned by `z_data`.
/// Only grid points with `V` no higher than the `coverage` quantile of `V`
/// over the data are considered, which excludes regions the data never
/// populated.
pub fn potential_minima(snap: &GmmSnapshot, z_data: ArrayView2<'_, f64>, resolution: usize, coverage: f64) -> Result<Array2<f64>> {
    let d = snap.dim();
    if z_data.ncols() != d || z_data.nrows() == 0 {
        return Err(Error::config("projected data must be non-empty and match the potential dimension"));
    }
    let lb: Vec<f64> = (0..d).map(|j| z_data.column(j).fold(f64::INFINITY, |a, &b| a.min(b))).collect();
    let ub: Vec<f64> = (0..d).map(|j| z_data.column(j).fold(f64::NEG_INFINITY, |a, &b| a.max(b))).collect();
    let surface = potential_surface(snap, &lb, &ub, resolution)?;
    let v: Vec<f64> = surface.column(d).to_vec();
    let mut data_v: Vec<f64> = snap.log_density_batch(z_data)?.iter().map(|l| -l).collect();
    data_v.sort_by(f64::total_cmp);
    let q = ((coverage * data_v.len() as f64).ceil() as usize).clamp(1, data_v.len()) - 1;
    let cut = data_v[q];
    let minima = grid_local_minima(&v, resolution, d, |i| v[i] <= cut);
    let mut out = Array2::zeros((minima.len(), d + 1));
    for (r, &i) in minima.iter().enumerate() {
        out.row_mut(r).assign(&surface.row(i));
    }
    Ok(out)
}

/// `F⁻¹(z, 0)` for `z` on a uniform grid over `[lb, ub]`; needs `d = 1`.
/// Rows are `(z, x_1, .., x_D)` in the raw configuration space.
pub fn level_set_curve(ckpt: &Checkpoint, lb: f64, ub: f64, resolution: usize) -> Result<Array2<f64>> {
    if ckpt.rc_dim() != 1 {
        return Err(Error::config(format!(
            "level-set curves need a 1-dimensional reaction coordinate, model has {}",
            ckpt.rc_dim()
        )));
    }
    if resolution < 2 || !(lb < ub) {
        return Err(Error::config("level-set grid needs lb < ub and at least 2 points"));
    }
    let z = Array1::linspace(lb, ub, resolution).insert_axis(Axis(1));
    let mut zv = Array2::zeros((resolution, ckpt.flow.dim()));
    zv.column_mut(0).assign(&z.column(0));
    let x = ckpt.reconstruct(zv.view())?;
    Ok(concatenate(Axis(1), &[z.view(), x.view()]).expect("same rows"))
}

/// `n` configurations `F⁻¹(z, v)` with `z ~ μ` and `v ~ N(0, I)`.
pub fn sample_equilibrium(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<Array2<f64>> {
    let snap = ckpt.snapshot()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = ckpt.rc_dim();
    let z = snap.sample(n, &mut rng);
    let mut zv = Array2::zeros((n, ckpt.flow.dim()));
    zv.slice_mut(ndarray::s![.., ..d]).assign(&z);
    for x in zv.slice_mut(ndarray::s![.., d..]).iter_mut() {
        *x = StandardNormal.sample(&mut rng);
    }
    if n == 0 {
        return Ok(Array2::zeros((0, ckpt.input_dim())));
    }
    ckpt.reconstruct(zv.view())
}

/// Total-variation distance between the histogram of 1-D samples and the
/// mixture mass of the same bins, with `bins` equal bins over
/// `[lb, ub]`. Mass outside the range is compared as one extra bin.
pub fn histogram_tv_1d(snap: &GmmSnapshot, samples: &[f64], lb: f64, ub: f64, bins: usize) -> Result<f64> {
    if snap.dim() != 1 || bins == 0 || !(lb < ub) || samples.is_empty() {
        return Err(Error::config("histogram comparison needs a 1-D mixture, samples, bins and lb < ub"));
    }
    let mut counts = vec![0.0; bins + 1];
    let width = (ub - lb) / bins as f64;
    for &s in samples {
        let k = ((s - lb) / width).floor();
        let k = if k >= 0.0 && (k as usize) < bins { k as usize } else { bins };
        counts[k] += 1.0;
    }
    let n = samples.len() as f64;
    let w = snap.weights();
    let cdf = |x: f64| -> f64 {
        (0..w.len())
            .map(|k| w[k] * normal_cdf((x - snap.centers()[[k, 0]]) / snap.sigma()[[k, 0]]))
            .sum()
    };
    let mut tv = 0.0;
    let mut inside = 0.0;
    for (k, c) in counts.iter().take(bins).enumerate() {
        let p = cdf(lb + (k + 1) as f64 * width) - cdf(lb + k as f64 * width);
        inside += p;
        tv += (c / n - p).abs();
    }
    tv += (counts[bins] / n - (1.0 - inside)).abs();
    Ok(0.5 * tv)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function, relative error below 1.2e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Fraction of `samples` falling in the highest-density bins that hold
/// `quantile` of the `reference` mass, on a `bins^D` histogram over the
/// bounding box of `reference`.
pub fn high_density_coverage(reference: ArrayView2<'_, f64>, samples: ArrayView2<'_, f64>, bins: usize, quantile: f64) -> Result<f64> {
    let d = reference.ncols();
    if samples.ncols() != d || reference.nrows() == 0 || bins == 0 {
        return Err(Error::config("coverage needs non-empty reference data of the sample dimension"));
    }
    let lb: Vec<f64> = (0..d).map(|j| reference.column(j).fold(f64::INFINITY, |a, &b| a.min(b))).collect();
    let ub: Vec<f64> = (0..d).map(|j| reference.column(j).fold(f64::NEG_INFINITY, |a, &b| a.max(b))).collect();
    let cell = |row: ndarray::ArrayView1<'_, f64>| -> Option<usize> {
        let mut idx = 0;
        for j in 0..d {
            let w = (ub[j] - lb[j]).max(f64::MIN_POSITIVE);
            let k = ((row[j] - lb[j]) / w * bins as f64).floor();
            if !(k >= 0.0 && k <= bins as f64) {
                return None;
            }
            idx = idx * bins + (k as usize).min(bins - 1);
        }
        Some(idx)
    };
    let mut hist = vec![0usize; bins.pow(d as u32)];
    for r in reference.rows() {
        if let Some(c) = cell(r) {
            hist[c] += 1;
        }
    }
    let mut order: Vec<usize> = (0..hist.len()).collect();
    order.sort_by(|a, b| hist[*b].cmp(&hist[*a]).then(a.cmp(b)));
    let target = quantile * reference.nrows() as f64;
    let mut selected = vec![false; hist.len()];
    let mut acc = 0.0;
    for c in order {
        if acc >= target {
            break;
        }
        selected[c] = true;
        acc += hist[c] as f64;
    }
    if samples.nrows() == 0 {
        return Ok(0.0);
    }
    let hits = samples.rows().into_iter().filter(|r| cell(*r).is_some_and(|c| selected[c])).count();
    Ok(hits as f64 / samples.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_mixture_1d() -> GmmSnapshot {
        GmmSnapshot::new(array![[-1.0], [1.0]], vec![0.5f64.ln(), 0.5f64.ln()], array![[0.4], [0.4]]).unwrap()
    }

    #[test]
    fn erfc_reference_values() {
        // erfc(0) = 1, erfc(1) = 0.157299207050285, erfc(-2) = 1.995322265018953
        assert!((erfc(0.0) - 1.0).abs() < 1e-7);
        assert!((erfc(1.0) - 0.157_299_207_050_285).abs() < 1e-7);
        assert!((erfc(-2.0) - 1.995_322_265_018_953).abs() < 1e-7);
    }

    #[test]
    fn minima_on_a_1d_grid() {
        let v = [3.0, 1.0, 2.0, 0.5, 4.0, 4.0, 5.0];
        assert_eq!(grid_local_minima(&v, 7, 1, |_| true), vec![1, 3]);
        let edge = [0.0, 1.0, 2.0];
        assert_eq!(grid_local_minima(&edge, 3, 1, |_| true), vec![0]);
        let flat = [1.0, 1.0, 1.0];
        assert!(grid_local_minima(&flat, 3, 1, |_| true).is_empty());
    }

    #[test]
    fn minima_on_a_2d_grid_use_diagonals() {
        // 3x3 grid with the centre below its edge neighbours but not a corner
        let v = [5.0, 5.0, 0.0, 5.0, 1.0, 5.0, 5.0, 5.0, 5.0];
        assert_eq!(grid_local_minima(&v, 3, 2, |_| true), vec![2]);
    }

    #[test]
    fn two_well_mixture_has_two_minima() {
        let snap = unit_mixture_1d();
        let z = Array1::linspace(-2.0, 2.0, 401).insert_axis(Axis(1));
        let m = potential_minima(&snap, z.view(), 801, 1.0).unwrap();
        assert_eq!(m.nrows(), 2);
        assert!((m[[0, 0]] + 1.0).abs() < 0.05 && (m[[1, 0]] - 1.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn surface_rows_and_values() {
        let snap = unit_mixture_1d();
        let s = potential_surface(&snap, &[-1.0], &[1.0], 5).unwrap();
        assert_eq!(s.dim(), (5, 2));
        assert_eq!(s[[0, 0]], -1.0);
        assert_eq!(s[[4, 0]], 1.0);
        assert!((s[[2, 1]] + snap.log_density(&[0.0]).unwrap()).abs() < 1e-12);
        assert!(potential_surface(&snap, &[1.0], &[-1.0], 5).unwrap_err().is_config());
    }

    #[test]
    fn mixture_samples_match_their_histogram() {
        let snap = unit_mixture_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = snap.sample(100_000, &mut rng);
        let tv = histogram_tv_1d(&snap, s.column(0).as_slice().unwrap(), -2.5, 2.5, 50).unwrap();
        assert!(tv < 0.02, "tv {tv}");
        let shifted: Vec<f64> = s.column(0).iter().map(|x| x + 0.5).collect();
        assert!(histogram_tv_1d(&snap, &shifted, -2.5, 2.5, 50).unwrap() > 0.2);
    }

    #[test]
    fn coverage_of_the_reference_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Array2::from_shape_fn((20_000, 2), |_| StandardNormal.sample(&mut rng));
        let c = high_density_coverage(data.view(), data.view(), 30, 0.99).unwrap();
        assert!((0.99..0.999).contains(&c), "{c}");
        let far = data.mapv(|x| x + 50.0);
        assert_eq!(high_density_coverage(data.view(), far.view(), 30, 0.99).unwrap(), 0.0);
    }

    #[test]
    fn plateau_detection() {
        let row = |lag, t: f64| ItsRow {
            lag_steps: lag,
            tau: lag as f64,
            timescales: vec![Some(t)],
        };
        let rows = vec![row(1, 5.0), row(2, 8.0), row(5, 9.5), row(10, 9.8)];
        assert_eq!(plateau_index(&rows, 0.1), Some(2));
        assert_eq!(plateau_index(&rows, 0.01), Some(3));
    }
}
