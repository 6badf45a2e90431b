//! Markov state models for validating reduced kinetics.
//!
//! Frames are discretized by k-means, transitions are counted at a fixed
//! lag with symmetrized counts, and the transition matrix is eigensolved
//! through its symmetric similarity transform so the spectrum is real.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;

pub const DEFAULT_STATES: usize = 50;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

#[derive(Clone, Debug)]
pub struct KMeans {
    pub centers: Array2<f64>,
    /// Within-cluster SSE after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center for every row.
pub fn assign(data: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>) -> Vec<usize> {
    (0..data.nrows())
        .into_par_iter()
        .map(|i| nearest(data.row(i), centers).0)
        .collect()
}

fn nearest(x: ArrayView1<'_, f64>, centers: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. Stops when assignments
/// no longer change or after `max_iter` rounds.
pub fn kmeans(data: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let n = data.nrows();
    if k == 0 {
        return Err(Error::config("k-means needs at least one cluster"));
    }
    if n < k {
        return Err(Error::config(format!("k-means needs at least {k} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, r) in data.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, data.row(next)));
        }
    }
    let mut centers = data.select(Axis(0), &chosen);
    let mut labels: Vec<usize> = Vec::new();
    let mut objective = Vec::new();
    for _ in 0..max_iter.max(1) {
        let scored: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(data.row(i), centers.view()))
            .collect();
        objective.push(scored.iter().map(|s| s.1).sum());
        let new_labels: Vec<usize> = scored.iter().map(|s| s.0).collect();
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            sums.row_mut(l).scaled_add(1.0, &data.row(i));
            counts[l] += 1;
        }
        for (c, &m) in counts.iter().enumerate() {
            if m > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / m as f64));
            }
        }
    }
    Ok(KMeans { centers, objective })
}

/// Transition counts at `lag` within each discrete trajectory.
pub fn count_matrix(dtrajs: &[Vec<usize>], n_states: usize, lag: usize) -> Result<Array2<f64>> {
    if lag == 0 {
        return Err(Error::config("MSM lag must be at least one step"));
    }
    let mut c = Array2::<f64>::zeros((n_states, n_states));
    let mut any = false;
    for (t, d) in dtrajs.iter().enumerate() {
        if d.len() <= lag {
            return Err(Error::config(format!(
                "trajectory {t} has {} frames, not longer than lag {lag}",
                d.len()
            )));
        }
        for w in 0..d.len() - lag {
            let (a, b) = (d[w], d[w + lag]);
            if a >= n_states || b >= n_states {
                return Err(Error::config(format!("state index {} out of range", a.max(b))));
            }
            c[[a, b]] += 1.0;
            any = true;
        }
    }
    if !any {
        return Err(Error::Degenerate("no transitions to count".into()));
    }
    Ok(c)
}

/// States of the largest connected component of the undirected graph with
/// edges where `c` is positive. Ties go to the component with more counts.
fn largest_connected_set(c: &Array2<f64>) -> Vec<usize> {
    let n = c.nrows();
    let mass: Vec<f64> = c.sum_axis(Axis(1)).to_vec();
    let mut component = vec![usize::MAX; n];
    let mut best: Vec<usize> = Vec::new();
    let mut best_mass = 0.0;
    for s in 0..n {
        if component[s] != usize::MAX || mass[s] <= 0.0 {
            continue;
        }
        let mut members = vec![s];
        component[s] = s;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for j in 0..n {
                if component[j] == usize::MAX && c[[i, j]] > 0.0 {
                    component[j] = s;
                    members.push(j);
                }
            }
        }
        let m: f64 = members.iter().map(|&i| mass[i]).sum();
        if members.len() > best.len() || (members.len() == best.len() && m > best_mass) {
            members.sort_unstable();
            best = members;
            best_mass = m;
        }
    }
    best
}

/// `-τ / ln λ` for `0 < λ < 1`, undefined otherwise.
pub fn timescale(lambda: f64, tau: f64) -> Option<f64> {
    (lambda > 0.0 && lambda < 1.0).then(|| -tau / lambda.ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    /// Centers of the retained states.
    #[serde(with = "crate::serde_rows")]
    pub centers: Array2<f64>,
    /// Original indices of the retained states.
    pub active: Vec<usize>,
    pub lag_steps: usize,
    /// Lag in physical time units.
    pub tau: f64,
    /// Symmetrized counts restricted to the retained states.
    #[serde(with = "crate::serde_rows")]
    pub counts: Array2<f64>,
    #[serde(with = "crate::serde_rows")]
    pub transition: Array2<f64>,
    pub stationary: Vec<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Right eigenvectors as columns, normalized to unit `π`-weighted norm.
    #[serde(with = "crate::serde_rows")]
    pub right_eigenvectors: Array2<f64>,
}

impl MsmModel {
    /// Estimate from discrete trajectories over `centers.nrows()` states.
    pub fn from_dtrajs(dtrajs: &[Vec<usize>], centers: ArrayView2<'_, f64>, lag_steps: usize, tau: f64) -> Result<Self> {
        let n = centers.nrows();
        let raw = count_matrix(dtrajs, n, lag_steps)?;
        let sym = (&raw + &raw.t()) * 0.5;
        let active = largest_connected_set(&sym);
        let visited = sym.sum_axis(Axis(1)).iter().filter(|&&m| m > 0.0).count();
        if active.len() < visited {
            log::warn!(
                "transition graph is disconnected; keeping {} of {} visited states",
                active.len(),
                visited
            );
        }
        if active.len() < n {
            log::debug!("{} of {} states dropped from the MSM", n - active.len(), n);
        }
        let counts = sym.select(Axis(0), &active).select(Axis(1), &active);
        let rows = counts.sum_axis(Axis(1));
        let total = rows.sum();
        let m = active.len();
        let transition = Array2::from_shape_fn((m, m), |(i, j)| counts[[i, j]] / rows[i]);
        let stationary: Vec<f64> = rows.iter().map(|r| r / total).collect();
        let s = DMatrix::from_fn(m, m, |i, j| counts[[i, j]] / (rows[i] * rows[j]).sqrt());
        let eig = SymmetricEigen::new((&s + s.transpose()) * 0.5);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut right = Array2::from_shape_fn((m, m), |(r, c)| eig.eigenvectors[(r, order[c])] / stationary[r].sqrt());
        for mut col in right.columns_mut() {
            let big = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if big < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
        Ok(MsmModel {
            centers: centers.select(Axis(0), &active),
            active,
            lag_steps,
            tau,
            counts,
            transition,
            stationary,
            eigenvalues,
            right_eigenvectors: right,
        })
    }

    pub fn num_states(&self) -> usize {
        self.active.len()
    }

    /// Timescales of the non-stationary processes, slowest first.
    pub fn implied_timescales(&self) -> Vec<Option<f64>> {
        self.eigenvalues.iter().skip(1).map(|&l| timescale(l, self.tau)).collect()
    }

    /// Value of the `i`-th right eigenvector at the state nearest to `z`.
    pub fn eigenfunction(&self, i: usize, z: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if i >= self.num_states() {
            return Err(Error::config(format!("eigenfunction {i} exceeds {} states", self.num_states())));
        }
        if z.ncols() != self.centers.ncols() {
            return Err(Error::config("eigenfunction input dimension mismatch"));
        }
        Ok(assign(z, self.centers.view())
            .into_iter()
            .map(|s| self.right_eigenvectors[[s, i]])
            .collect())
    }
}

/// Discretize trajectories with `centers` and estimate at `lag_steps`.
pub fn estimate_msm(
    parts: &[ArrayView2<'_, f64>],
    centers: ArrayView2<'_, f64>,
    lag_steps: usize,
    frame_dt: f64,
) -> Result<MsmModel> {
    let dtrajs: Vec<Vec<usize>> = parts.iter().map(|p| assign(*p, centers)).collect();
    MsmModel::from_dtrajs(&dtrajs, centers, lag_steps, lag_steps as f64 * frame_dt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItsRow {
    pub lag_steps: usize,
    pub tau: f64,
    pub timescales: Vec<Option<f64>>,
}

/// Re-estimate at every lag and keep the `n_timescales` slowest processes.
pub fn its_curve(
    dtrajs: &[Vec<usize>],
    centers: ArrayView2<'_, f64>,
    lags: &[usize],
    frame_dt: f64,
    n_timescales: usize,
) -> Result<Vec<ItsRow>> {
    lags.iter()
        .map(|&lag| {
            let m = MsmModel::from_dtrajs(dtrajs, centers, lag, lag as f64 * frame_dt)?;
            let mut ts = m.implied_timescales();
            ts.resize(n_timescales, None);
            Ok(ItsRow {
                lag_steps: lag,
                tau: m.tau,
                timescales: ts,
            })
        })
        .collect()
}

/// `r_i(Φ(x))` for an MSM built on reaction-coordinate space.
pub fn lift_eigenfunction(msm: &MsmModel, flow: &FlowModel, i: usize, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let z = flow.project_batch(x)?;
    msm.eigenfunction(i, z.view())
}
