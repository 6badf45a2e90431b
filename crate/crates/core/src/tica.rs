//! Time-lagged independent component analysis.
//!
//! Finds linear components of maximal lag-`Δt` autocorrelation subject to
//! `C(0)`-orthonormality. The transformed data have zero mean and identity
//! covariance, with the slowest components first. A least-squares linear
//! map back to the original coordinates is fitted separately.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff for the rank of `C(0)`.
pub const DEFAULT_RANK_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TicaModel {
    pub mean: Vec<f64>,
    /// `r × D`; rows are components.
    #[serde(with = "crate::serde_rows")]
    pub w: Array2<f64>,
    /// `D × r` reconstruction map, when fitted.
    #[serde(with = "crate::serde_rows::option", default)]
    pub w_inv_hat: Option<Array2<f64>>,
    pub lag: usize,
    /// Autocorrelations of the components, descending.
    pub eigenvalues: Vec<f64>,
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenpairs sorted by eigenvalue, descending.
fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn check_parts(parts: &[ArrayView2<'_, f64>], lag: usize) -> Result<usize> {
    let d = parts.first().map(|p| p.ncols()).ok_or_else(|| Error::config("no trajectories given"))?;
    for (i, p) in parts.iter().enumerate() {
        if p.ncols() != d {
            return Err(Error::config(format!(
                "trajectory {i} has dimension {}, expected {d}",
                p.ncols()
            )));
        }
        if lag >= p.nrows() {
            return Err(Error::config(format!(
                "lag {lag} is not shorter than trajectory {i} ({} frames)",
                p.nrows()
            )));
        }
    }
    Ok(d)
}

/// Mean over all frames of all trajectories.
pub fn frame_mean(parts: &[ArrayView2<'_, f64>]) -> Array1<f64> {
    let (origin, shifted) = shifted_mean(parts);
    origin + shifted
}

/// Mean accumulated relative to the first frame, which keeps constant data
/// exactly centered.
fn shifted_mean(parts: &[ArrayView2<'_, f64>]) -> (Array1<f64>, Array1<f64>) {
    let origin = parts[0].row(0).to_owned();
    let total: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut mean = Array1::zeros(origin.len());
    for p in parts {
        mean += &(p - &origin.view().insert_axis(Axis(0))).sum_axis(Axis(0));
    }
    (origin, mean / total as f64)
}

/// `C(0)` with `1/T` normalization and the symmetrized lag covariance with
/// `1/(2(T - Δt))`, pooled over trajectories. Returns `(mean, C0, Cτ)`.
pub fn estimate_covariances_multi(
    parts: &[ArrayView2<'_, f64>],
    lag: usize,
) -> Result<(Array1<f64>, Array2<f64>, Array2<f64>)> {
    let d = check_parts(parts, lag)?;
    let (origin, shifted) = shifted_mean(parts);
    let mut c0 = Array2::<f64>::zeros((d, d));
    let mut ct = Array2::<f64>::zeros((d, d));
    let mut n0 = 0usize;
    let mut nt = 0usize;
    for p in parts {
        let dx = (p - &origin.view().insert_axis(Axis(0))) - shifted.view().insert_axis(Axis(0));
        c0 += &dx.t().dot(&dx);
        n0 += dx.nrows();
        let t = dx.nrows();
        let a = dx.slice(ndarray::s![..t - lag, ..]);
        let b = dx.slice(ndarray::s![lag.., ..]);
        let ab = a.t().dot(&b);
        ct += &ab;
        ct += &ab.t();
        nt += t - lag;
    }
    c0 /= n0 as f64;
    ct /= 2.0 * nt as f64;
    Ok((origin + shifted, c0, ct))
}

pub fn estimate_covariances(frames: ArrayView2<'_, f64>, lag: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let (_, c0, ct) = estimate_covariances_multi(&[frames], lag)?;
    Ok((c0, ct))
}

impl TicaModel {
    /// Solve `Cτ w = λ C0 w` by whitening with the eigendecomposition of
    /// `C0`, discarding directions with eigenvalue below `rank_eps · max`.
    /// `max_dim` optionally keeps only the slowest components.
    pub fn from_covariances(
        mean: Vec<f64>,
        c0: &Array2<f64>,
        ct: &Array2<f64>,
        lag: usize,
        rank_eps: f64,
        max_dim: Option<usize>,
    ) -> Result<Self> {
        let d = mean.len();
        if c0.dim() != (d, d) || ct.dim() != (d, d) {
            return Err(Error::config("covariance shapes do not match the mean"));
        }
        let (l0, u0) = sorted_eigen(&to_na(c0));
        let top = l0.first().copied().unwrap_or(0.0);
        if !(top > 0.0) || !top.is_finite() {
            return Err(Error::Degenerate("covariance matrix is numerically zero".into()));
        }
        let keep: Vec<usize> = (0..d).filter(|&i| l0[i] > rank_eps * top).collect();
        let r0 = keep.len();
        // L = Λ^{-1/2} Uᵀ restricted to the retained directions
        let l = DMatrix::from_fn(r0, d, |i, j| u0[(j, keep[i])] / l0[keep[i]].sqrt());
        let ct_white = symmetrize(&(&l * to_na(ct) * l.transpose()));
        let (lt, vt) = sorted_eigen(&ct_white);
        let r = max_dim.map_or(r0, |m| m.min(r0));
        if r == 0 {
            return Err(Error::config("TICA must retain at least one component"));
        }
        let mut w = from_na(&(vt.transpose() * &l)).slice(ndarray::s![..r, ..]).to_owned();
        for mut row in w.rows_mut() {
            let big = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if big < 0.0 {
                row.mapv_inplace(|v| -v);
            }
        }
        Ok(TicaModel {
            mean,
            w,
            w_inv_hat: None,
            lag,
            eigenvalues: lt[..r].to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `W (x - x̄)` for every row.
    pub fn transform(&self, frames: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.input_dim() {
            return Err(Error::config(format!(
                "TICA expects dimension {}, got {}",
                self.input_dim(),
                frames.ncols()
            )));
        }
        let mean = Array1::from(self.mean.clone());
        let dx = &frames - &mean.view().insert_axis(Axis(0));
        Ok(dx.dot(&self.w.t()))
    }

    /// Least-squares optimal `Ŵ⁻¹ = δX Yᵀ (Y Yᵀ)⁺` with `Y = W δX`.
    pub fn fit_reconstruction(&mut self, parts: &[ArrayView2<'_, f64>]) -> Result<()> {
        let mean = Array1::from(self.mean.clone());
        let r = self.output_dim();
        let d = self.input_dim();
        let mut xy = Array2::<f64>::zeros((d, r));
        let mut yy = Array2::<f64>::zeros((r, r));
        for p in parts {
            if p.ncols() != d {
                return Err(Error::config("reconstruction data dimension mismatch"));
            }
            let dx = p - &mean.view().insert_axis(Axis(0));
            let y = dx.dot(&self.w.t());
            xy += &dx.t().dot(&y);
            yy += &y.t().dot(&y);
        }
        let pinv = to_na(&yy)
            .pseudo_inverse(1e-12 * yy.diag().iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .map_err(|e| Error::numeric(format!("pseudo-inverse failed: {e}")))?;
        self.w_inv_hat = Some(xy.dot(&from_na(&pinv)));
        Ok(())
    }

    /// `Ŵ⁻¹ y + x̄` for every row.
    pub fn reconstruct(&self, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let winv = self
            .w_inv_hat
            .as_ref()
            .ok_or_else(|| Error::config("TICA model has no reconstruction map"))?;
        if y.ncols() != self.output_dim() {
            return Err(Error::config(format!(
                "reconstruction expects dimension {}, got {}",
                self.output_dim(),
                y.ncols()
            )));
        }
        let mean = Array1::from(self.mean.clone());
        Ok(y.dot(&winv.t()) + mean.view().insert_axis(Axis(0)))
    }
}

/// Fit on pooled trajectories, including the reconstruction map.
pub fn fit_tica_multi(
    parts: &[ArrayView2<'_, f64>],
    lag: usize,
    rank_eps: f64,
    max_dim: Option<usize>,
) -> Result<TicaModel> {
    let (mean, c0, ct) = estimate_covariances_multi(parts, lag)?;
    let mut model = TicaModel::from_covariances(mean.to_vec(), &c0, &ct, lag, rank_eps, max_dim)?;
    model.fit_reconstruction(parts)?;
    Ok(model)
}

pub fn fit_tica(frames: ArrayView2<'_, f64>, lag: usize, rank_eps: f64) -> Result<TicaModel> {
    fit_tica_multi(&[frames], lag, rank_eps, None)
}
