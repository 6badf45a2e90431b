//! Transition pairs drawn from within individual trajectories.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    pub trajectory: usize,
    pub frame: usize,
}

#[derive(Clone, Debug)]
pub struct TransitionDataset {
    parts: Vec<Array2<f64>>,
    pairs: Vec<PairIndex>,
    lag_steps: usize,
    tau: f64,
}

impl TransitionDataset {
    /// All pairs `(x_t, x_{t+lag})` with both frames in the same trajectory.
    /// `tau` is the lag in reduced-dynamics time units.
    pub fn new(parts: Vec<Array2<f64>>, lag_steps: usize, tau: f64) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::config("no training trajectories"));
        }
        if lag_steps == 0 {
            return Err(Error::config("training lag must be at least one step"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config(format!("lag time must be positive, got {tau}")));
        }
        let dim = parts[0].ncols();
        let mut pairs = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            if p.ncols() != dim {
                return Err(Error::config(format!(
                    "trajectory {i} has dimension {}, expected {dim}",
                    p.ncols()
                )));
            }
            if p.nrows() <= lag_steps {
                return Err(Error::config(format!(
                    "lag {lag_steps} exceeds trajectory {i} with {} frames",
                    p.nrows()
                )));
            }
            pairs.extend((0..p.nrows() - lag_steps).map(|frame| PairIndex { trajectory: i, frame }));
        }
        Ok(TransitionDataset {
            parts,
            pairs,
            lag_steps,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.parts[0].ncols()
    }

    pub fn lag_steps(&self) -> usize {
        self.lag_steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn pairs(&self) -> &[PairIndex] {
        &self.pairs
    }

    pub fn parts(&self) -> &[Array2<f64>] {
        &self.parts
    }

    pub fn frame_count(&self) -> usize {
        self.parts.iter().map(|p| p.nrows()).sum()
    }

    /// `(x_t, x_{t+lag})` rows for the given pair indices.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let d = self.dim();
        let mut from = Array2::zeros((indices.len(), d));
        let mut to = Array2::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            let p = self.pairs[i];
            let part = &self.parts[p.trajectory];
            from.row_mut(r).assign(&part.row(p.frame));
            to.row_mut(r).assign(&part.row(p.frame + self.lag_steps));
        }
        (from, to)
    }

    /// Apply `f` to every trajectory, e.g. a frozen flow projection.
    pub fn map_parts<F>(&self, mut f: F) -> Result<Vec<Array2<f64>>>
    where
        F: FnMut(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
    {
        self.parts.iter().map(|p| f(p.view())).collect()
    }
}
