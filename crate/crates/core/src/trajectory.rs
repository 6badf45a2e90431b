//! Time-ordered frames with a fixed frame spacing.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frames: Array2<f64>,
    frame_dt: f64,
    pub metadata: BTreeMap<String, String>,
}

impl Trajectory {
    /// Rejects empty, non-finite, or zero-width data and a non-positive
    /// frame spacing.
    pub fn new(frames: Array2<f64>, frame_dt: f64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::config("trajectory has no frames"));
        }
        if frames.ncols() == 0 {
            return Err(Error::config("trajectory frames have zero dimensions"));
        }
        if !(frame_dt > 0.0) || !frame_dt.is_finite() {
            return Err(Error::config(format!("frame spacing must be positive, got {frame_dt}")));
        }
        if let Some(pos) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "trajectory entry at frame {}, column {} is not finite",
                pos / frames.ncols(),
                pos % frames.ncols()
            )));
        }
        Ok(Trajectory {
            frames,
            frame_dt,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    pub fn frame_dt(&self) -> f64 {
        self.frame_dt
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Same spacing and metadata, new frames.
    pub fn map_frames(&self, frames: Array2<f64>) -> Result<Self> {
        let mut t = Trajectory::new(frames, self.frame_dt)?;
        t.metadata = self.metadata.clone();
        Ok(t)
    }

    /// Frames `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::config(format!(
                "frame range {start}..{end} is invalid for {} frames",
                self.len()
            )));
        }
        self.map_frames(self.frames.slice(ndarray::s![start..end, ..]).to_owned())
    }
}
