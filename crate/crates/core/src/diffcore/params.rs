//! Flat parameter storage with named matrix segments.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// All trainable parameters of one model, stored contiguously.
///
/// Segments are row-major matrices laid out back to back; their total size
/// always equals `values.len()`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a `rows × cols` segment, returning its index.
    pub fn push_segment(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> usize {
        assert_eq!(values.len(), rows * cols, "segment size mismatch");
        self.segments.push(Segment {
            name: name.into(),
            rows,
            cols,
            offset: self.values.len(),
        });
        self.values.extend(values);
        self.segments.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> ArrayView2<'_, f64> {
        let seg = &self.segments[idx];
        ArrayView2::from_shape((seg.rows, seg.cols), &self.values[seg.range()])
            .expect("segment layout")
    }

    pub fn segment_mut(&mut self, idx: usize) -> &mut [f64] {
        let range = self.segments[idx].range();
        &mut self.values[range]
    }

    /// Place every segment on the graph, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = (0..self.segments.len())
            .map(|i| {
                let arr = self.segment(i).to_owned();
                if trainable {
                    g.leaf(arr)
                } else {
                    g.constant(arr)
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn check_finite(&self) -> Result<()> {
        for seg in &self.segments {
            if let Some(pos) = self.values[seg.range()].iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(format!(
                    "parameter {}[{pos}] is not finite",
                    seg.name
                )));
            }
        }
        Ok(())
    }
}

/// Graph handles for the segments of a [`ParamVector`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, segment: usize) -> Var {
        self.vars[segment]
    }

    /// Flatten the gradients of all segments into one vector laid out like
    /// the parameter vector. Segments that did not influence the loss get
    /// zeros.
    pub fn flat_gradient(&self, grads: &Gradients, params: &ParamVector) -> Vec<f64> {
        let mut out = vec![0.0; params.len()];
        for (seg, &v) in params.segments().iter().zip(&self.vars) {
            if let Some(gv) = grads.get(v) {
                for (o, x) in out[seg.range()].iter_mut().zip(gv.iter()) {
                    *o = *x;
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentRepr {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamVectorRepr {
    segments: Vec<SegmentRepr>,
}

impl Serialize for ParamVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = ParamVectorRepr {
            segments: self
                .segments
                .iter()
                .map(|s| SegmentRepr {
                    name: s.name.clone(),
                    shape: [s.rows, s.cols],
                    values: self.values[s.range()].to_vec(),
                })
                .collect(),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ParamVectorRepr::deserialize(deserializer)?;
        let mut pv = ParamVector::new();
        for s in repr.segments {
            if s.values.len() != s.shape[0] * s.shape[1] {
                return Err(D::Error::custom(format!(
                    "segment {} has {} values for shape {:?}",
                    s.name,
                    s.values.len(),
                    s.shape
                )));
            }
            pv.push_segment(s.name, s.shape[0], s.shape[1], s.values);
        }
        pv.check_finite().map_err(D::Error::custom)?;
        Ok(pv)
    }
}

/// Convenience for building a segment from an owned array.
pub fn array_values(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}
