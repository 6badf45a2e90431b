//! Multilayer perceptrons evaluated either directly or on a [`Graph`].

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::fastmath;
use super::graph::{Graph, Var};
use super::params::{BoundParams, ParamVector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputActivation {
    Identity,
    Exponential,
    /// `bound * tanh(x)`
    Bounded { bound: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        hidden_widths: Vec<usize>,
        output_activation: OutputActivation,
    ) -> Self {
        MlpSpec {
            input_dim,
            output_dim,
            hidden_widths,
            hidden_activation: HiddenActivation::Tanh,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("MLP input and output dimensions must be positive"));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config("MLP needs at least one hidden layer of positive width"));
        }
        if let OutputActivation::Bounded { bound } = self.output_activation {
            if !(bound > 0.0 && bound.is_finite()) {
                return Err(Error::config(format!("invalid output bound {bound}")));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut prev = self.input_dim;
        for &w in &self.hidden_widths {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    /// Number of scalars in the flat `[W0, b0, W1, b1, ...]` layout.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// An MLP whose weights live in a [`ParamVector`] as consecutive segments
/// `W0, b0, W1, b1, ...` with `W` of shape `fan_in × fan_out` and `b` a row.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    first_segment: usize,
}

impl Mlp {
    /// Append freshly initialized weights for `spec` to `params`.
    ///
    /// Weights are Glorot-uniform, biases zero, and the last layer's weights
    /// are multiplied by `final_scale`.
    pub fn init<R: Rng + ?Sized>(
        spec: MlpSpec,
        params: &mut ParamVector,
        prefix: &str,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let first_segment = params.segments().len();
        let dims = spec.layer_dims();
        let last = dims.len() - 1;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let scale = if l == last { final_scale } else { 1.0 };
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| scale * rng.random_range(-limit..=limit))
                .collect();
            params.push_segment(format!("{prefix}.w{l}"), fan_in, fan_out, w);
            params.push_segment(format!("{prefix}.b{l}"), 1, fan_out, vec![0.0; fan_out]);
        }
        Ok(Mlp {
            spec,
            first_segment,
        })
    }

    /// Re-attach to segments that already exist (e.g. after loading).
    pub fn attach(spec: MlpSpec, params: &ParamVector, first_segment: usize) -> Result<Self> {
        spec.validate()?;
        for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let ok = |idx: usize, r: usize, c: usize| {
                params
                    .segments()
                    .get(idx)
                    .is_some_and(|s| s.rows == r && s.cols == c)
            };
            if !ok(first_segment + 2 * l, fan_in, fan_out) || !ok(first_segment + 2 * l + 1, 1, fan_out) {
                return Err(Error::config(format!(
                    "parameter segments starting at {first_segment} do not match the MLP layout"
                )));
            }
        }
        Ok(Mlp {
            spec,
            first_segment,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn first_segment(&self) -> usize {
        self.first_segment
    }

    pub fn segment_count(&self) -> usize {
        2 * (self.spec.hidden_widths.len() + 1)
    }

    /// Zero the weights and bias of the output layer.
    pub fn zero_output_layer(&self, params: &mut ParamVector) {
        let last = self.spec.hidden_widths.len();
        params.segment_mut(self.first_segment + 2 * last).fill(0.0);
        params.segment_mut(self.first_segment + 2 * last + 1).fill(0.0);
    }

    /// Batched evaluation; rows of `input` are samples.
    pub fn forward(&self, params: &ParamVector, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let layers: Vec<_> = (0..=self.spec.hidden_widths.len())
            .map(|l| {
                (
                    params.segment(self.first_segment + 2 * l),
                    params.segment(self.first_segment + 2 * l + 1),
                )
            })
            .collect();
        forward_plain(&self.spec, &layers, input, true)
    }

    /// Output before the output activation.
    pub fn forward_preactivation(
        &self,
        params: &ParamVector,
        input: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let layers: Vec<_> = (0..=self.spec.hidden_widths.len())
            .map(|l| {
                (
                    params.segment(self.first_segment + 2 * l),
                    params.segment(self.first_segment + 2 * l + 1),
                )
            })
            .collect();
        forward_plain(&self.spec, &layers, input, false)
    }

    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundParams, input: Var) -> Var {
        let pre = self.forward_graph_preactivation(g, bound, input);
        match self.spec.output_activation {
            OutputActivation::Identity => pre,
            OutputActivation::Exponential => g.exp(pre),
            OutputActivation::Bounded { bound } => {
                let t = g.tanh(pre);
                g.scale(t, bound)
            }
        }
    }

    pub fn forward_graph_preactivation(&self, g: &mut Graph, bound: &BoundParams, input: Var) -> Var {
        let n_layers = self.spec.hidden_widths.len() + 1;
        let mut h = input;
        for l in 0..n_layers {
            let w = bound.var(self.first_segment + 2 * l);
            let b = bound.var(self.first_segment + 2 * l + 1);
            let z = g.matmul(h, w);
            h = g.add_bias(z, b);
            if l + 1 < n_layers {
                h = match self.spec.hidden_activation {
                    HiddenActivation::Tanh => g.tanh(h),
                };
            }
        }
        h
    }
}

fn forward_plain(
    spec: &MlpSpec,
    layers: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>)],
    input: ArrayView2<'_, f64>,
    apply_output: bool,
) -> Result<Array2<f64>> {
    if input.ncols() != spec.input_dim {
        return Err(Error::config(format!(
            "MLP expects input width {}, got {}",
            spec.input_dim,
            input.ncols()
        )));
    }
    let mut h = input.to_owned();
    let n_layers = layers.len();
    for (l, (w, b)) in layers.iter().enumerate() {
        h = h.dot(w);
        h += &b.row(0).insert_axis(Axis(0));
        if l + 1 < n_layers {
            match spec.hidden_activation {
                HiddenActivation::Tanh => match h.as_slice_mut() {
                    Some(xs) => fastmath::tanh_inplace(xs),
                    None => h.mapv_inplace(fastmath::tanh),
                },
            }
        }
    }
    if apply_output {
        match spec.output_activation {
            OutputActivation::Identity => {}
            OutputActivation::Exponential => h.mapv_inplace(fastmath::exp),
            OutputActivation::Bounded { bound } => h.mapv_inplace(|x| bound * fastmath::tanh(x)),
        }
    }
    Ok(h)
}

/// Evaluate an MLP on a single input from a flat `[W0, b0, W1, b1, ...]`
/// parameter slice (row-major weights of shape `fan_in × fan_out`).
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(Error::config(format!(
            "MLP expects {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    if input.len() != spec.input_dim {
        return Err(Error::config(format!(
            "MLP expects input length {}, got {}",
            spec.input_dim,
            input.len()
        )));
    }
    let mut offset = 0;
    let mut layers = Vec::new();
    for (fan_in, fan_out) in spec.layer_dims() {
        let w = ArrayView2::from_shape((fan_in, fan_out), &params[offset..offset + fan_in * fan_out])
            .expect("weight layout");
        offset += fan_in * fan_out;
        let b = ArrayView2::from_shape((1, fan_out), &params[offset..offset + fan_out]).expect("bias layout");
        offset += fan_out;
        layers.push((w, b));
    }
    let x = ArrayView2::from_shape((1, input.len()), input).expect("input layout");
    let out = forward_plain(spec, &layers, x, true)?;
    Ok(out.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_identity_output_is_zero() {
        let spec = MlpSpec::new(3, 2, vec![4, 4], OutputActivation::Identity);
        let params = vec![0.0; spec.param_count()];
        let out = mlp_forward(&spec, &params, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_net_exponential_output_is_one() {
        let spec = MlpSpec::new(2, 3, vec![5], OutputActivation::Exponential);
        let params = vec![0.0; spec.param_count()];
        let out = mlp_forward(&spec, &params, &[7.0, -4.0]).unwrap();
        assert_eq!(out, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn one_hidden_unit_matches_hand_evaluation() {
        // 1-1-1 net: y = w1 * tanh(w0 * x + b0) + b1
        let spec = MlpSpec::new(1, 1, vec![1], OutputActivation::Identity);
        let (w0, b0, w1, b1): (f64, f64, f64, f64) = (0.7, -0.2, 1.3, 0.05);
        let x = 0.9;
        let expected = w1 * (w0 * x + b0).tanh() + b1;
        let out = mlp_forward(&spec, &[w0, b0, w1, b1], &[x]).unwrap();
        assert!((out[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let spec = MlpSpec::new(2, 1, vec![3], OutputActivation::Identity);
        let params = vec![0.0; spec.param_count()];
        assert!(mlp_forward(&spec, &params, &[1.0]).unwrap_err().is_config());
        assert!(mlp_forward(&spec, &params[1..], &[1.0, 2.0]).unwrap_err().is_config());
    }

    #[test]
    fn empty_hidden_layers_rejected() {
        let spec = MlpSpec::new(2, 1, vec![], OutputActivation::Identity);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pv = ParamVector::new();
        let spec = MlpSpec::new(3, 2, vec![8, 8], OutputActivation::Bounded { bound: 2.0 });
        let mlp = Mlp::init(spec, &mut pv, "net", 1.0, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let plain = mlp.forward(&pv, x.view()).unwrap();
        let mut g = Graph::new();
        let bound = pv.bind(&mut g, false);
        let xv = g.constant(x);
        let out = mlp.forward_graph(&mut g, &bound, xv);
        assert_eq!(g.value(out), &plain);
    }

    #[test]
    fn final_scale_shrinks_output_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pv = ParamVector::new();
        let spec = MlpSpec::new(2, 2, vec![16], OutputActivation::Identity);
        let mlp = Mlp::init(spec, &mut pv, "net", 0.01, &mut rng).unwrap();
        let last_w = pv.segment(mlp.first_segment() + 2);
        let limit = (6.0f64 / 18.0).sqrt() * 0.01;
        assert!(last_w.iter().all(|w| w.abs() <= limit));
    }
}
