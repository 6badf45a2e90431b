//! Affine-coupling normalizing flow `F: x ↦ (z, v)`.
//!
//! The first `rc_dim` outputs are the reaction coordinate `z = Φ(x)`, the
//! remaining ones the noise part `v`, modelled as standard normal. The
//! density of `x` on a level set of `Φ` is then `S(x) = N(v | 0, I) |det ∂F/∂x|`.
//!
//! Each coupling block keeps one subset of coordinates fixed and applies an
//! elementwise affine map to the rest, `y = x ⊙ exp(s(x_c)) + t(x_c)`, where
//! `s` is bounded by `scale_bound · tanh`. Blocks alternate between
//! transforming the first `⌈D/2⌉` coordinates and the remaining ones.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{fastmath, BoundParams, Graph, Mlp, MlpSpec, OutputActivation, ParamVector, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub n_blocks: usize,
    pub hidden_widths: Vec<usize>,
    pub scale_bound: f64,
    /// Multiplier on the initial output-layer weights; small values start
    /// the flow near the identity.
    pub final_layer_scale: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            n_blocks: 12,
            hidden_widths: vec![128, 128, 128],
            scale_bound: 2.0,
            final_layer_scale: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    /// `true` for coordinates passed through unchanged.
    mask: Vec<bool>,
    conditioner: Vec<usize>,
    transformed: Vec<usize>,
    scale_net: Mlp,
    shift_net: Mlp,
}

impl CouplingBlock {
    fn from_mask(mask: Vec<bool>, scale_net: Mlp, shift_net: Mlp) -> Result<Self> {
        let conditioner: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let transformed: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if conditioner.is_empty() || transformed.is_empty() {
            return Err(Error::config("coupling mask must be neither all-true nor all-false"));
        }
        if scale_net.spec().input_dim != conditioner.len()
            || shift_net.spec().input_dim != conditioner.len()
            || scale_net.spec().output_dim != transformed.len()
            || shift_net.spec().output_dim != transformed.len()
        {
            return Err(Error::config("coupling networks do not match the mask"));
        }
        Ok(CouplingBlock {
            mask,
            conditioner,
            transformed,
            scale_net,
            shift_net,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    fn scale_shift(&self, params: &ParamVector, cond: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let s = self.scale_net.forward(params, cond)?;
        let t = self.shift_net.forward(params, cond)?;
        Ok((s, t))
    }
}

/// Output of [`FlowModel::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct FlowVars {
    pub z: Var,
    pub v: Var,
    /// `n × 1` log-|det Jacobian| per row.
    pub logdet: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    dim: usize,
    rc_dim: usize,
    scale_bound: f64,
    blocks: Vec<CouplingBlock>,
    params: ParamVector,
}

fn alternating_mask(dim: usize, block: usize) -> Vec<bool> {
    let half = dim.div_ceil(2);
    (0..dim)
        .map(|i| if block.is_multiple_of(2) { i >= half } else { i < half })
        .collect()
}

impl FlowModel {
    pub fn new<R: Rng + ?Sized>(dim: usize, rc_dim: usize, config: &FlowConfig, rng: &mut R) -> Result<Self> {
        if rc_dim == 0 || rc_dim >= dim {
            return Err(Error::config(format!(
                "need 1 <= rc_dim < dim, got rc_dim = {rc_dim}, dim = {dim}"
            )));
        }
        if config.n_blocks == 0 {
            return Err(Error::config("flow needs at least one coupling block"));
        }
        if !(config.scale_bound > 0.0) {
            return Err(Error::config("scale_bound must be positive"));
        }
        let mut params = ParamVector::new();
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let mask = alternating_mask(dim, b);
            let n_cond = mask.iter().filter(|&&m| m).count();
            let n_trans = dim - n_cond;
            let scale_spec = MlpSpec::new(
                n_cond,
                n_trans,
                config.hidden_widths.clone(),
                OutputActivation::Bounded {
                    bound: config.scale_bound,
                },
            );
            let shift_spec = MlpSpec::new(n_cond, n_trans, config.hidden_widths.clone(), OutputActivation::Identity);
            let scale_net = Mlp::init(
                scale_spec,
                &mut params,
                &format!("block{b:02}.scale"),
                config.final_layer_scale,
                rng,
            )?;
            let shift_net = Mlp::init(
                shift_spec,
                &mut params,
                &format!("block{b:02}.shift"),
                config.final_layer_scale,
                rng,
            )?;
            blocks.push(CouplingBlock::from_mask(mask, scale_net, shift_net)?);
        }
        Ok(FlowModel {
            dim,
            rc_dim,
            scale_bound: config.scale_bound,
            blocks,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rc_dim(&self) -> usize {
        self.rc_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.dim - self.rc_dim
    }

    pub fn scale_bound(&self) -> f64 {
        self.scale_bound
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// Zero every output layer, making the flow exactly the identity.
    pub fn zero_output_layers(&mut self) {
        for b in &self.blocks {
            b.scale_net.zero_output_layer(&mut self.params);
            b.shift_net.zero_output_layer(&mut self.params);
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::config(format!(
                "flow expects dimension {}, got {}",
                self.dim,
                x.ncols()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "flow input entry {pos} is not finite"
            )));
        }
        Ok(())
    }

    /// Batched forward map: rows of `x` are configurations. Returns the
    /// transformed rows `(z, v)` concatenated and the per-row log-determinant.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_input(&x)?;
        let mut y = x.to_owned();
        let mut logdet = Array1::zeros(x.nrows());
        for (bi, block) in self.blocks.iter().enumerate() {
            let cond = y.select(Axis(1), &block.conditioner);
            let (s, t) = block.scale_shift(&self.params, cond.view())?;
            for (j, &c) in block.transformed.iter().enumerate() {
                let mut col = y.column_mut(c);
                for (i, yv) in col.iter_mut().enumerate() {
                    *yv = *yv * fastmath::exp(s[[i, j]]) + t[[i, j]];
                }
            }
            logdet += &s.sum_axis(Axis(1));
            if y.iter().any(|v| !v.is_finite()) || logdet.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite value after coupling block {bi}")));
            }
        }
        Ok((y, logdet))
    }

    /// Batched inverse map from rows of `(z, v)`.
    pub fn inverse_batch(&self, zv: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&zv)?;
        let mut x = zv.to_owned();
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let cond = x.select(Axis(1), &block.conditioner);
            let (s, t) = block.scale_shift(&self.params, cond.view())?;
            for (j, &c) in block.transformed.iter().enumerate() {
                let mut col = x.column_mut(c);
                for (i, xv) in col.iter_mut().enumerate() {
                    *xv = (*xv - t[[i, j]]) * fastmath::exp(-s[[i, j]]);
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite value inverting coupling block {bi}")));
            }
        }
        Ok(x)
    }

    /// `(z, v, log|det ∂F/∂x|)` for one configuration.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (y, logdet) = self.forward_batch(xv)?;
        let row = y.row(0);
        Ok((
            row.slice(s![..self.rc_dim]).to_vec(),
            row.slice(s![self.rc_dim..]).to_vec(),
            logdet[0],
        ))
    }

    pub fn inverse(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.rc_dim || v.len() != self.noise_dim() {
            return Err(Error::config(format!(
                "inverse expects z of length {} and v of length {}",
                self.rc_dim,
                self.noise_dim()
            )));
        }
        let zv: Vec<f64> = z.iter().chain(v).copied().collect();
        let row = ArrayView2::from_shape((1, self.dim), &zv).expect("row view");
        Ok(self.inverse_batch(row)?.row(0).to_vec())
    }

    /// Reaction coordinate `Φ(x)`, the first `rc_dim` flow outputs.
    pub fn rc_project(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    pub fn project_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (y, _) = self.forward_batch(x)?;
        Ok(y.slice(s![.., ..self.rc_dim]).to_owned())
    }

    /// `log S(x) = log N(v | 0, I) + log|det ∂F/∂x|`.
    pub fn log_noise_factor(&self, x: &[f64]) -> Result<f64> {
        let (_, v, logdet) = self.forward(x)?;
        Ok(log_std_normal(&v) + logdet)
    }

    pub fn log_noise_factor_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let (y, logdet) = self.forward_batch(x)?;
        let v = y.slice(s![.., self.rc_dim..]);
        Ok(Array1::from_iter(
            v.rows()
                .into_iter()
                .zip(logdet.iter())
                .map(|(row, ld)| log_std_normal(row.as_slice().unwrap_or(&row.to_vec())) + ld),
        ))
    }

    /// Forward map recorded on a graph. `bound` must come from
    /// `self.params().bind(..)` on the same graph.
    pub fn forward_graph(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> FlowVars {
        let mut y = x;
        let mut logdet: Option<Var> = None;
        for block in &self.blocks {
            let cond = g.select_cols(y, &block.conditioner);
            let trans = g.select_cols(y, &block.transformed);
            let s = block.scale_net.forward_graph(g, bound, cond);
            let t = block.shift_net.forward_graph(g, bound, cond);
            let es = g.exp(s);
            let scaled = g.mul(trans, es);
            let new_trans = g.add(scaled, t);
            y = g.merge_cols(cond, &block.conditioner, new_trans, &block.transformed);
            let ld = g.sum_cols(s);
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        let z_cols: Vec<usize> = (0..self.rc_dim).collect();
        let v_cols: Vec<usize> = (self.rc_dim..self.dim).collect();
        let z = g.select_cols(y, &z_cols);
        let v = g.select_cols(y, &v_cols);
        FlowVars {
            z,
            v,
            logdet: logdet.expect("flow has at least one block"),
        }
    }

    /// `n × 1` node holding `log S(x)` per row.
    pub fn log_noise_factor_graph(&self, g: &mut Graph, out: &FlowVars) -> Var {
        let lp = log_std_normal_rows(g, out.v);
        g.add(lp, out.logdet)
    }
}

/// `log N(v | 0, I)`.
pub fn log_std_normal(v: &[f64]) -> f64 {
    -0.5 * v.len() as f64 * (2.0 * PI).ln() - 0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

/// Row-wise `log N(v | 0, I)` on the graph.
pub fn log_std_normal_rows(g: &mut Graph, v: Var) -> Var {
    let k = g.shape(v).1 as f64;
    let sq = g.square(v);
    let ss = g.sum_cols(sq);
    let half = g.scale(ss, -0.5);
    g.offset(half, -0.5 * k * (2.0 * PI).ln())
}

#[derive(Serialize, Deserialize)]
struct BlockRepr {
    mask: Vec<bool>,
    scale_net: MlpSpec,
    shift_net: MlpSpec,
}

#[derive(Serialize, Deserialize)]
struct FlowRepr {
    dim: usize,
    rc_dim: usize,
    scale_bound: f64,
    blocks: Vec<BlockRepr>,
    params: ParamVector,
}

impl Serialize for FlowModel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        FlowRepr {
            dim: self.dim,
            rc_dim: self.rc_dim,
            scale_bound: self.scale_bound,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockRepr {
                    mask: b.mask.clone(),
                    scale_net: b.scale_net.spec().clone(),
                    shift_net: b.shift_net.spec().clone(),
                })
                .collect(),
            params: self.params.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FlowModel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = FlowRepr::deserialize(deserializer)?;
        let build = || -> Result<FlowModel> {
            if repr.rc_dim == 0 || repr.rc_dim >= repr.dim {
                return Err(Error::config("invalid flow dimensions"));
            }
            let mut seg = 0;
            let mut blocks = Vec::with_capacity(repr.blocks.len());
            for b in repr.blocks {
                if b.mask.len() != repr.dim {
                    return Err(Error::config("mask length does not match flow dimension"));
                }
                let scale_net = Mlp::attach(b.scale_net, &repr.params, seg)?;
                seg += scale_net.segment_count();
                let shift_net = Mlp::attach(b.shift_net, &repr.params, seg)?;
                seg += shift_net.segment_count();
                blocks.push(CouplingBlock::from_mask(b.mask, scale_net, shift_net)?);
            }
            if seg != repr.params.segments().len() || blocks.is_empty() {
                return Err(Error::config("flow parameter segments do not match its blocks"));
            }
            Ok(FlowModel {
                dim: repr.dim,
                rc_dim: repr.rc_dim,
                scale_bound: repr.scale_bound,
                blocks,
                params: repr.params,
            })
        };
        build().map_err(D::Error::custom)
    }
}
