//! Grid-centred Gaussian mixture for the reduced equilibrium density.
//!
//! `μ(z) = Σ_i w(c_i) N(z | c_i, diag σ(c_i)²) / Σ_j w(c_j)`, with centres
//! `c_i` on a regular grid and `w`, `σ` given by small MLPs evaluated at the
//! centres. The reduced potential is `V = -log μ` and the drift of the
//! reduced dynamics is `∇ log μ`.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::diffcore::{
    fastmath, logsumexp_rows, BoundParams, CustomOp, Graph, Mlp, MlpSpec, OutputActivation, ParamVector,
    Var,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    /// Grid points per axis; `None` picks 40 for `d = 1` and 20 otherwise.
    pub k: Option<usize>,
    pub hidden_widths: Vec<usize>,
    /// Fractional widening of the observed range on each side.
    pub grid_margin: f64,
    pub sigma_floor: f64,
    pub final_layer_scale: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            k: None,
            hidden_widths: vec![64, 64, 64],
            grid_margin: 0.05,
            sigma_floor: 1e-3,
            final_layer_scale: 0.01,
        }
    }
}

impl GmmConfig {
    pub fn k_for(&self, rc_dim: usize) -> usize {
        self.k.unwrap_or(if rc_dim == 1 { 40 } else { 20 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub k: usize,
}

impl GridSpec {
    pub fn new(lb: Vec<f64>, ub: Vec<f64>, k: usize) -> Result<Self> {
        if lb.is_empty() || lb.len() != ub.len() {
            return Err(Error::config("grid bounds must be non-empty and of equal length"));
        }
        if k < 2 {
            return Err(Error::config(format!("grid needs K >= 2 points per axis, got {k}")));
        }
        for (i, (l, u)) in lb.iter().zip(&ub).enumerate() {
            if !(l < u) || !l.is_finite() || !u.is_finite() {
                return Err(Error::config(format!("grid axis {i}: need lb < ub, got [{l}, {u}]")));
            }
        }
        Ok(GridSpec { lb, ub, k })
    }

    /// Bounds from the per-axis min/max of `z`, widened by `margin` times
    /// the range on each side.
    pub fn from_data(z: ArrayView2<'_, f64>, k: usize, margin: f64) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::config("cannot build a grid from an empty data set"));
        }
        let mut lb = Vec::with_capacity(z.ncols());
        let mut ub = Vec::with_capacity(z.ncols());
        for (i, col) in z.columns().into_iter().enumerate() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                return Err(Error::Degenerate(format!(
                    "reaction coordinate {i} has zero range on the data"
                )));
            }
            let pad = margin * (hi - lo);
            lb.push(lo - pad);
            ub.push(hi + pad);
        }
        GridSpec::new(lb, ub, k)
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    pub fn centers(&self) -> Array2<f64> {
        build_grid(&self.lb, &self.ub, self.k).expect("validated grid")
    }
}

/// Cartesian grid with `k` points per axis, `K^d × d`, last axis fastest.
pub fn build_grid(lb: &[f64], ub: &[f64], k: usize) -> Result<Array2<f64>> {
    GridSpec::new(lb.to_vec(), ub.to_vec(), k)?;
    let d = lb.len();
    let n = k.pow(d as u32);
    let axis = |i: usize, idx: usize| lb[i] + idx as f64 * (ub[i] - lb[i]) / (k - 1) as f64;
    Ok(Array2::from_shape_fn((n, d), |(row, j)| {
        let idx = (row / k.pow((d - 1 - j) as u32)) % k;
        axis(j, idx)
    }))
}

/// Per-component log normalizers `log w_k - Σ_j log σ_kj - d/2 log 2π`
/// and inverse variances.
fn prepare(log_w: &[f64], sigma: ArrayView2<'_, f64>) -> (Vec<f64>, Array2<f64>) {
    let d = sigma.ncols();
    let c = -0.5 * d as f64 * (2.0 * PI).ln();
    let log_norm = log_w
        .iter()
        .zip(sigma.rows())
        .map(|(lw, s)| lw + c - s.iter().map(|v| v.ln()).sum::<f64>())
        .collect();
    let inv_var = sigma.mapv(|s| 1.0 / (s * s));
    (log_norm, inv_var)
}

/// Row-wise log-density and component responsibilities.
fn responsibilities(
    z: ArrayView2<'_, f64>,
    centers: ArrayView2<'_, f64>,
    log_w: &[f64],
    sigma: ArrayView2<'_, f64>,
) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = z.dim();
    let kc = centers.nrows();
    let (log_norm, inv_var) = prepare(log_w, sigma);
    let z = z.as_standard_layout();
    let centers = centers.as_standard_layout();
    let (zs, cs, ivs) = (slice(&z), slice(&centers), inv_var.as_slice().expect("contiguous"));
    let mut lse = Array1::zeros(n);
    let mut r = Array2::zeros((n, kc));
    let rs = r.as_slice_mut().expect("contiguous");
    for i in 0..n {
        let zi = &zs[i * d..(i + 1) * d];
        let a = &mut rs[i * kc..(i + 1) * kc];
        for k in 0..kc {
            let ck = &cs[k * d..(k + 1) * d];
            let ivk = &ivs[k * d..(k + 1) * d];
            let mut q = 0.0;
            for j in 0..d {
                let diff = zi[j] - ck[j];
                q += diff * diff * ivk[j];
            }
            a[k] = log_norm[k] - 0.5 * q;
        }
        let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in a.iter_mut() {
            *v -= m;
        }
        fastmath::exp_inplace(a);
        let s: f64 = a.iter().sum();
        let inv = 1.0 / s;
        for v in a.iter_mut() {
            *v *= inv;
        }
        lse[i] = m + s.ln();
    }
    (lse, r)
}

fn slice<'a>(a: &'a ndarray::CowArray<'_, f64, ndarray::Ix2>) -> &'a [f64] {
    a.as_slice().expect("standard layout")
}

fn drift_from_responsibilities(
    z: ArrayView2<'_, f64>,
    centers: ArrayView2<'_, f64>,
    inv_var: &Array2<f64>,
    r: &Array2<f64>,
) -> Array2<f64> {
    let (n, d) = z.dim();
    let kc = centers.nrows();
    let z = z.as_standard_layout();
    let centers = centers.as_standard_layout();
    let inv_var = inv_var.as_standard_layout();
    let r = r.as_standard_layout();
    let (zs, cs, ivs, rs) = (slice(&z), slice(&centers), slice(&inv_var), slice(&r));
    let mut out = Array2::zeros((n, d));
    let os = out.as_slice_mut().expect("contiguous");
    for i in 0..n {
        let zi = &zs[i * d..(i + 1) * d];
        let oi = &mut os[i * d..(i + 1) * d];
        let ri = &rs[i * kc..(i + 1) * kc];
        for k in 0..kc {
            let rik = ri[k];
            let ck = &cs[k * d..(k + 1) * d];
            let ivk = &ivs[k * d..(k + 1) * d];
            for j in 0..d {
                oi[j] += rik * (ck[j] - zi[j]) * ivk[j];
            }
        }
    }
    out
}

struct MixtureLogDensityOp {
    centers: Array2<f64>,
    resp: Array2<f64>,
}

impl CustomOp for MixtureLogDensityOp {
    fn name(&self) -> &'static str {
        "mixture_log_density"
    }

    fn backward(
        &self,
        inputs: &[&Array2<f64>],
        _output: &Array2<f64>,
        grad: &Array2<f64>,
        needs: &[bool],
    ) -> Vec<Option<Array2<f64>>> {
        let (n, d) = inputs[0].dim();
        let kc = self.centers.nrows();
        let z = inputs[0].as_standard_layout();
        let sigma = inputs[2].as_standard_layout();
        let centers = self.centers.as_standard_layout();
        let resp = self.resp.as_standard_layout();
        let grad = grad.as_standard_layout();
        let (zs, ss, cs, rs, gs) = (slice(&z), slice(&sigma), slice(&centers), slice(&resp), slice(&grad));
        let mut dz = vec![0.0; if needs[0] { n * d } else { 0 }];
        let mut dlw = vec![0.0; if needs[1] { kc } else { 0 }];
        let mut dsig = vec![0.0; if needs[2] { kc * d } else { 0 }];
        for i in 0..n {
            let gi = gs[i];
            let zi = &zs[i * d..(i + 1) * d];
            for k in 0..kc {
                let q = gi * rs[i * kc + k];
                if needs[1] {
                    dlw[k] += q;
                }
                for j in 0..d {
                    let s = ss[k * d + j];
                    let diff = zi[j] - cs[k * d + j];
                    if needs[0] {
                        dz[i * d + j] -= q * diff / (s * s);
                    }
                    if needs[2] {
                        dsig[k * d + j] += q * (diff * diff / (s * s * s) - 1.0 / s);
                    }
                }
            }
        }
        vec![
            to_array(needs[0], (n, d), dz),
            to_array(needs[1], (1, kc), dlw),
            to_array(needs[2], (kc, d), dsig),
        ]
    }
}

fn to_array(needed: bool, shape: (usize, usize), data: Vec<f64>) -> Option<Array2<f64>> {
    needed.then(|| Array2::from_shape_vec(shape, data).expect("shape matches"))
}

struct MixtureDriftOp {
    centers: Array2<f64>,
    resp: Array2<f64>,
}

impl CustomOp for MixtureDriftOp {
    fn name(&self) -> &'static str {
        "mixture_drift"
    }

    fn backward(
        &self,
        inputs: &[&Array2<f64>],
        _output: &Array2<f64>,
        grad: &Array2<f64>,
        needs: &[bool],
    ) -> Vec<Option<Array2<f64>>> {
        let (n, d) = inputs[0].dim();
        let kc = self.centers.nrows();
        let z = inputs[0].as_standard_layout();
        let sigma = inputs[2].as_standard_layout();
        let centers = self.centers.as_standard_layout();
        let resp = self.resp.as_standard_layout();
        let grad = grad.as_standard_layout();
        let (zs, ss, cs, rs, gs) = (slice(&z), slice(&sigma), slice(&centers), slice(&resp), slice(&grad));
        let ivs: Vec<f64> = ss.iter().map(|s| 1.0 / (s * s)).collect();
        let mut dz = vec![0.0; if needs[0] { n * d } else { 0 }];
        let mut dlw = vec![0.0; if needs[1] { kc } else { 0 }];
        let mut dsig = vec![0.0; if needs[2] { kc * d } else { 0 }];
        let mut h = vec![0.0; kc];
        for i in 0..n {
            let zi = &zs[i * d..(i + 1) * d];
            let gi = &gs[i * d..(i + 1) * d];
            let ri = &rs[i * kc..(i + 1) * kc];
            // h_k = Σ_j G_ij (c_kj - z_ij) / σ_kj², the upstream gradient
            // projected onto each component's score
            let mut hbar = 0.0;
            for k in 0..kc {
                let mut hk = 0.0;
                for j in 0..d {
                    hk += gi[j] * (cs[k * d + j] - zi[j]) * ivs[k * d + j];
                }
                h[k] = hk;
                hbar += ri[k] * hk;
            }
            for k in 0..kc {
                let rik = ri[k];
                let q = rik * (h[k] - hbar);
                if needs[1] {
                    dlw[k] += q;
                }
                for j in 0..d {
                    let iv = ivs[k * d + j];
                    let s = ss[k * d + j];
                    let score = (cs[k * d + j] - zi[j]) * iv;
                    if needs[0] {
                        dz[i * d + j] += q * score - gi[j] * rik * iv;
                    }
                    if needs[2] {
                        let diff = zi[j] - cs[k * d + j];
                        dsig[k * d + j] += q * (diff * diff * iv / s - 1.0 / s) - 2.0 * gi[j] * rik * score / s;
                    }
                }
            }
        }
        vec![
            to_array(needs[0], (n, d), dz),
            to_array(needs[1], (1, kc), dlw),
            to_array(needs[2], (kc, d), dsig),
        ]
    }
}

/// `n × 1` mixture log-density of the rows of `z`. `log_w` is `1 × K`
/// (already normalized), `sigma` is `K × d`.
pub fn mixture_log_density_graph(g: &mut Graph, centers: &Array2<f64>, z: Var, log_w: Var, sigma: Var) -> Var {
    let (lse, resp) = responsibilities(
        g.value(z).view(),
        centers.view(),
        g.value(log_w).as_slice().expect("contiguous weights"),
        g.value(sigma).view(),
    );
    let n = lse.len();
    let value = lse.into_shape_with_order((n, 1)).expect("column");
    g.custom(
        &[z, log_w, sigma],
        value,
        Box::new(MixtureLogDensityOp {
            centers: centers.clone(),
            resp,
        }),
    )
}

/// `n × d` mixture score `∇_z log μ(z)` of the rows of `z`.
pub fn mixture_drift_graph(g: &mut Graph, centers: &Array2<f64>, z: Var, log_w: Var, sigma: Var) -> Var {
    let zv = g.value(z).view();
    let sv = g.value(sigma).view();
    let lw = g.value(log_w).as_slice().expect("contiguous weights");
    let (_, resp) = responsibilities(zv, centers.view(), lw, sv);
    let inv_var = sv.mapv(|s| 1.0 / (s * s));
    let value = drift_from_responsibilities(zv, centers.view(), &inv_var, &resp);
    g.custom(
        &[z, log_w, sigma],
        value,
        Box::new(MixtureDriftOp {
            centers: centers.clone(),
            resp,
        }),
    )
}

/// Mixture with fixed, already evaluated weights and widths.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSnapshot {
    centers: Array2<f64>,
    log_w: Vec<f64>,
    sigma: Array2<f64>,
    log_norm: Vec<f64>,
    inv_var: Array2<f64>,
}

impl GmmSnapshot {
    /// `log_w` need not be normalized; it is shifted to sum to one.
    pub fn new(centers: Array2<f64>, log_w: Vec<f64>, sigma: Array2<f64>) -> Result<Self> {
        if log_w.len() != centers.nrows() || sigma.dim() != centers.dim() {
            return Err(Error::config("mixture centers, weights and widths disagree in shape"));
        }
        if centers.nrows() == 0 {
            return Err(Error::config("mixture needs at least one component"));
        }
        if sigma.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || log_w.iter().any(|w| !w.is_finite()) {
            return Err(Error::numeric("mixture weights and widths must be finite, widths positive"));
        }
        let row = Array2::from_shape_vec((1, log_w.len()), log_w).expect("row");
        let lse = logsumexp_rows(&row)[[0, 0]];
        let log_w: Vec<f64> = row.iter().map(|v| v - lse).collect();
        let (log_norm, inv_var) = prepare(&log_w, sigma.view());
        Ok(GmmSnapshot {
            centers,
            log_w,
            sigma,
            log_norm,
            inv_var,
        })
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_w.iter().map(|v| v.exp()).collect()
    }

    pub fn sigma(&self) -> &Array2<f64> {
        &self.sigma
    }

    fn check(&self, z: &ArrayView2<'_, f64>) -> Result<()> {
        if z.ncols() != self.dim() {
            return Err(Error::config(format!(
                "mixture expects dimension {}, got {}",
                self.dim(),
                z.ncols()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("mixture evaluated at a non-finite point"));
        }
        Ok(())
    }

    pub fn log_density_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.check(&z)?;
        Ok(responsibilities(z, self.centers.view(), &self.log_w, self.sigma.view()).0)
    }

    pub fn drift_batch(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(&z)?;
        let (_, r) = responsibilities(z, self.centers.view(), &self.log_w, self.sigma.view());
        Ok(drift_from_responsibilities(z, self.centers.view(), &self.inv_var, &r))
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let zv = ArrayView2::from_shape((1, z.len()), z).expect("row");
        Ok(self.log_density_batch(zv)?[0])
    }

    pub fn reduced_potential(&self, z: &[f64]) -> Result<f64> {
        Ok(-self.log_density(z)?)
    }

    pub fn drift(&self, z: &[f64]) -> Result<Vec<f64>> {
        let zv = ArrayView2::from_shape((1, z.len()), z).expect("row");
        Ok(self.drift_batch(zv)?.row(0).to_vec())
    }

    /// Log-density at one point, writing the drift into `drift`.
    pub fn eval_point(&self, z: &[f64], drift: &mut [f64]) -> f64 {
        let d = self.dim();
        let kc = self.centers.nrows();
        let mut a = vec![0.0; kc];
        for (k, ak) in a.iter_mut().enumerate() {
            let mut q = 0.0;
            for (j, &zj) in z.iter().enumerate().take(d) {
                let diff = zj - self.centers[[k, j]];
                q += diff * diff * self.inv_var[[k, j]];
            }
            *ak = self.log_norm[k] - 0.5 * q;
        }
        let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in a.iter_mut() {
            *v -= m;
        }
        fastmath::exp_inplace(&mut a);
        let s: f64 = a.iter().sum();
        drift.iter_mut().for_each(|v| *v = 0.0);
        for (k, &ak) in a.iter().enumerate() {
            for j in 0..d {
                drift[j] += ak * (self.centers[[k, j]] - z[j]) * self.inv_var[[k, j]];
            }
        }
        let inv = 1.0 / s;
        drift.iter_mut().for_each(|v| *v *= inv);
        m + s.ln()
    }

    /// `n` independent draws from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let weights = self.weights();
        let mut cdf: Vec<f64> = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cdf.last().expect("non-empty");
        for c in cdf.iter_mut() {
            *c /= total;
        }
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let u: f64 = rng.random();
            let k = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            for j in 0..d {
                let xi: f64 = rng.sample(StandardNormal);
                row[j] = self.centers[[k, j]] + self.sigma[[k, j]] * xi;
            }
        }
        out
    }
}

/// Graph handles for the mixture parameters at the grid centres.
#[derive(Clone, Copy, Debug)]
pub struct GmmVars {
    /// `1 × K` normalized log-weights.
    pub log_w: Var,
    /// `K × d` widths.
    pub sigma: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmPotential {
    grid: GridSpec,
    centers: Array2<f64>,
    sigma_floor: f64,
    weight_net: Mlp,
    sigma_net: Mlp,
    params: ParamVector,
}

impl GmmPotential {
    pub fn new<R: Rng + ?Sized>(grid: GridSpec, config: &GmmConfig, rng: &mut R) -> Result<Self> {
        if !(config.sigma_floor >= 0.0) {
            return Err(Error::config("sigma_floor must be non-negative"));
        }
        let d = grid.dim();
        let mut params = ParamVector::new();
        let weight_net = Mlp::init(
            MlpSpec::new(d, 1, config.hidden_widths.clone(), OutputActivation::Exponential),
            &mut params,
            "weight",
            config.final_layer_scale,
            rng,
        )?;
        let sigma_net = Mlp::init(
            MlpSpec::new(d, d, config.hidden_widths.clone(), OutputActivation::Exponential),
            &mut params,
            "sigma",
            config.final_layer_scale,
            rng,
        )?;
        Ok(GmmPotential {
            centers: grid.centers(),
            grid,
            sigma_floor: config.sigma_floor,
            weight_net,
            sigma_net,
            params,
        })
    }

    pub fn rc_dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn num_components(&self) -> usize {
        self.centers.nrows()
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    pub fn weight_net(&self) -> &Mlp {
        &self.weight_net
    }

    pub fn sigma_net(&self) -> &Mlp {
        &self.sigma_net
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// Evaluate the nets at the centres and freeze the result.
    pub fn snapshot(&self) -> Result<GmmSnapshot> {
        let raw_w = self.weight_net.forward_preactivation(&self.params, self.centers.view())?;
        let mut sigma = self.sigma_net.forward_preactivation(&self.params, self.centers.view())?;
        fastmath::exp_inplace(sigma.as_slice_mut().expect("contiguous"));
        sigma += self.sigma_floor;
        let snap = GmmSnapshot::new(self.centers.clone(), raw_w.iter().copied().collect(), sigma)?;
        Ok(snap)
    }

    pub fn log_mu_z(&self, z: &[f64]) -> Result<f64> {
        self.snapshot()?.log_density(z)
    }

    pub fn reduced_potential(&self, z: &[f64]) -> Result<f64> {
        self.snapshot()?.reduced_potential(z)
    }

    pub fn drift(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.snapshot()?.drift(z)
    }

    /// Record the weight and width nets at the centres. `bound` must come
    /// from `self.params().bind(..)` on the same graph.
    pub fn components_graph(&self, g: &mut Graph, bound: &BoundParams) -> GmmVars {
        let c = g.constant(self.centers.clone());
        let raw_w = self.weight_net.forward_graph_preactivation(g, bound, c);
        let row = g.transpose(raw_w);
        let lse = g.logsumexp_rows(row);
        let neg = g.neg(lse);
        let log_w = g.add_scalar_var(row, neg);
        let raw_s = self.sigma_net.forward_graph_preactivation(g, bound, c);
        let es = g.exp(raw_s);
        let sigma = g.offset(es, self.sigma_floor);
        GmmVars { log_w, sigma }
    }

    pub fn log_mu_z_graph(&self, g: &mut Graph, vars: &GmmVars, z: Var) -> Var {
        mixture_log_density_graph(g, &self.centers, z, vars.log_w, vars.sigma)
    }

    pub fn drift_graph(&self, g: &mut Graph, vars: &GmmVars, z: Var) -> Var {
        mixture_drift_graph(g, &self.centers, z, vars.log_w, vars.sigma)
    }
}

#[derive(Serialize, Deserialize)]
struct GmmRepr {
    grid: GridSpec,
    sigma_floor: f64,
    weight_net: MlpSpec,
    sigma_net: MlpSpec,
    params: ParamVector,
}

impl Serialize for GmmPotential {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        GmmRepr {
            grid: self.grid.clone(),
            sigma_floor: self.sigma_floor,
            weight_net: self.weight_net.spec().clone(),
            sigma_net: self.sigma_net.spec().clone(),
            params: self.params.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GmmPotential {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = GmmRepr::deserialize(deserializer)?;
        let build = || -> Result<GmmPotential> {
            let grid = GridSpec::new(repr.grid.lb, repr.grid.ub, repr.grid.k)?;
            let d = grid.dim();
            let weight_net = Mlp::attach(repr.weight_net, &repr.params, 0)?;
            let sigma_net = Mlp::attach(repr.sigma_net, &repr.params, weight_net.segment_count())?;
            let ws = weight_net.spec();
            let ss = sigma_net.spec();
            if ws.input_dim != d || ws.output_dim != 1 || ss.input_dim != d || ss.output_dim != d {
                return Err(Error::config("mixture nets do not match the grid dimension"));
            }
            if weight_net.segment_count() + sigma_net.segment_count() != repr.params.segments().len() {
                return Err(Error::config("mixture parameter segments do not match its nets"));
            }
            Ok(GmmPotential {
                centers: grid.centers(),
                grid,
                sigma_floor: repr.sigma_floor,
                weight_net,
                sigma_net,
                params: repr.params,
            })
        };
        build().map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_difference_gradient, max_relative_error};
    use ndarray::Axis;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_bumps() -> GmmSnapshot {
        GmmSnapshot::new(
            Array2::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap(),
            vec![0.0, 0.0],
            Array2::from_elem((2, 1), 1.0),
        )
        .unwrap()
    }

    fn random_snapshot(seed: u64, k: usize, d: usize) -> GmmSnapshot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GmmSnapshot::new(
            Array2::from_shape_fn((k, d), |_| rng.random_range(-2.0..2.0)),
            (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            Array2::from_shape_fn((k, d), |_| rng.random_range(0.3..1.5)),
        )
        .unwrap()
    }

    fn small_potential(seed: u64, d: usize, k: usize) -> GmmPotential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridSpec::new(vec![-2.0; d], vec![2.0; d], k).unwrap();
        let cfg = GmmConfig {
            hidden_widths: vec![8, 8],
            final_layer_scale: 1.0,
            ..GmmConfig::default()
        };
        GmmPotential::new(grid, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = build_grid(&[0.0], &[1.0], 3).unwrap();
        assert_eq!(g.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        let g = build_grid(&[0.0, 0.0], &[1.0, 2.0], 2).unwrap();
        let rows: Vec<Vec<f64>> = g.rows().into_iter().map(|r| r.to_vec()).collect();
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 2.0], vec![1.0, 0.0], vec![1.0, 2.0]]);
        assert!(build_grid(&[1.0], &[1.0], 3).unwrap_err().is_config());
        assert!(build_grid(&[0.0, 2.0], &[1.0, 1.0], 3).unwrap_err().is_config());
        assert!(build_grid(&[0.0], &[1.0], 1).unwrap_err().is_config());
    }

    #[test]
    fn grid_from_data_adds_margin() {
        let z = Array2::from_shape_vec((3, 1), vec![-1.0, 0.0, 2.0]).unwrap();
        let g = GridSpec::from_data(z.view(), 40, 0.05).unwrap();
        assert!((g.lb[0] - -1.15).abs() < 1e-12);
        assert!((g.ub[0] - 2.15).abs() < 1e-12);
        let g0 = GridSpec::from_data(z.view(), 40, 0.0).unwrap();
        assert_eq!((g0.lb[0], g0.ub[0]), (-1.0, 2.0));
        assert_eq!(g.centers().nrows(), 40);
        let flat = Array2::from_elem((3, 1), 1.0);
        assert!(GridSpec::from_data(flat.view(), 4, 0.05).unwrap_err().is_config());
    }

    #[test]
    fn two_component_value() {
        let m = two_bumps();
        let v = m.log_density(&[0.0]).unwrap();
        let expected = -0.5 - 0.5 * (2.0 * PI).ln();
        assert!((v - expected).abs() < 1e-14);
        assert!((v - -1.418_938_5).abs() < 1e-7);
        assert!((m.reduced_potential(&[0.0]).unwrap() + v).abs() == 0.0);
    }

    #[test]
    fn coincident_components_reduce_to_one_gaussian() {
        let m = GmmSnapshot::new(
            Array2::from_elem((3, 2), 0.4),
            vec![0.0; 3],
            Array2::from_shape_fn((3, 2), |(_, j)| if j == 0 { 0.5 } else { 2.0 }),
        )
        .unwrap();
        let z = [1.0, -1.0];
        let expected = -(2.0 * PI).ln() - 0.5f64.ln() - 2.0f64.ln() - 0.5 * (0.6f64 / 0.5).powi(2) - 0.5 * (1.4f64 / 2.0).powi(2);
        assert!((m.log_density(&z).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn one_dimensional_mixture_integrates_to_one() {
        let m = random_snapshot(3, 6, 1);
        let (a, b, n) = (-15.0, 15.0, 60001);
        let h = (b - a) / (n - 1) as f64;
        let z = Array2::from_shape_fn((n, 1), |(i, _)| a + i as f64 * h);
        let dens = m.log_density_batch(z.view()).unwrap().mapv(f64::exp);
        let integral = h * (dens.sum() - 0.5 * (dens[0] + dens[n - 1]));
        assert!((integral - 1.0).abs() < 1e-6, "{integral}");
    }

    #[test]
    fn drift_examples() {
        assert!(two_bumps().drift(&[0.0]).unwrap()[0].abs() < 1e-15);
        let single = GmmSnapshot::new(
            Array2::from_elem((1, 1), 0.7),
            vec![3.0],
            Array2::from_elem((1, 1), 0.4),
        )
        .unwrap();
        let z = -0.25;
        let expected = (0.7 - z) / 0.16;
        assert!((single.drift(&[z]).unwrap()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn drift_matches_finite_differences() {
        let m = random_snapshot(4, 9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let z = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
            let drift = m.drift(&z).unwrap();
            let fd = finite_difference_gradient(|p| m.log_density(p).unwrap(), &z, 1e-5);
            let err = max_relative_error(&drift, &fd, 1e-3);
            assert!(err < 1e-6, "{z:?}: {err}");
        }
    }

    #[test]
    fn point_evaluation_matches_batch() {
        let m = random_snapshot(15, 6, 2);
        let z = [0.3, -0.8];
        let mut drift = [0.0; 2];
        let ld = m.eval_point(&z, &mut drift);
        assert!((ld - m.log_density(&z).unwrap()).abs() < 1e-13);
        let dr = m.drift(&z).unwrap();
        assert!((drift[0] - dr[0]).abs() < 1e-12 && (drift[1] - dr[1]).abs() < 1e-12);
    }

    #[test]
    fn tails_stay_finite() {
        let m = random_snapshot(6, 4, 1);
        let v = m.log_density(&[1e3]).unwrap();
        assert!(v.is_finite() && v < -1e4);
        assert!(m.drift(&[1e3]).unwrap()[0].is_finite());
    }

    #[test]
    fn weights_positive_and_normalized() {
        let p = small_potential(7, 1, 12);
        let w = p.snapshot().unwrap().weights();
        assert!(w.iter().all(|&v| v > 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.snapshot().unwrap().sigma().iter().all(|&s| s > p.sigma_floor()));
    }

    #[test]
    fn zeroed_nets_reproduce_two_component_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grid = GridSpec::new(vec![-1.0], vec![1.0], 2).unwrap();
        let mut p = GmmPotential::new(grid, &GmmConfig::default(), &mut rng).unwrap();
        let (wn, sn) = (p.weight_net().clone(), p.sigma_net().clone());
        wn.zero_output_layer(p.params_mut());
        sn.zero_output_layer(p.params_mut());
        let out_bias = sn.first_segment() + sn.segment_count() - 1;
        p.params_mut().segment_mut(out_bias)[0] = (1.0 - p.sigma_floor()).ln();
        let v = p.log_mu_z(&[0.0]).unwrap();
        assert!((v - -1.418_938_5).abs() < 1e-7, "{v}");
        assert!(p.drift(&[0.0]).unwrap()[0].abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn permutation_invariance(seed in any::<u64>(), z in -3.0f64..3.0) {
            let m = random_snapshot(seed, 7, 1);
            let perm = [3usize, 0, 6, 1, 5, 2, 4];
            let permuted = GmmSnapshot::new(
                m.centers().select(Axis(0), &perm),
                perm.iter().map(|&i| m.log_weights()[i]).collect(),
                m.sigma().select(Axis(0), &perm),
            ).unwrap();
            let a = m.log_density(&[z]).unwrap();
            let b = permuted.log_density(&[z]).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_matches_snapshot() {
        let p = small_potential(9, 2, 4);
        let snap = p.snapshot().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let z = Array2::from_shape_fn((5, 2), |_| rng.random_range(-2.0..2.0));
        let mut g = Graph::new();
        let bound = p.params().bind(&mut g, false);
        let vars = p.components_graph(&mut g, &bound);
        let zv = g.constant(z.clone());
        let ld = p.log_mu_z_graph(&mut g, &vars, zv);
        let dr = p.drift_graph(&mut g, &vars, zv);
        let ld_ref = snap.log_density_batch(z.view()).unwrap();
        let dr_ref = snap.drift_batch(z.view()).unwrap();
        for i in 0..5 {
            assert!((g.value(ld)[[i, 0]] - ld_ref[i]).abs() < 1e-13);
            for j in 0..2 {
                assert!((g.value(dr)[[i, j]] - dr_ref[[i, j]]).abs() < 1e-12);
            }
        }
    }

    /// Tape gradient of `Σ_i u_i · f(z)_i` w.r.t. z, log-weights and widths,
    /// where f is the log-density (`drift = false`) or the drift.
    fn op_gradients(drift: bool, centers: &Array2<f64>, vals: &[f64], n: usize, k: usize, d: usize) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let z = g.leaf(Array2::from_shape_vec((n, d), vals[..n * d].to_vec()).unwrap());
        let lw = g.leaf(Array2::from_shape_vec((1, k), vals[n * d..n * d + k].to_vec()).unwrap());
        let s = g.leaf(Array2::from_shape_vec((k, d), vals[n * d + k..].to_vec()).unwrap());
        let out = if drift {
            mixture_drift_graph(&mut g, centers, z, lw, s)
        } else {
            mixture_log_density_graph(&mut g, centers, z, lw, s)
        };
        let (r, c) = g.shape(out);
        let u = g.constant(Array2::from_shape_fn((r, c), |(i, j)| 0.3 + 0.7 * i as f64 - 0.4 * j as f64));
        let weighted = g.mul(out, u);
        let loss = g.sum(weighted);
        let grads = g.backward(loss).unwrap();
        let flat = [z, lw, s]
            .iter()
            .flat_map(|&v| grads.get(v).unwrap().iter().copied().collect::<Vec<_>>())
            .collect();
        (g.scalar(loss), flat)
    }

    #[test]
    fn custom_op_gradients_match_finite_differences() {
        let (n, k, d) = (4, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers = Array2::from_shape_fn((k, d), |_| rng.random_range(-1.5..1.5));
        let mut vals: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        vals.extend((0..k).map(|_| rng.random_range(-2.0..0.0)));
        vals.extend((0..k * d).map(|_| rng.random_range(0.4..1.2)));
        for drift in [false, true] {
            let (_, tape) = op_gradients(drift, &centers, &vals, n, k, d);
            let fd = finite_difference_gradient(|p| op_gradients(drift, &centers, p, n, k, d).0, &vals, 1e-6);
            let err = max_relative_error(&tape, &fd, 1e-4);
            assert!(err < 1e-6, "drift = {drift}: {err}");
        }
    }

    #[test]
    fn parameter_gradients_through_nets() {
        let p = small_potential(12, 1, 5);
        let z = Array2::from_shape_vec((3, 1), vec![-1.2, 0.1, 1.7]).unwrap();
        let eval = |pot: &GmmPotential| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let bound = pot.params().bind(&mut g, true);
            let vars = pot.components_graph(&mut g, &bound);
            let zv = g.constant(z.clone());
            let ld = pot.log_mu_z_graph(&mut g, &vars, zv);
            let dr = pot.drift_graph(&mut g, &vars, zv);
            let sq = g.square(dr);
            let both = g.add(ld, sq);
            let loss = g.sum(both);
            let grads = g.backward(loss).unwrap();
            (g.scalar(loss), bound.flat_gradient(&grads, pot.params()))
        };
        let (_, tape) = eval(&p);
        let fd = finite_difference_gradient(
            |theta| {
                let mut q = p.clone();
                q.params_mut().values_mut().copy_from_slice(theta);
                eval(&q).0
            },
            p.params().values(),
            1e-6,
        );
        let err = max_relative_error(&tape, &fd, 1e-4);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn sampling_matches_density() {
        let m = two_bumps();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = m.sample(200_000, &mut rng);
        let mean = s.mean().unwrap();
        let var = s.mapv(|v| v * v).mean().unwrap() - mean * mean;
        assert!(mean.abs() < 0.01);
        assert!((var - 2.0).abs() < 0.03);
    }

    #[test]
    fn serde_round_trip() {
        let p = small_potential(14, 2, 3);
        let text = serde_json::to_string(&p).unwrap();
        let back: GmmPotential = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.log_mu_z(&[0.3, -0.2]).unwrap().to_bits(), p.log_mu_z(&[0.3, -0.2]).unwrap().to_bits());
    }
}
