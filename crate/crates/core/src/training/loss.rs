//! Kinetic and equilibrium negative log-likelihoods.
//!
//! The kinetic term scores a pair by the reduced transition density of the
//! projected endpoints times the noise factor `S` of the later frame. The
//! equilibrium term scores single frames by `μ(Φ(x)) S(x)`.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::diffcore::{BoundParams, Graph, ParamVector, Var};
use crate::error::{Error, Result};
use crate::flow::{log_std_normal, FlowModel};
use crate::potential::{GmmPotential, GmmVars};
use crate::ptrans::{log_ptrans_graph, BridgeConfig, DriftField, FlatDrift, GmmDrift};

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub flow: bool,
    pub potential: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub kin: f64,
    /// Absent for the flat reduced potential, which has no density.
    pub eq: Option<f64>,
    pub total: f64,
    pub flow_grad: Option<Vec<f64>>,
    pub potential_grad: Option<Vec<f64>>,
}

/// `L = L_kin + α L_eq`.
pub fn loss_total(kin: f64, eq: f64, alpha: f64) -> f64 {
    kin + alpha * eq
}

fn check_pair_shapes(x_from: ArrayView2<'_, f64>, x_to: ArrayView2<'_, f64>) -> Result<()> {
    if x_from.dim() != x_to.dim() {
        return Err(Error::config("pair endpoints disagree in shape"));
    }
    if x_from.nrows() == 0 {
        return Err(Error::config("loss batch is empty"));
    }
    Ok(())
}

/// Record `(L_kin, L_eq)` given projected coordinates and log noise
/// factors on the graph. The equilibrium term uses the earlier frame of
/// each pair.
#[allow(clippy::too_many_arguments)]
fn record_losses(
    g: &mut Graph,
    potential: Option<(&GmmPotential, GmmVars)>,
    z_from: Var,
    z_to: Var,
    log_s_from: Var,
    log_s_to: Var,
    bridge: &BridgeConfig,
    noise: &Array2<f64>,
) -> Result<(Var, Option<Var>)> {
    let log_p = match potential {
        Some((p, vars)) => {
            let drift = GmmDrift { potential: p, vars };
            log_ptrans_graph(g, &drift as &dyn DriftField, z_from, z_to, bridge, noise)?
        }
        None => log_ptrans_graph(g, &FlatDrift, z_from, z_to, bridge, noise)?,
    };
    let kin_rows = g.add(log_p, log_s_to);
    let kin_mean = g.mean(kin_rows);
    let kin = g.neg(kin_mean);
    let eq = potential.map(|(p, vars)| {
        let log_mu = p.log_mu_z_graph(g, &vars, z_from);
        let rows = g.add(log_mu, log_s_from);
        let m = g.mean(rows);
        g.neg(m)
    });
    Ok((kin, eq))
}

type GradTarget<'a> = (&'a BoundParams, &'a ParamVector);

fn finish(
    g: &Graph,
    kin: Var,
    eq: Option<Var>,
    total: Var,
    grads: Option<(Option<GradTarget<'_>>, Option<GradTarget<'_>>)>,
) -> Result<BatchLoss> {
    let mut out = BatchLoss {
        kin: g.scalar(kin),
        eq: eq.map(|e| g.scalar(e)),
        total: g.scalar(total),
        flow_grad: None,
        potential_grad: None,
    };
    if let Some((flow, pot)) = grads {
        if !out.total.is_finite() {
            return Ok(out);
        }
        let gr = g.backward(total)?;
        out.flow_grad = flow.map(|(b, p)| b.flat_gradient(&gr, p));
        out.potential_grad = pot.map(|(b, p)| b.flat_gradient(&gr, p));
    }
    Ok(out)
}

/// Losses of one batch of pairs through the flow. `potential = None`
/// means `∇V ≡ 0`. `noise` is `B·K_s × (M-1)·d`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    flow: &FlowModel,
    potential: Option<&GmmPotential>,
    x_from: ArrayView2<'_, f64>,
    x_to: ArrayView2<'_, f64>,
    bridge: &BridgeConfig,
    noise: &Array2<f64>,
    alpha: f64,
    trainable: Trainable,
) -> Result<BatchLoss> {
    check_pair_shapes(x_from, x_to)?;
    if x_from.ncols() != flow.dim() {
        return Err(Error::config(format!(
            "flow expects dimension {}, got {}",
            flow.dim(),
            x_from.ncols()
        )));
    }
    let b = x_from.nrows();
    let mut g = Graph::new();
    let x = g.constant(concatenate(Axis(0), &[x_from, x_to]).expect("same width"));
    let fb = flow.params().bind(&mut g, trainable.flow);
    let out = flow.forward_graph(&mut g, &fb, x);
    let log_s = flow.log_noise_factor_graph(&mut g, &out);
    let z_from = g.slice_rows(out.z, 0, b);
    let z_to = g.slice_rows(out.z, b, 2 * b);
    let ls_from = g.slice_rows(log_s, 0, b);
    let ls_to = g.slice_rows(log_s, b, 2 * b);
    let bound_pot = potential.map(|p| {
        let pb = p.params().bind(&mut g, trainable.potential);
        let vars = p.components_graph(&mut g, &pb);
        (p, pb, vars)
    });
    let (kin, eq) = record_losses(
        &mut g,
        bound_pot.as_ref().map(|(p, _, v)| (*p, *v)),
        z_from,
        z_to,
        ls_from,
        ls_to,
        bridge,
        noise,
    )?;
    let total = match eq {
        Some(e) => {
            let s = g.scale(e, alpha);
            g.add(kin, s)
        }
        None => kin,
    };
    let want = trainable.flow || (trainable.potential && potential.is_some());
    let grads = want.then(|| {
        (
            trainable.flow.then_some((&fb, flow.params())),
            bound_pot
                .as_ref()
                .filter(|_| trainable.potential)
                .map(|(p, pb, _)| (pb, p.params())),
        )
    });
    finish(&g, kin, eq, total, grads)
}

/// Losses with a frozen flow: projections and log noise factors are
/// precomputed, and only the mixture parameters are on the graph.
/// `potential = None` means `∇V ≡ 0`.
#[allow(clippy::too_many_arguments)]
pub fn frozen_batch_loss(
    potential: Option<&GmmPotential>,
    z_from: ArrayView2<'_, f64>,
    z_to: ArrayView2<'_, f64>,
    log_s_from: ArrayView2<'_, f64>,
    log_s_to: ArrayView2<'_, f64>,
    bridge: &BridgeConfig,
    noise: &Array2<f64>,
    alpha: f64,
    trainable: bool,
) -> Result<BatchLoss> {
    check_pair_shapes(z_from, z_to)?;
    if log_s_from.dim() != (z_from.nrows(), 1) || log_s_to.dim() != (z_to.nrows(), 1) {
        return Err(Error::config("log noise factors must be one column per pair"));
    }
    let mut g = Graph::new();
    let zf = g.constant(z_from.to_owned());
    let zt = g.constant(z_to.to_owned());
    let lf = g.constant(log_s_from.to_owned());
    let lt = g.constant(log_s_to.to_owned());
    let bound = potential.map(|p| {
        let pb = p.params().bind(&mut g, trainable);
        let vars = p.components_graph(&mut g, &pb);
        (p, pb, vars)
    });
    let (kin, eq) = record_losses(&mut g, bound.as_ref().map(|(p, _, v)| (*p, *v)), zf, zt, lf, lt, bridge, noise)?;
    let total = match eq {
        Some(e) => {
            let s = g.scale(e, alpha);
            g.add(kin, s)
        }
        None => kin,
    };
    let grads = bound
        .as_ref()
        .filter(|_| trainable)
        .map(|(p, pb, _)| (None, Some((pb, p.params()))));
    finish(&g, kin, eq, total, grads)
}

/// `-mean[log p_τ(Φ(x_t), Φ(x_{t+τ})) + log S(x_{t+τ})]`.
pub fn loss_kin(
    flow: &FlowModel,
    potential: Option<&GmmPotential>,
    x_from: ArrayView2<'_, f64>,
    x_to: ArrayView2<'_, f64>,
    bridge: &BridgeConfig,
    noise: &Array2<f64>,
) -> Result<f64> {
    let frozen = Trainable {
        flow: false,
        potential: false,
    };
    Ok(batch_loss(flow, potential, x_from, x_to, bridge, noise, 0.0, frozen)?.kin)
}

/// `-mean[log μ(Φ(x)) + log S(x)]`.
pub fn loss_eq(flow: &FlowModel, potential: &GmmPotential, frames: ArrayView2<'_, f64>) -> Result<f64> {
    if frames.nrows() == 0 {
        return Err(Error::config("loss batch is empty"));
    }
    let (y, logdet) = flow.forward_batch(frames)?;
    let d = flow.rc_dim();
    let log_mu = potential.snapshot()?.log_density_batch(y.slice(ndarray::s![.., ..d]))?;
    let mut acc = 0.0;
    for (i, row) in y.rows().into_iter().enumerate() {
        let v: Vec<f64> = row.iter().skip(d).copied().collect();
        acc += log_mu[i] + log_std_normal(&v) + logdet[i];
    }
    Ok(-acc / frames.nrows() as f64)
}
