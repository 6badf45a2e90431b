//! Reverse-mode autodiff, MLP building blocks and the Adam optimizer.

mod adam;
pub mod fastmath;
mod graph;
mod mlp;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use graph::{logsumexp, logsumexp_rows, CustomOp, Gradients, Graph, Var};
pub use mlp::{mlp_forward, HiddenActivation, Mlp, MlpSpec, OutputActivation};
pub use params::{array_values, BoundParams, ParamVector, Segment};

/// Central finite-difference gradient of `f` at `x`.
///
/// Test oracle used across the crate; independent of the tape.
pub fn finite_difference_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise relative error, with a floor on the denominator so that
/// near-zero entries are compared on an absolute scale.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
