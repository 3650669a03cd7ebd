//! A deliberately small reverse-mode autodiff engine for 1-D convolutional
//! audio models. Everything is `f64` and single-threaded, so results are
//! bitwise reproducible run to run and finite-difference checks are tight.

pub mod conv;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod store;

pub use conv::ConvGeom;
pub use graph::{CustomOp, Grads, Graph, Tensor, Var};
pub use optim::{Adam, AdamConfig};
pub use store::{Builder, Kind, ParamId, ParamStore};

/// Central finite-difference derivative of `f` at every coordinate listed
/// in `coords` of `x`.
pub fn finite_difference(
    x: &Tensor,
    coords: &[usize],
    eps: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.as_slice().unwrap()[i];
            probe.as_slice_mut().unwrap()[i] = orig + eps;
            let up = f(&probe);
            probe.as_slice_mut().unwrap()[i] = orig - eps;
            let down = f(&probe);
            probe.as_slice_mut().unwrap()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}
