//! Central finite-difference gradient checking.
//!
//! The checker only evaluates the scalar function forward; it never looks at
//! the tape's backward pass, so it is an independent oracle for it.

mod suite;

pub use suite::{primitive_suite, PrimitiveCheck};

use crate::error::Result;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Central differences of `f` with respect to every element of every input.
pub fn numeric_grads(inputs: &[Tensor], step: f64, mut f: impl FnMut(&[Tensor]) -> Result<f64>) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = f(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = f(&work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest relative error `|a - n| / max(|a|, |n|, floor)` over all elements.
///
/// `floor` keeps near-zero gradients from dominating; pick it from the
/// scale of the function (1e-6 is fine for O(1) losses).
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
