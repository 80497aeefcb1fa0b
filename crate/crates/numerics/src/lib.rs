//! Minimal dense tensor engine: f64 tensors, a Wengert tape for reverse-mode
//! differentiation, Xavier initialization, SGD/Adam/AdamW and a bit-exact
//! binary tensor format.

pub mod error;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use init::{xavier_init, xavier_normal};
pub use optim::{build_optimizer, Optimizer, OptimizerKind, OptimizerState};
pub use param::Parameter;
pub use tape::{BatchStats, Mode, Tape, Var};
pub use tensor::Tensor;

/// Row-wise `softmax(logits / tau)` outside any tape.
pub fn softmax_with_temperature(logits: &Tensor, tau: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.softmax(x, tau)?;
    Ok(tape.value(y).clone())
}

/// Mean over rows of `-sum(target * ln(pred + 1e-12))`.
pub fn cross_entropy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = tape.cross_entropy(p, t)?;
    Ok(tape.value(l).item())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(a.clone());
    let y = tape.constant(b.clone());
    let l = tape.mse(x, y)?;
    Ok(tape.value(l).item())
}
