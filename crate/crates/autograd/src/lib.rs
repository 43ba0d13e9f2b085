//! Tape-based reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. Calling [`Tape::backward`] walks the record in reverse and
//! returns the gradient of a scalar root with respect to every node that
//! requires one. Values are always stored in standard (row-major) layout.
//!
//! The op set is deliberately small: elementwise arithmetic with numpy-style
//! broadcasting, a few unary functions, (batched) matrix products, 2-D
//! convolution, reductions, reshapes and gathers. Higher-level layers are
//! composed from these by the callers.

mod conv;
mod tape;

pub use conv::{conv2d_forward, conv_output_size};
pub use tape::{Gradients, Tape, Var};

/// Dynamic-rank `f64` array used for every value on the tape.
pub type Array = ndarray::ArrayD<f64>;

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn unbroadcast(grad: Array, shape: &[usize]) -> Array {
    use ndarray::Axis;
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if s == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}
