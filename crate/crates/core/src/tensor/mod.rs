//! Dense real tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values are `f64` throughout. A [`Tape`] records each primitive as it is
//! evaluated; [`Tape::backward`] replays the record in reverse and returns
//! [`Gradients`] for every node that requires one.
//!
//! ```
//! use cmnet::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

mod dense;
mod gradcheck;
mod kernels;
mod tape;

pub use dense::{broadcast_shape, Tensor};
pub use gradcheck::{finite_difference_check, relative_error, GradCheckOptions, GradCheckReport, FD_STEP};
pub use kernels::{Conv2dGeometry, ConvTransposeGeometry};
pub use tape::{
    sigmoid, BinaryKind, BnBatchStats, BnMode, CustomOp, Gradients, Tape, UnaryKind, Var, BN_EPS,
};

/// Additive causal mask for a `t x t` score matrix: `0` on and below the
/// diagonal, `-inf` above it.
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}
