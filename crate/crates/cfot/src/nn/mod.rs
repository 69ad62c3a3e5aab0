//! Dense-network substrate: a residual normalized MLP with reverse-mode
//! differentiation for parameter and input gradients, AdamW, and parameter
//! EMA.
//!
//! The architecture is fixed: a linear projection, `n_blocks` residual
//! blocks `h + W2·act(W1·LN(h))`, then a final LayerNorm and linear head.
//! Differentiation is implemented directly against this structure rather
//! than through a general tape, which keeps every pass a short sequence of
//! GEMMs. A forward-over-reverse pass provides the exact second-order
//! quantity needed to train energy parameterisations (gradients of losses
//! that themselves contain an input gradient).

mod net;
mod ops;
mod optim;
mod params;

pub use net::{
    backward, backward_input, backward_params, forward, grad_energy_params, Gradients, Tape,
    Wants,
};
pub use optim::{AdamW, EmaParams};
pub use params::{read_checkpoint, write_checkpoint, NetworkSpec, Params};

/// Pointwise nonlinearity of the residual blocks. `Identity` exists so tests
/// can compare against closed-form linear chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

/// Epsilon inside the LayerNorm variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;
