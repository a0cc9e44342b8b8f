//! Differentiable field estimator: Fourier features, residual Snake
//! network, exact input derivatives and parameter gradients.

mod checkpoint;
mod engine;
mod jet;
mod network;
mod trig;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use engine::{
    evaluate, evaluate_with_gradient, forward, Batch, Channel, ChannelSet, ChunkView, FieldEval, FieldModel,
    DEFAULT_CHUNK,
};
pub use jet::{snake, snake_derivatives, Jet2, Scalar};
pub use network::{
    ffe_encode, forward_generic, forward_mixed, forward_with_jets, init_params, normalize_inputs, Activation,
    Architecture, Axis, Dense, NetworkConfig, NetworkParams,
};
