//! Small feed-forward networks whose weight matrices are either bit-plane
//! layers or plain full-precision matrices.

mod conv;
mod model;
mod network;

pub use model::{weighted_average_bits, LayerKind, LayerWeights, LocalModel, ModelSpec};
pub use network::{
    backward, backward_from, cross_entropy, forward, logits_gradient, softmax_columns, ForwardCache,
    Gradients,
};
