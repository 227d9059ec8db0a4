//! Differentiable operators. Each op has a plain forward kernel where that is
//! useful outside a graph, and a `Var` method that records it on the tape.

mod conv;
mod elementwise;
mod resample;
mod spectral;
mod structure;

pub use conv::conv2d_forward;
pub use elementwise::{sigmoid, Activation, LEAKY_SLOPE};
pub use resample::{downsample2x, resize_bilinear, upsample2x};
pub use spectral::{mat_t_vec, mat_vec, SpectralState};
pub use structure::{from_patches, grid_neighbors, to_patches};

/// Names under which differentiable ops are recorded on the graph.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "conv2d",
    "resize_bilinear",
    "downsample2x",
    "relu",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "abs",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "clamp",
    "abs_ratio",
    "concat_channels",
    "channel_stats",
    "to_patches",
    "from_patches",
    "patch_neighbor_mean",
    "mul_broadcast",
    "sum",
    "mean",
    "spatial_sum",
    "spectral_normalize",
];
