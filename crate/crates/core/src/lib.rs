pub mod codebook;
pub mod config;
pub mod embedding;
pub mod error;
pub mod flow;
pub mod grpo;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod ctmc;
pub mod net;
pub mod path;
pub mod pipeline;
pub mod sampler;
pub mod sim;

/// Trajectory length in tokens: 8 waypoints of `(x, y)`.
pub const TRAJECTORY_DIMS: usize = 16;
