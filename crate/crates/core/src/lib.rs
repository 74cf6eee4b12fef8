//! Equilibrium propagation for convergent recurrent ConvNets.
//!
//! The crate covers the operator set (convolution, transpose convolution,
//! max pooling with argmax offsets), the network model and its primitive
//! function, free and nudged relaxation, five gradient estimators, two
//! reference gradients (backpropagation through time and finite
//! differences), and a training loop with SGD, Kolen-Pollack updates,
//! dropout, checkpoints and a CSV metric log.
//!
//! ```
//! use eqprop::{ArchitectureConfig, Connection, ConvLayerSpec, LossHead, Network, Dynamics};
//! use eqprop::ops::Activation;
//! use eqprop::Tensor;
//!
//! let net = Network::new(ArchitectureConfig {
//!     input: [1, 4, 4],
//!     conv: vec![ConvLayerSpec { channels: 2, kernel: 3, padding: 1, pool: 2 }],
//!     fc: vec![],
//!     classes: 3,
//!     activation: Activation::HardSigmoidHalf,
//!     head: LossHead::SoftmaxReadout,
//!     connection: Connection::Bidirectional,
//! })?;
//! let params = net.init_params(0);
//! let x = Tensor::full(&[1, 1, 4, 4], 0.5);
//! let report = Dynamics::new(&net, &params, &x)?.free(30)?;
//! assert!(report.residual < 1e-6);
//! # Ok::<(), eqprop::Error>(())
//! ```

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod model;
pub mod ops;
pub mod oracles;
pub mod tensor;
pub mod toy;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::Dataset;
pub use dynamics::{Dynamics, Nudge, RelaxOptions, RelaxReport, Trajectory};
pub use error::{Error, Result};
pub use estimators::EstimatorKind;
pub use model::{
    ArchitectureConfig, Connection, ConvLayerSpec, GradientEstimate, LossHead, Network,
    NetworkState, ParamSet, Parameters,
};
pub use ops::PoolIndices;
pub use tensor::Tensor;
pub use train::{GradientMethod, Hyperparams, OptimizerState};
