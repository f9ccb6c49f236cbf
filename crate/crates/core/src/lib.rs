//! Training, attacking, and defending small vision-based RL policies.
//!
//! The crate bundles a minimal reverse-mode autodiff tensor library, a
//! bottleneck attention module, a convolutional policy network, an L∞
//! projected-gradient attack, an attention-mask activation-recovery
//! defense, a deterministic pixel environment, a PPO trainer, and the
//! evaluation metrics that tie them together.

pub mod attack;
pub mod bam;
pub mod checkpoint;
pub mod conv;
pub mod env;
pub mod fdcheck;
pub mod init;
pub mod metrics;
pub mod ops;
pub mod policy;
pub mod ppo;
pub mod recovery;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use conv::Conv2dGeometry;
pub use scalar::{Dtype, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError, TensorResult};
