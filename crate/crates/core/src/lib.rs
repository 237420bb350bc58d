//! Deep inertial odometry with recursive self-attention networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff and ADAM.
//! * [`geometry`]: quaternions, strapdown dynamics and the quaternion loss.
//! * [`sensors`]: synthetic trajectories, IMU synthesis and dead reckoning.
//! * [`data`]: CSV ingestion, sliding windows and dataset splits.
//! * [`nets`]: positional encoding, attention, RIOT, ARIOT and the GRU baseline.
//! * [`training`]: two-cycle training, attitude training and checkpoints.
//! * [`inference`]: sliding-window recursive inference.
//! * [`metrics`]: ATE, RTE and the localisation-error CDF.
//! * [`config`]: the run configuration document shared with the CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod nets;
pub mod sensors;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Pose, Quaternion, Vec3, WorldConstants};
pub use metrics::TrajectoryEstimate;
pub use sensors::{ImuSample, ImuSequence, NoiseSpec};
pub use tensor::{Graph, Tensor, Var};

/// Seeded generator used for every stochastic component.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
