//! Learned position-error compensation for six-axis serial robots.
//!
//! The crate contains a small reverse-mode autodiff engine, DH forward
//! kinematics, a masked-attention compensation network with its training
//! loop, rigid-frame calibration, a synthetic error world for data
//! generation, and a gradient-based inverse solver that turns a trained
//! network into joint-angle corrections.

pub mod artifact;
pub mod autodiff;
pub mod calibration;
pub mod compensation;
pub mod config;
pub mod dataset;
pub mod error;
pub mod kinematics;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
pub use kinematics::{DhRow, DhTable, JointAngles, Position3, JOINTS};
pub use calibration::{fit_rigid_transform, Correspondences, RigidTransform};
pub use compensation::{compensate, CompensationResult, SolverConfig};
pub use config::RunConfig;
pub use dataset::{ErrorWorld, Sample, SampleSet, Split};
pub use loss::LossMode;
pub use model::{BoterModel, FrozenModel, HeadKind, MaskKind, ModelConfig};
pub use training::{evaluate, train, MetricsReport, TrainConfig, TrainHistory};
