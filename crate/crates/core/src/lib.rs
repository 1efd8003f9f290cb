//! Learning hidden physics inside stochastic differential equations by
//! matching propagated moments to ensemble data.

pub mod cases;
pub mod config;
pub mod error;
pub mod io;
pub mod linalg;
pub mod moments;
pub mod neural;
pub mod odeint;
pub mod pipeline;
pub mod propagation;
pub mod rng;
pub mod sde;
pub mod structure;
pub mod training;
pub mod validation;

pub use error::{Error, Result};

pub use cases::{CaseId, GroundTruthModel};
pub use config::{RunConfig, Scale};
pub use moments::{MomentDataset, MomentRecord, Transition};
pub use neural::Mlp;
pub use propagation::{PropagationConfig, PropagatorKind, UtParams};
pub use structure::{SdeStructure, StructuredSde};
pub use training::{LossMode, TrainConfig, TrainedModel};
pub use nalgebra;
