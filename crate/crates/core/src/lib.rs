//! Simulation and reconstruction toolkit comparing near-field holography,
//! far-field ptychography and near-field ptychography at equal photon
//! fluence.
//!
//! The modules build on each other in order: [`grid`] (fields and FFTs),
//! [`optics`] (propagation), [`phantom`] (test objects and supports),
//! [`acquisition`] (forward models and noise), [`reconstruct`] (gradient
//! phase retrieval), [`metrics`] and [`harness`] (files and sweeps).

pub mod acquisition;
pub mod error;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod optics;
pub mod phantom;
pub mod reconstruct;

pub use acquisition::{
    add_poisson_noise, build_probe, fluence_scale, forward, scale_to_fluence, simulate, AcquisitionGeometry, Dataset,
    ForwardModel, Modality, ProbeSpec, Scale, ScanGrid,
};
pub use error::{Error, Result};
pub use grid::{ComplexField, RealField};
pub use metrics::{FrcCurve, MetricsReport};
pub use optics::PropagationSpec;
pub use phantom::{generate_phantom, make_support_mask, ObjectModel, SupportMask};
pub use reconstruct::{reconstruct, CostKind, ReconstructionConfig, ReconstructionResult};
