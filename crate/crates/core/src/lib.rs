//! Divergence-based similarity for multi-view contrastive learning.
//!
//! Groups of augmented views are summarised as von Mises-Fisher distributions
//! and compared by negative KL divergence inside an InfoNCE objective. The
//! numeric core ([`bessel`], [`vmf`], [`loss`]) is generic over [`Real`];
//! the aliases below fix the scalar to `f64` (or `f32`).

pub mod bessel;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod loss;
pub mod scalar;
pub mod train;
pub mod vmf;

pub use error::{DsfError, Result};
pub use scalar::Real;

pub type UnitVector = vmf::UnitVector<f64>;
pub type ViewGroup = vmf::ViewGroup<f64>;
pub type Vmf = vmf::VmfDistribution<f64>;
pub type StabilizationPolicy = vmf::StabilizationPolicy<f64>;
pub type MultiViewBatch = loss::MultiViewBatch<f64>;
pub type LossOutput = loss::LossOutput<f64>;

pub type UnitVector32 = vmf::UnitVector<f32>;
pub type Vmf32 = vmf::VmfDistribution<f32>;
pub type MultiViewBatch32 = loss::MultiViewBatch<f32>;
