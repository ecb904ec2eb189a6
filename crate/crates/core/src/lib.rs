//! Non-neural machinery for iterative semi-supervised segmentation of
//! abdominal CT: NIfTI volume I/O, preprocessing, pseudo-label fusion,
//! flip test-time augmentation, connected-component cleanup, DSC/NSD
//! evaluation, efficiency scoring, and a resumable teacher/student
//! orchestrator that drives an external segmenter process.
//!
//! Float kernels are generic over [`Real`] (`f32` / `f64`); the aliases
//! below name the common instantiations.

pub mod classes;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod monitor;
pub mod nifti;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod scalar;
pub mod tta;
pub mod volume;

pub use classes::{ClassSet, TUMOR};
pub use error::{Error, Result};
pub use scalar::{ElemType, Element, Real};
pub use volume::{AnyVolume, Dims, LabelMap, ProbMap, Spacing, Volume};

/// CT image in single precision, the on-disk float type.
pub type Image = Volume<f32>;
/// Double-precision image, used where results are compared against oracles.
pub type ImageF64 = Volume<f64>;
/// Binary mask with values in {0, 1}.
pub type Mask = Volume<u8>;
pub type ProbMapF32 = ProbMap<f32>;
pub type ProbMapF64 = ProbMap<f64>;
pub type DistanceMap = metrics::DistanceField<f64>;
