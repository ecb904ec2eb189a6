//! Iterative pseudo-labeling orchestration around an external segmenter.

pub mod config;
pub mod fixture;
pub mod manifest;
pub mod mock;
pub mod runner;
pub mod segmenter;
pub mod state;

pub use config::{ExternalSource, PipelineConfig, ResampleTarget};
pub use manifest::{load_manifest, AnnotationStatus, CaseRecord, Manifest};
pub use runner::{run_pipeline, FinalReport, Pipeline, WorkDir};
pub use segmenter::{OutputMode, SegmenterContract};
pub use state::{CaseStatus, Phase, PipelineState, RoundSummary};
