use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // NIfTI header / payload
    #[error("bad magic: expected \"n+1\\0\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("big-endian NIfTI files are not supported")]
    BigEndian,
    #[error("bad header size: sizeof_hdr is {0}, expected 348")]
    BadHeaderSize(i32),
    #[error("file too short for a NIfTI-1 header ({0} bytes)")]
    ShortHeader(usize),
    #[error("unsupported datatype code {0} (supported: 2, 4, 16, 512)")]
    UnsupportedDatatype(i16),
    #[error("bitpix {bitpix} does not match datatype code {datatype}")]
    BitpixMismatch { datatype: i16, bitpix: i16 },
    #[error("unsupported dimensionality: dim[0] is {0}, expected 3")]
    UnsupportedDimCount(i16),
    #[error("invalid grid size {0:?}")]
    BadDims([i64; 3]),
    #[error("non-positive pixdim[{axis}] = {value}")]
    NonPositivePixdim { axis: usize, value: f32 },
    #[error("unsupported vox_offset {0}, expected 352")]
    BadVoxOffset(f32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("non-finite voxel value at linear index {0}")]
    NonFinite(usize),

    // Volume contracts
    #[error("invalid spacing ({0}, {1}, {2}): components must be positive and finite")]
    InvalidSpacing(f64, f64, f64),
    #[error("data length {actual} does not match grid {dims:?} ({expected} voxels)")]
    DataLength {
        dims: [usize; 3],
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: [usize; 3], right: [usize; 3] },
    #[error("spacing mismatch: {left:?} vs {right:?}")]
    SpacingMismatch { left: [f64; 3], right: [f64; 3] },
    #[error("class id {0} out of range 0..=14")]
    InvalidClass(u32),
    #[error("label value {value} at linear index {index} exceeds 14")]
    LabelOutOfRange { value: f64, index: usize },
    #[error("invalid probability map: {0}")]
    InvalidProbMap(String),
    #[error("mask is not binary: value {value} at linear index {index}")]
    NonBinary { value: u8, index: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    // Fusion
    #[error("unknown label source {0:?} (not listed in source_priority)")]
    UnknownSource(String),
    #[error("label map contains class {class} outside its annotated classes")]
    UnannotatedClass { class: u8 },
    #[error("{map} map contains unexpected class {class}")]
    UnexpectedClass { map: &'static str, class: u8 },
    #[error("source {0:?} given more than once")]
    DuplicateSource(String),

    // Manifest / pipeline
    #[error("duplicate case id {0:?}")]
    DuplicateCase(String),
    #[error("case {case:?}: file not found: {path}")]
    MissingFile { case: String, path: PathBuf },
    #[error("case {case:?}: {detail}")]
    InconsistentCase { case: String, detail: String },
    #[error("empty teacher set for the {0} phase")]
    EmptyTeacherSet(String),
    #[error("pipeline state is at phase {actual}, cannot run phase {requested}")]
    PhaseMismatch { requested: String, actual: String },
    #[error("segmenter command {command:?} failed: {status}")]
    Segmenter { command: String, status: String },
    #[error("invalid pipeline state: {0}")]
    State(String),

    // Monitor
    #[error("failed to spawn {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
