use thiserror::Error;

/// Errors reported by the core library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("image path not found: {0}")]
    MissingPath(String),

    #[error("failed to decode image {path}: {source}")]
    UndecodableImage {
        path: String,
        #[source]
        source: image::ImageError,
    },

    #[error("no images found in {0}")]
    NoImagesFound(String),

    #[error("channel mismatch for {path}: expected {expected}, got {got}")]
    ChannelMismatch {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid image tensor: {0}")]
    InvalidTensor(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        got: [usize; 3],
    },

    #[error("rotation by {angle_deg}° requires a square image, got {h}x{w}")]
    NonSquareRotation { angle_deg: u32, h: usize, w: usize },

    #[error("jigsaw permutation {0:?} is not a bijection on {{0,1,2,3}}")]
    InvalidPermutation([usize; 4]),

    #[error("invalid auxiliary set: {0}")]
    InvalidAuxiliarySet(String),

    #[error("insufficient images: class {class} has {available}, need {needed}")]
    InsufficientImages {
        class: u8,
        available: usize,
        needed: usize,
    },

    #[error("invalid target reference: class {class}, index {index}")]
    InvalidTarget { class: u8, index: usize },

    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),

    #[error("decoder index {k} out of range (model has {num_decoders} decoders)")]
    DecoderOutOfRange { k: usize, num_decoders: usize },

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("mechanism {mechanism} requires a single-decoder model, got K={k}")]
    MechanismDecoderMismatch { mechanism: String, k: usize },

    #[error("prototype bank has {bank_k} pairs but model has {model_k} decoders")]
    PrototypeCountMismatch { bank_k: usize, model_k: usize },

    #[error("label {0} outside {{0, 1}}")]
    InvalidLabel(u8),

    #[error("invalid attack config: {0}")]
    InvalidAttackConfig(String),

    #[error("guide set has no negative prototypes")]
    EmptyNegatives,

    #[error("embedding has near-zero norm ({0:.3e}); cosine loss undefined")]
    ZeroNormEmbedding(f64),

    #[error("guide direction has zero norm in feature space")]
    ZeroGuideDirection,

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint spec hash mismatch (file corrupted or spec altered)")]
    CheckpointHashMismatch,

    #[error("empty example list")]
    EmptyExamples,

    #[error("remote victim error: {0}")]
    RemoteVictim(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
