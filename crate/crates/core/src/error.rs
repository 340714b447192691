//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration value, bad CLI/TOML input, or a rejected
    /// combination of options.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two consecutive layers (or the batch and the first layer) disagree
    /// on their shared dimension.
    #[error("layer {index}: dimension mismatch: {details}")]
    LayerDimMismatch { index: usize, details: String },

    /// A gradient element was NaN or infinite.
    #[error("non-finite gradient element at example {example}, layer {layer}")]
    NonFiniteGradient { example: usize, layer: usize },

    /// The batch passed in does not match the configured batch size.
    #[error("batch size mismatch: expected {expected} rows, got {got}")]
    BatchMismatch { expected: usize, got: usize },

    /// A single tile's operands cannot fit on-chip even at k_t = 1.
    #[error("SRAM too small: a single ({m_t} x 1 x {n_t}) tile needs {needed} bytes but only {available} are available")]
    SramTooSmall {
        m_t: u64,
        n_t: u64,
        needed: u64,
        available: u64,
    },

    /// Rejected norm-derivation policy for the selected dataflow.
    #[error("norm policy error: {0}")]
    Policy(String),

    /// The model's weights alone exceed device memory.
    #[error("model does not fit: weights and fixed state need {needed} bytes, device has {available}")]
    ModelTooLarge { needed: u64, available: u64 },

    /// Requested batch exceeds what fits in device memory.
    #[error("infeasible batch {requested}: maximum feasible batch is {max}")]
    InfeasibleBatch { requested: usize, max: usize },

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
