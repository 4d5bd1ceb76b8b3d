//! anchorhead: cloud-assisted per-sample adaptation for small on-device
//! multi-modal classifiers.
//!
//! A device encodes a (video, query) pair locally, uploads the fused feature
//! of a single anchor frame, and receives freshly generated classifier-head
//! weights in return. The cloud side reasons about the device's feature
//! distribution with a small VAE plus adaptive renormalization, then emits the
//! head through a hypernetwork. The device applies the head with plain matrix
//! math: no gradients, no optimizer state, no backward pass ever runs on the
//! device path.
//!
//! Module map:
//! - [`numerics`]: tensors, the reverse-mode tape, AdamW with polynomial decay
//! - [`synthdata`]: synthetic shifted multi-device corpora with known structure
//! - [`encoder`]: toy multi-modal encoder (frames + token query -> fused rows)
//! - [`fda`]: feature projection and hypernetwork head generation
//! - [`adr`]: anchor-feature VAE and adaptive feature generator
//! - [`protocol`]: binary wire format, bandwidth/delay model, server, client
//! - [`harness`]: two-stage training, baselines, reports, delay table, config

pub mod adr;
pub mod encoder;
pub mod fda;
pub mod harness;
pub mod numerics;
pub mod protocol;
pub mod synthdata;

/// Crate-wide error, mapping each subsystem's failures into one category tree.
/// The CLI turns the category into an exit code and a machine-readable line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Data(#[from] synthdata::DataError),
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
    #[error(transparent)]
    Config(#[from] harness::ConfigError),
    #[error(transparent)]
    Train(#[from] harness::TrainError),
    #[error("i/o error ({context}): {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Stable machine-readable category name (one word, lowercase).
    pub fn category(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::Data(_) => "data",
            Error::Protocol(_) => "protocol",
            Error::Config(_) => "config",
            Error::Train(_) => "train",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
