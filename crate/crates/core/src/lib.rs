//! Particle-filter geolocalization over a tiled search area.
//!
//! A ground agent is localized against a grid of satellite tiles. Each
//! particle carries an `(x, y)` position; the shared compass heading and the
//! particle's offset inside its tile form a pose that is folded into the
//! ground embedding before it is compared with the tile's embedding. The
//! resulting similarity drives a Gaussian reweighting step, and resampling is
//! gated on the effective sample size.
//!
//! [`sim`] runs the whole loop against a deterministic synthetic world so
//! that experiments are reproducible from a seed.

pub mod embeddings;
pub mod filter;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod sim;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] grid::GridError),
    #[error(transparent)]
    Filter(#[from] filter::FilterError),
    #[error(transparent)]
    Embedding(#[from] embeddings::EmbeddingError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

impl Error {
    /// True when the input was rejected, false when the run itself failed.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(e) => e.is_validation(),
            Error::Embedding(embeddings::EmbeddingError::Io { .. }) => false,
            Error::Sim(sim::SimError::Validation { .. }) => true,
            Error::Sim(_) => false,
            Error::Metrics(_) => false,
            Error::Grid(_) | Error::Filter(_) | Error::Embedding(_) | Error::Loss(_) => true,
        }
    }
}
