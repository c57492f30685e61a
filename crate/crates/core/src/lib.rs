//! STEM image simulation with three interchangeable solvers: the standard
//! Multislice algorithm, PRISM and the Lattice Multislice Algorithm (LMA).
//!
//! The crate is organized around complex 2D fields on a periodic grid
//! ([`grid`]), probe optics ([`optics`]), projected-potential specimens
//! ([`specimen`]) and the split-step solver ([`multislice`]). On top of the
//! solver sit the two probe-approximation schemes: [`prism`] decomposes
//! probes into aperture-limited plane waves, [`lma`] approximates them by
//! least-squares combinations of real-space-localized input waves on a
//! lattice ([`inputwaves`]). Memory-bounded pixel ordering and incremental
//! recomputation after local specimen edits live in [`scheduler`]; detector
//! models and image assembly in [`detect`].

// Validations use `!(x > 0.0)` so that NaN parameters are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Sort keys and per-set bookkeeping tuples read better inline.
#![allow(clippy::type_complexity)]

pub mod counters;
pub mod detect;
pub mod grid;
pub mod inputwaves;
pub mod lma;
pub mod multislice;
pub mod optics;
pub mod prism;
pub mod scheduler;
pub mod specimen;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid geometries do not match: {0}")]
    GeometryMismatch(String),
    #[error("field contains non-finite values: {0}")]
    NonFinite(String),
    #[error("reference field has zero norm")]
    ZeroReference,
    #[error("crop window {requested:?} exceeds grid {grid:?}")]
    CropTooLarge {
        requested: (usize, usize),
        grid: (usize, usize),
    },
    #[error("aperture passes no non-zero grid frequencies (alpha_max below the grid's Fourier resolution)")]
    EmptyAperture,
    #[error("probe and input lattices are incompatible: {0}")]
    IncompatibleLattices(String),
    #[error("dictionary is rank deficient at representative probe {rep:?} (column {column})")]
    RankDeficient { rep: (i64, i64), column: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
