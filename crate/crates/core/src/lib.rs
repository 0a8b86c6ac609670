//! Simulation and analysis toolkit for narrowband photon-pair sources built
//! on high-Q microring resonators.
//!
//! The crate is organised as a pipeline:
//!
//! * [`resonator`]: resonance grid, Lorentzian transmission, thermal tuning.
//! * [`source`]: pair rates and correlated pair-event sampling.
//! * [`detection`]: losses, jitter, dark counts, gating, dead time, ticks.
//! * [`tagstream`]: the time-tag record and its binary/CSV encodings.
//! * [`correlation`]: coincidence histograms, g² normalisation, HBT.
//! * [`fitting`]: Levenberg–Marquardt solver and the model fits.
//! * [`franson`]: post-selected energy-time entanglement measurement.
//! * [`pipeline`]: chunked end-to-end simulation used by the CLI.
//!
//! Heavy loops run on rayon when the `parallel` feature is enabled (the
//! default). Every kernel splits work into fixed chunks with their own
//! random streams, so results are identical with or without the feature.

pub mod correlation;
pub mod detection;
pub mod error;
pub mod exec;
pub mod fitting;
pub mod franson;
pub mod pipeline;
pub mod resonator;
pub mod rng;
pub mod source;
pub mod tagstream;
pub mod textfmt;

pub use error::{Error, Result};
pub use exec::Exec;
