//! Unsupervised anomaly detection for univariate time series.
//!
//! Sliding windows are encoded as two-channel images (Gramian angular field
//! and recurrence plot), reconstructed by a hierarchical VAE, and steps whose
//! reconstruction error rises more than two standard deviations above the
//! series mean are flagged. Flagged runs are pruned by the descent rate of
//! their peak scores and evaluated with overlap F1.
//!
//! Pipeline: [`ingest`] → [`windowing`] → [`encode2d`] → [`hvae`] /
//! [`train`] → [`detect`] → [`evaluate`]. [`synth`] produces labelled test
//! series, and [`config`] holds run-level settings.

pub mod config;
pub mod detect;
pub mod encode2d;
pub mod error;
pub mod evaluate;
pub mod hvae;
pub mod ingest;
pub mod interval;
pub mod par;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod windowing;

pub use error::{Error, Result};
pub use interval::Interval;
pub use par::Parallelism;
