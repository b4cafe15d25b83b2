//! Decentralized conformal prediction over undirected graphs.
//!
//! Two protocols calibrate prediction sets without a central server:
//!
//! - [`qdcp`]: devices solve a smoothed, regularized pinball-loss problem with
//!   decentralized ADMM and widen the consensus quantile by an explicit error margin.
//! - [`hdcp`]: devices run linear consensus on quantized score histograms and select a
//!   quantile level with a spectral-gap margin.
//!
//! [`harness`] evaluates both against centralized split CP and FCP on synthetic or
//! file-based scores.

pub mod consensus;
pub mod error;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod hdcp;
pub mod linalg;
pub mod qdcp;
pub mod quantile;
pub mod scores;
pub mod wire;

pub use error::{DcpError, Result};
