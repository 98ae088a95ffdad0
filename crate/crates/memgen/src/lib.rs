//! Memorability-conditioned image generation toolkit.
//!
//! The crate bundles the full pipeline:
//!
//! * [`dataset`] — manifests, visual-memory-schema (VMS) maps, observer
//!   annotations, and a synthetic oracle dataset for end-to-end tests.
//! * [`vms_predictor`] — a VAE that predicts a 2-channel VMS map from an
//!   image and reduces it to a scalar memorability score or a 10x10 target.
//! * [`memgan`] — a gradient-penalty Wasserstein GAN whose generator takes a
//!   memorability conditioner alongside the noise code and is trained with
//!   an auxiliary memorability loss.
//! * [`psychometrics`] — d-prime, Pearson correlation, split-half VMS
//!   consistency, and category-level reports.
//! * [`evaluation`] — Fréchet distance between feature statistics, the
//!   fixed-Z high/low memorability pair protocol, and threshold stats.
//! * [`cli`] — the `memgen` binary's subcommand implementations.
//!
//! Training runs entirely on the CPU in `f64` on a small tape-based autodiff
//! engine ([`graph`]) that supports the double backpropagation needed by the
//! critic's gradient penalty.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod memgan;
pub mod nn;
pub mod psychometrics;
pub mod vms_predictor;

pub use error::{Error, Result};
