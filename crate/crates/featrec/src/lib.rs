//! featrec — unsupervised anomaly segmentation for images.
//!
//! The pipeline reconstructs dense multi-scale regional features, extracted
//! from a frozen convolutional backbone, with a pointwise autoencoder trained
//! only on normal images. Regions whose features reconstruct poorly are
//! flagged as anomalous.
//!
//! Stages, one module each:
//!
//! 1. [`tensor`] — dense arrays, image I/O, resize and mean-filter kernels.
//! 2. [`backbone`] — forward-only CNN inference and receptive-field metadata.
//! 3. [`regional`] — align / aggregate / concatenate feature maps into one
//!    dense multi-scale regional representation.
//! 4. [`cae`] — PCA latent sizing and the pointwise autoencoder with its
//!    from-scratch Adam training loop.
//! 5. [`scoring`] — anomaly maps, FPR-calibrated thresholds, segmentation.
//! 6. [`metrics`] — pixel ROC-AUC and normalized per-region-overlap AUC.
//! 7. [`dataset`] + [`pipeline`] — dataset ingestion, synthetic data, and the
//!    end-to-end train / threshold / detect / eval / bench commands.

pub mod backbone;
pub mod cae;
pub mod config;
pub mod dataset;
pub mod dfrc;
pub mod error;
pub mod metrics;
pub mod regional;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
