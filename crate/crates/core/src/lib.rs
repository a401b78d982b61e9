//! Adversarially robust anomaly detection from normal-only data.
//!
//! The pipeline trains a contrastive encoder on pairs of normal samples and
//! synthesized pseudo-anomalies ("opposites"), hardened in the loop with
//! projected-gradient attacks, and evaluates anomaly scores under both clean
//! and adversarial conditions.
//!
//! Module map:
//! - [`image`]: the `[n, c, h, w]` batch type with `[0, 1]` pixel invariants
//! - [`rng`]: named, order-independent random streams from one root seed
//! - [`autodiff`]: reverse-mode `f64` tape used by nets, losses and attacks
//! - [`augment`]: light views and the hard transform bank
//! - [`nets`]: encoder, projection head, auxiliary classifier, checkpoints
//! - [`gmm`]: diagonal Gaussian mixtures fit by expectation-maximization
//! - [`crafter`]: pseudo-anomaly synthesis with a p-value acceptance test
//! - [`losses`]: contrastive objectives over view/opposite pair batches
//! - [`attacks`]: white- and black-box perturbation searches
//! - [`trainer`]: the adversarial training loop
//! - [`evalkit`]: anomaly scores, ranking metrics, evaluation protocol
//! - [`data`]: dataset loading, protocol splits, synthetic shapes
//! - [`config`]: experiment configuration files and overrides

pub mod attacks;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod crafter;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod gmm;
pub mod image;
pub mod losses;
pub mod nets;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use image::ImageBatch;
