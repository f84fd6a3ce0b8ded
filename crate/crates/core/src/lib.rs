//! Semi-supervised concept bottleneck models.
//!
//! The pipeline: generate or load a dataset, split it into a small labeled
//! subset and an unlabeled remainder, give every unlabeled example a soft
//! concept label from its nearest labeled neighbours, then train a concept
//! embedding model whose loss ties concept heatmaps on unlabeled images to
//! those pseudo labels. Trained models can be evaluated, probed with
//! test-time interventions, rendered as saliency maps, and served over HTTP.

pub mod alignment;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod pseudolabel;
pub mod serving;
pub mod training;

pub use error::{Error, Result};
