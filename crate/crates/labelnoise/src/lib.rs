//! Softmax classifiers that survive noisy labels.
//!
//! Real-world label sets are rarely clean: labels get flipped between
//! classes, and some samples do not belong to any class at all. This crate
//! trains a plain softmax classifier on such data by composing it with a
//! *noise layer*: a column-stochastic matrix `Q` inserted between the
//! softmax output and the cross-entropy loss. The layer adapts the model's
//! clean-class predictions to the noisy label distribution, so the base
//! model underneath is free to learn the true classes. `Q` can be fixed
//! (when the noise process is known) or learned jointly with the model by
//! projected gradient steps under a diffusing regularizer.
//!
//! The crate ships:
//!
//! - [`simplex`]: Euclidean projection onto the probability simplex and
//!   column-stochastic matrix projection.
//! - [`model`]: a from-scratch MLP with softmax output, analytic
//!   backpropagation and minibatch SGD.
//! - [`noise`]: the noise layer itself — forward mixing, the combined
//!   cross-entropy loss, its gradients, regularizers, projected updates,
//!   the freeze schedule, and the fixed outlier matrix.
//! - [`synth`]: synthetic Gaussian-mixture datasets with label-flip and
//!   outlier corruption.
//! - [`metrics`]: confusion matrices, recovery error, entropy scores and
//!   inlier precision-recall curves.
//! - [`config`] / [`runner`]: a deterministic experiment harness (single
//!   runs and noise-level × training-size sweeps) behind the `labelnoise`
//!   CLI.
//!
//! Everything is deterministic: a run is a pure function of its
//! configuration and seed.
//!
//! ```
//! use labelnoise::noise::NoiseMatrix;
//! use ndarray::array;
//!
//! // A 2-class noise process: class 0 keeps its label 80% of the time.
//! let q = NoiseMatrix::fixed(array![[0.8, 0.1], [0.2, 0.9]]).unwrap();
//! let base = array![[0.5, 0.5]];
//! let noisy = q.forward(&base.view()).unwrap();
//! assert!((noisy[[0, 0]] - 0.45).abs() < 1e-12);
//! assert!((noisy[[0, 1]] - 0.55).abs() < 1e-12);
//! ```

pub mod config;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod rng;
pub mod runner;
pub mod simplex;
pub mod synth;

use thiserror::Error;

/// Errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed file: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

// The book's code snippets double as doc-tests so the guide can never
// drift from the API.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }

    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(CombinedModel, "../../../book/src/combined-model.md");
    chapter!(LearningQ, "../../../book/src/learning-q.md");
    chapter!(Outliers, "../../../book/src/outliers.md");
    chapter!(SyntheticData, "../../../book/src/synthetic-data.md");
    chapter!(Metrics, "../../../book/src/metrics.md");
    chapter!(Harness, "../../../book/src/harness.md");
    chapter!(FileFormats, "../../../book/src/file-formats.md");
}
