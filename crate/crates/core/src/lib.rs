//! Pool-based active learning for pixel-wise crop/weed segmentation.
//!
//! The crate bundles everything needed to run a desk-scale active-learning
//! experiment end to end:
//!
//! - [`tensor`] and [`container`]: probability stacks, masks, score maps and
//!   the little-endian `ALTS` file container they are stored in.
//! - [`model`]: a small fully-convolutional classifier with a dropout layer
//!   in front of its final 1×1 convolution, trained by plain SGD and usable
//!   for Monte-Carlo-dropout inference.
//! - [`acquisition`]: BALD pixel maps, image aggregation and the BALD,
//!   PowerBALD and Random selectors.
//! - [`synth`]: seeded synthetic background/crop/weed scenes with
//!   configurable class imbalance and redundancy.
//! - [`al_loop`]: the initial-set / train / score / select / annotate loop.
//! - [`metrics`] and [`stats`]: confusion matrices, mIoU, Student-t
//!   intervals, one-way ANOVA and histograms.
//! - [`config`], [`report`] and [`cli`]: the flat config format, reporting
//!   and the subcommands behind the `segal` binary.

pub mod acquisition;
pub mod al_loop;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod metrics;
pub mod model;
pub mod report;
pub mod seed;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
