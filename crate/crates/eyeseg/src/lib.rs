//! Segmentation losses with anatomical region constraints, evaluation
//! metrics, and a synthetic eye-phantom toolkit.
//!
//! The crate is organized around a small set of grid types ([`grid`]):
//! integer label masks, per-class probability maps, and raw logit grids.
//! On top of those it provides
//!
//! - a multi-scale max-pooling loss that supervises predictions against
//!   the ground truth at several spatial scales ([`pool`]),
//! - rectified exclusion/enclosure maps between the sclera, iris, and
//!   pupil channels, summed into a region-constraint loss
//!   ([`constraints`]),
//! - pixel-level cross-entropy and soft Dice losses ([`pixel_loss`]),
//! - the weighted composite of the three terms with analytic gradients
//!   chained through the softmax, plus a finite-difference gradient
//!   checker ([`composite`]),
//! - Dice / HD95 / violation-count metrics with bootstrap confidence
//!   intervals ([`metrics`]),
//! - a deterministic eye-phantom generator with corruption operators
//!   that inject known, countable violations ([`phantom`]),
//! - a gradient-descent demonstrator that fits a free logit grid to a
//!   target mask ([`optimize`]), and
//! - file formats and the `eyeseg` command-line interface ([`io`],
//!   [`cli`]).
//!
//! All numeric code is `f64`, single precision only at file boundaries.
//! Every operation is a pure function of its inputs; seeded entry points
//! are bit-deterministic.

pub mod cli;
pub mod composite;
pub mod constraints;
pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod optimize;
pub mod phantom;
pub mod pixel_loss;
pub mod pool;
pub mod seeds;

pub use error::{Error, Result};
