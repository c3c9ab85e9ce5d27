//! Distance-map supervision for joint left-atrium segmentation and scar quantification.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`]: dense 3-D grids, label volumes, MVOL and PGM I/O.
//! * [`distance`]: exact signed Euclidean distance maps and distance-probability maps.
//! * [`surface`]: boundary masks, surface classification, label projection and PLY export.
//! * [`losses`]: every objective term with closed-form gradients.
//! * [`metrics`]: Dice, surface distances, surface scar scores and the Otsu baseline.
//! * [`phantom`]: deterministic synthetic atria with wall and scar ground truth.
//! * [`model`]: two-headed toy networks, SGD training and inference.

#![allow(clippy::needless_range_loop)]
pub mod distance;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod phantom;
pub mod surface;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Grid, LabelVolume, Volume3};
