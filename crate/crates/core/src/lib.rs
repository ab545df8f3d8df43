//! Single-panorama neural radiance fields.
//!
//! An equirectangular RGB-D panorama is back-projected to a colored point
//! cloud, re-rendered from virtual poses near the capture point, and the
//! resulting frames supervise a coarse/fine radiance field with color,
//! depth and embedding-similarity losses.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod panorama;
pub mod rendering;
pub mod reprojection;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
