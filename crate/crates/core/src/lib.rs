//! Raster toolkit for probabilistic debris-flow hazard mapping.
//!
//! The crate covers the full chain from rainfall to hazard statistics:
//!
//! 1. [`swi`] — a three-tank runoff model turning rainfall series into a
//!    soil-water index per cell.
//! 2. [`terrain`] — slope, curvature, and flow accumulation from a DEM.
//! 3. [`source_model`] — logistic source-cell susceptibility, fitting, and
//!    seeded Bernoulli sampling of source realizations.
//! 4. [`solver`] — a two-dimensional mixture flow solver with erosion and
//!    deposition over an erodible bed.
//! 5. [`evaluation`] — three-class change maps, confusion counts, and a
//!    macro-averaged F1 parameter sweep.
//! 6. [`ensemble`] — Monte Carlo hazard statistics over many realizations.
//!
//! [`synthetic`] generates a self-contained demo catchment, and [`render`]
//! turns any raster into a PPM image. All gridded data flows through
//! [`Raster`], an ESRI ASCII grid in memory.

pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod raster;
pub mod render;
pub mod solver;
pub mod source_model;
pub mod swi;
pub mod synthetic;
pub mod terrain;

pub use error::{Error, Result};
pub use raster::{Geometry, Raster};
