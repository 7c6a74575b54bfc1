//! Stain translation from H&E to IHC tiles: data pipeline, attention
//! generator, patch discriminator, losses, metrics and training loop.

pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod tile;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tile::{ImageTile, StainDomain};
