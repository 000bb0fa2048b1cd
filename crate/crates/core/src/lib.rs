pub mod architecture;
pub mod blur;
pub mod checkpoint;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod scenes;
pub mod trainer;

pub use error::{Error, Result};
