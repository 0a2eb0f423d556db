pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod scenes;
pub mod sparse3d;
pub mod tensor;
pub mod textenc;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
