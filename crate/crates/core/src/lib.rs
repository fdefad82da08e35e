pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod train;
pub mod vdec;
pub mod vq;
pub mod wm;

pub use error::{Error, Result};
