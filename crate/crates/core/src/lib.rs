pub mod autodiff;
pub mod corpus;
pub mod ctc;
pub mod diffusion;
pub mod error;
pub mod formats;
pub mod mel;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod quantizer;
pub mod selfcheck;
pub mod shortcut;
pub mod train;

pub use error::{Error, Result};
