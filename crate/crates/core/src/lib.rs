pub mod autodiff;
pub mod checks;
pub mod error;
pub mod nn;
pub mod par;
pub mod params;
pub mod prompter;
pub mod qformer;
pub mod surrogate;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
