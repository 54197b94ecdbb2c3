pub mod autodiff;
pub mod bspline;
pub mod error;
pub mod flow;
pub mod io;
pub mod params;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
