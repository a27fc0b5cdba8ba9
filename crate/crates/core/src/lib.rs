pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod hilbert;
pub mod linalg;
pub mod model;
pub mod observables;
pub mod sparse;

pub use error::{Error, Result};

pub type C64 = num_complex::Complex64;
