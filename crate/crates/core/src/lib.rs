pub mod autodiff;
pub mod container;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod labeler;
pub mod losses;
pub mod nn;
pub mod overlap;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod scene;
pub mod ssg;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
