pub mod bench;
pub mod checkpoint;
pub mod datagen;
pub mod detect;
pub mod encoder;
pub mod error;
pub mod gdip;
pub mod gradcheck;
pub mod io;
pub mod ip_ops;
pub mod metrics;
pub mod model;
pub mod mgdip;
pub mod params;
pub mod probe;
pub mod suite;
pub mod tensor;
pub mod trainer;

pub use error::{GdipError, Result};
pub use tensor::{Image, MinMax, StopGrad, Tensor};
