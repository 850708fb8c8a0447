pub mod beam;
pub mod bogovskij;
pub mod bspline;
pub mod config;
pub mod error;
pub mod extension;
pub mod fluid;
pub mod geometry;
pub mod linalg;
pub mod output;
pub mod trace;
pub mod verify;
pub mod pressure;
pub mod quad;
pub mod stepper;
pub mod sweep;

pub use error::{FsiError, Result};
