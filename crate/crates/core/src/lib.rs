pub mod data;
pub mod error;
pub mod losses;
pub mod selection;
pub mod space;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
