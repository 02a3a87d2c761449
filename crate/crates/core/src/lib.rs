pub mod attention;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod losses;
pub mod networks;
pub mod records;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
