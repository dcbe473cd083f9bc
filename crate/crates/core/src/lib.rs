pub mod adaptive;
pub mod confset;
pub mod dynamics;
pub mod evaluation;
pub mod error;
pub mod hetgp;
pub mod io;
mod linalg;
pub mod neural;
pub mod par;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
