pub mod cone;
mod cone_fast;
pub mod constraint;
pub mod dense;
pub mod energy;
pub mod error;
pub mod grid;
pub mod jko;
pub mod krylov;
pub mod models;
pub mod pdfb;
pub mod reference;
pub mod state;

pub use error::{Error, Result};
