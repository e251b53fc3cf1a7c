//! Desk-scale diffusion editing with classifier-guided semantic embeddings.

pub mod autodiff;
pub mod collapse;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod models;
pub mod semantic;
pub mod synthdata;

pub use error::{Error, Result};
