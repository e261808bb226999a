//! Attention-collapse analysis and layer-inheritance training for small
//! decoder-only transformers.

pub mod data;
pub mod linalg;
pub mod model;
pub mod par;
pub mod recipes;
pub mod spectra;
pub mod tensor;
pub mod theory;
