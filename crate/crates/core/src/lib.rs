pub mod autodiff;
pub mod datasets;
pub mod eval;
pub mod explain;
pub mod fusion;
pub mod gradcheck;
mod linalg;
pub mod models;
pub mod saliency;
pub mod tensor;
pub mod training;
