//! Tensor arithmetic, reverse-mode autodiff, seeded sampling and a
//! finite-difference oracle.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::Tensor;
