mod graph;
mod params;
mod tensor;

pub use graph::{cross_entropy_with_grad, loss_coefficients, Gradients, Graph, LossMode, Var};
pub use params::{trunc_normal, uniform, Param, ParamStore};
pub(crate) use params::round_f32;
pub use tensor::Tensor;

pub mod gradcheck;
pub mod layers;
pub mod optim;
