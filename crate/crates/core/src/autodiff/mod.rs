//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is built fresh for every loss evaluation and dropped after the
//! optimizer step. Trainable arrays live in a [`ParameterStore`]; the graph
//! copies them in as leaves and writes gradients back with
//! [`Graph::accumulate_into`].

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    finite_difference_check, relative_error, GradCheckReport, ParamCheck, MAGNITUDE_FLOOR,
};
pub use graph::{log_sum_exp, sigmoid, softplus, Graph, Var, LEAKY_SLOPE};
pub use params::{Param, ParamId, ParameterStore};
pub use tensor::Tensor;
