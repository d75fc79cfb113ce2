//! Minimal neural-network toolkit: autodiff graph, parameter store,
//! transformer layers and optimizers.

mod graph;
mod layers;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use layers::{FeedForward, LayerNorm, Linear, SelfAttention, LN_EPS};
pub use optim::{Adam, ExponentialLr};
pub use params::{trunc_normal, ParamStore};
