//! The recurrent network, its parameters and its gradient tape.

pub mod graph;
pub mod network;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use network::{window_at, Model, RecurrentState, Refined};
pub use params::{
    closed_form_count, layout, ConvPadding, ModelConfig, ParamArray, ParamId, ParameterSet,
    PAPER_SCALE_CHANNELS,
};
