//! Minimal neural-network toolkit: an autodiff tape, parameter storage,
//! layers and the Adam optimizer.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{sinusoidal_encoding, Linear};
pub use optim::Adam;
pub use params::{Init, ParamId, ParamStore};
pub use tape::{Gradients, Graph, Mat, Var};
