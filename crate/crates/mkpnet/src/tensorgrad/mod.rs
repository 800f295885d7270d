//! Minimal deterministic reverse-mode autodiff engine: dense f32 tensors,
//! a recorded op tape with backward, Adam, seeded randomness, checkpoint
//! I/O, and finite-difference gradient verification.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod param;
pub mod rng;

pub use adam::{clip_global_norm, OptimState};
pub use gradcheck::{check_graph, grad_check, rel_err};
pub use graph::{Graph, Tensor, TensorId};
pub use param::{Binder, Param, ParamSet};
pub use rng::Rng;
