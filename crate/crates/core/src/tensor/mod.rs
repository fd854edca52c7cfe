//! Dense compute kernel: arrays, forward ops, a reverse-mode tape, parameter
//! stores with a binary checkpoint format, optimizers and seeded RNG streams.

mod array;
pub mod checkpoint;
mod nn;
mod ops;
mod optim;
mod params;
pub mod rng;
mod tape;

pub use array::Array;
pub use nn::{Layer, Mlp};
pub use ops::{activate, affine_batch, affine_forward, argmax, Activation};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, Optimizer, OptimizerKind};
pub use params::{Param, ParamStore};
pub use rng::{seeded_rng, Rng};
pub use tape::{Gradients, Tape, Var};
