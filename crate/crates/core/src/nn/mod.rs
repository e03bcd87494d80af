//! Dense tensors, a reverse-mode tape over the layer set of the encoder, and
//! the Adam optimizer.

mod adam;
pub mod check;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BnMode, BnStats, Gradients, Tape, Var, ASP_VAR_FLOOR, BN_EPS, BN_MOMENTUM, PROTO_OMEGA_MIN};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod gradcheck;
