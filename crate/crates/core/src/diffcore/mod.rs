//! Reverse-mode differentiation and the numeric building blocks shared by
//! the encoder, the field and the renderer.

mod encoding;
mod gradcheck;
mod interp;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use encoding::{frequency_ladder, sinusoidal_encode, DEFAULT_SIN_BASE};
pub use gradcheck::{finite_difference_check, GradCheck, GradCheckReport, ParamError, FD_EPSILON};
pub use interp::{stencil, trilinear_interpolate, BoundsPolicy, Stencil};
pub use mlp::{mlp_forward, Activation, Mlp, MlpSpec};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{alpha_value, Gradients, GridMap, Precision, Tape, Var, OP_NAMES};
pub use tensor::Tensor;
