//! Dense tensors and the reverse-mode differentiation kernel.

mod array;
pub mod gradcheck;
mod kernels;
pub mod ops;
mod params;
mod permutation;
mod shape;
mod tape;


pub use array::Tensor;
pub use gradcheck::{grad_check_finite_diff, GradCheckReport};
pub use kernels::ConvGeometry;
pub use ops::{backward, conv2d_grouped, gather_rows, gelu, global_avg_pool, layer_norm, matmul, softmax_lastdim, NORM_EPS};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use permutation::Permutation;
pub use tape::{Gradients, Tape, Var};
