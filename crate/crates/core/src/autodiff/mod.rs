//! Reverse-mode differentiation over channels-last feature maps.

pub mod check;
pub mod kernels;
mod tape;

pub use check::{fd_select, grad_check, grad_check_coords, grad_check_ladder, relative_error, GradCheck, FD_LADDER, FD_STEP};
pub use kernels::{Geom, Kernel3};
pub use tape::{Activation, Gradients, Tape, Var};
