//! Real and complex pixel grids, finite differences, the seeded RNG and the
//! raw on-disk image format.

mod fd;
mod grid;
pub mod io;
mod rng;

pub use fd::{fd_h, fd_h_adjoint, fd_v, fd_v_adjoint};
pub use grid::{ComplexField, Image};
pub use rng::{gaussian_field, RngState};
