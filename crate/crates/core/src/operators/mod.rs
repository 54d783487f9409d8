//! Measurement models: masked Fourier sampling for MRI and masked Radon
//! sampling for CT, plus the undersampling pattern generators.

mod angles;
mod fourier;
mod masks;
mod measurement;
mod radon;

pub use angles::{sparse_view_angles, AngleSet};
pub use fourier::{dft2, dft2_real, idft2, mri_adjoint, mri_forward, signed_freq};
pub use masks::{
    mask_gaussian1d, mask_gaussian2d, mask_poisson_disk, mask_radial, poisson_disk_with_radius,
    radial_spokes_for_accel, KMask, PoissonDisk,
};
pub use measurement::{Measurement, MeasurementOp};
pub use radon::{backproject, fbp, radon};
