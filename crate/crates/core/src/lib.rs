//! Diffusion-prior reconstruction for undersampled MRI and sparse-view CT.
//!
//! The crate is organised bottom-up:
//!
//! * [`imgcore`]: pixel grids, finite differences, seeded randomness, raw I/O
//! * [`operators`]: Fourier/Radon measurement models and sampling masks
//! * [`diffusion`]: variance-exploding noise schedule, score matching, training
//! * [`scoremodel`]: score estimators and receptive-field bookkeeping
//! * [`samplers`]: annealed Langevin and predictor-corrector posterior sampling
//! * [`variational`]: Charbonnier-TV baseline solved with restarted FISTA
//! * [`analysis`]: PSNR/SSIM and dataset gradient statistics
//! * [`harness`]: experiment configs, synthetic phantoms and report tables

pub mod analysis;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod imgcore;
pub mod operators;
pub mod par;
pub mod samplers;
pub mod scoremodel;
pub mod variational;

pub use error::{Error, Result};
pub use imgcore::{ComplexField, Image, RngState};
