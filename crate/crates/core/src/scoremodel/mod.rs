//! Score estimators `s(x, sigma) ~ grad log p_sigma(x)`.

mod gaussian;
pub mod net;
mod receptive;

pub use gaussian::{Covariance, GaussianScore};
pub use net::{NetConfig, ScoreNet};
pub use receptive::{receptive_field, LayerSpec, ReceptiveField};

use crate::error::{Error, Result};
use crate::imgcore::Image;

/// A score field evaluator.
pub trait ScoreModel: Sync {
    fn score(&self, x: &Image, sigma: f64) -> Result<Image>;

    /// Image size the model is tied to, if any.
    fn dims(&self) -> Option<(usize, usize)> {
        None
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for &T {
    fn score(&self, x: &Image, sigma: f64) -> Result<Image> {
        (**self).score(x, sigma)
    }

    fn dims(&self) -> Option<(usize, usize)> {
        (**self).dims()
    }
}

impl<T: ScoreModel + ?Sized> ScoreModel for Box<T> {
    fn score(&self, x: &Image, sigma: f64) -> Result<Image> {
        (**self).score(x, sigma)
    }

    fn dims(&self) -> Option<(usize, usize)> {
        (**self).dims()
    }
}

/// Wraps a closure as a [`ScoreModel`].
pub struct FnScore<F>(pub F);

impl<F> ScoreModel for FnScore<F>
where
    F: Fn(&Image, f64) -> Image + Sync,
{
    fn score(&self, x: &Image, sigma: f64) -> Result<Image> {
        Ok((self.0)(x, sigma))
    }
}

/// The zero field.
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    fn score(&self, x: &Image, _sigma: f64) -> Result<Image> {
        Ok(Image::zeros(x.rows(), x.cols()))
    }
}

pub(crate) fn check_model_dims(model: &dyn ScoreModel, dims: (usize, usize)) -> Result<()> {
    match model.dims() {
        Some(d) if d != dims => Err(Error::dim(format!("model expects {d:?}, data is {dims:?}"))),
        _ => Ok(()),
    }
}
