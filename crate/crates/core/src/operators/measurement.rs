use super::{backproject, fbp, idft2, mri_forward, radon, AngleSet, KMask};
use crate::error::{Error, Result};
use crate::imgcore::{ComplexField, Image};

/// Measured data `y`: masked k-space for MRI, a sinogram for CT.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Kspace(ComplexField),
    Sinogram(Image),
}

impl Measurement {
    pub fn norm(&self) -> f64 {
        match self {
            Measurement::Kspace(k) => k.norm(),
            Measurement::Sinogram(s) => s.norm(),
        }
    }

    pub fn sub(&self, other: &Measurement) -> Result<Measurement> {
        match (self, other) {
            (Measurement::Kspace(a), Measurement::Kspace(b)) if a.dims() == b.dims() => {
                Ok(Measurement::Kspace(a.sub(b)))
            }
            (Measurement::Sinogram(a), Measurement::Sinogram(b)) if a.dims() == b.dims() => {
                Ok(Measurement::Sinogram(a - b))
            }
            _ => Err(Error::dim("measurement kinds or shapes differ")),
        }
    }
}

/// Forward model `A`.
#[derive(Debug, Clone)]
pub enum MeasurementOp {
    /// `A = M F` with a unitary DFT.
    Mri { mask: KMask },
    /// `A = M R`: parallel-beam projections at the acquired angles only.
    Ct {
        angles: AngleSet,
        detectors: usize,
        side: usize,
    },
}

impl MeasurementOp {
    pub fn mri(mask: KMask) -> Self {
        MeasurementOp::Mri { mask }
    }

    /// Sparse-view CT on a `side x side` image with `side` detectors.
    pub fn ct(angles: AngleSet, side: usize) -> Self {
        MeasurementOp::Ct {
            angles,
            detectors: side,
            side,
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        match self {
            MeasurementOp::Mri { mask } => mask.dims(),
            MeasurementOp::Ct { side, .. } => (*side, *side),
        }
    }

    fn check(&self, x: &Image) -> Result<()> {
        if x.dims() != self.image_dims() {
            return Err(Error::dim(format!(
                "operator expects {:?}, image is {:?}",
                self.image_dims(),
                x.dims()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Image) -> Result<Measurement> {
        self.check(x)?;
        match self {
            MeasurementOp::Mri { mask } => Ok(Measurement::Kspace(mri_forward(x, mask)?)),
            MeasurementOp::Ct {
                angles, detectors, ..
            } => Ok(Measurement::Sinogram(radon(x, angles, *detectors)?)),
        }
    }

    fn masked_kspace(mask: &KMask, y: &ComplexField) -> Result<ComplexField> {
        if y.dims() != mask.dims() {
            return Err(Error::dim("k-space data does not match mask"));
        }
        let mut k = y.clone();
        mask.apply(&mut k);
        Ok(k)
    }

    /// `Re(A* y)` with the back-operator used for data consistency:
    /// `F^-1 M` for MRI and filtered backprojection for CT.
    pub fn back(&self, y: &Measurement) -> Result<Image> {
        match (self, y) {
            (MeasurementOp::Mri { mask }, Measurement::Kspace(k)) => {
                Ok(idft2(&Self::masked_kspace(mask, k)?).re())
            }
            (MeasurementOp::Ct { angles, side, .. }, Measurement::Sinogram(s)) => fbp(s, angles, *side),
            _ => Err(Error::dim("measurement kind does not match operator")),
        }
    }

    /// `Re(A^T y)` with the exact transpose (backprojection for CT); this is
    /// what gradients of `||Ax - y||^2 / 2` need.
    pub fn adjoint(&self, y: &Measurement) -> Result<Image> {
        match (self, y) {
            (MeasurementOp::Mri { .. }, Measurement::Kspace(_)) => self.back(y),
            (MeasurementOp::Ct { angles, side, .. }, Measurement::Sinogram(s)) => {
                backproject(s, angles, *side)
            }
            _ => Err(Error::dim("measurement kind does not match operator")),
        }
    }

    /// `||Ax - y||`.
    pub fn residual_norm(&self, x: &Image, y: &Measurement) -> Result<f64> {
        Ok(self.forward(x)?.sub(y)?.norm())
    }

    /// Upper bound on `||A||^2` for the exact adjoint.
    pub fn norm_sq_bound(&self) -> f64 {
        match self {
            MeasurementOp::Mri { .. } => 1.0,
            MeasurementOp::Ct {
                angles, side, ..
            } => {
                // each pixel's bilinear footprint sums to at most ~2 per view
                2.0 * angles.len() as f64 * (*side as f64) * std::f64::consts::SQRT_2
            }
        }
    }

    pub fn is_mri(&self) -> bool {
        matches!(self, MeasurementOp::Mri { .. })
    }
}
