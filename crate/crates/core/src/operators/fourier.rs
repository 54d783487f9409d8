use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::KMask;
use crate::error::{Error, Result};
use crate::imgcore::{ComplexField, Image};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place unnormalised 2-D FFT of a row-major buffer.
fn fft2_in_place(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let row_fft = plan(cols, inverse);
    row_fft.process(data);

    let col_fft = plan(rows, inverse);
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

fn unitary(field: &ComplexField, inverse: bool) -> ComplexField {
    let (rows, cols) = field.dims();
    let mut out = field.clone();
    fft2_in_place(out.data_mut(), rows, cols, inverse);
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    out.data_mut().iter_mut().for_each(|z| *z *= scale);
    out
}

/// Orthonormal 2-D DFT (`1/sqrt(n)` scaling), DC at index `(0, 0)`.
pub fn dft2(x: &ComplexField) -> ComplexField {
    unitary(x, false)
}

pub fn dft2_real(x: &Image) -> ComplexField {
    unitary(&x.to_complex(), false)
}

/// Inverse of [`dft2`].
pub fn idft2(y: &ComplexField) -> ComplexField {
    unitary(y, true)
}

/// Signed frequency of DFT index `j` on an axis of length `n`.
pub fn signed_freq(j: usize, n: usize) -> isize {
    if j < n.div_ceil(2) {
        j as isize
    } else {
        j as isize - n as isize
    }
}

fn check_mask(dims: (usize, usize), m: &KMask) -> Result<()> {
    if dims != m.dims() {
        return Err(Error::dim(format!(
            "mask {:?} for data {:?}",
            m.dims(),
            dims
        )));
    }
    Ok(())
}

/// `M F x`.
pub fn mri_forward(x: &Image, m: &KMask) -> Result<ComplexField> {
    check_mask(x.dims(), m)?;
    let mut k = dft2_real(x);
    m.apply(&mut k);
    Ok(k)
}

/// `F^{-1} M y`.
pub fn mri_adjoint(y: &ComplexField, m: &KMask) -> Result<ComplexField> {
    check_mask(y.dims(), m)?;
    let mut k = y.clone();
    m.apply(&mut k);
    Ok(idft2(&k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::{gaussian_field, RngState};

    #[test]
    fn delta_transforms_to_flat_quarter() {
        let mut x = Image::zeros(4, 4);
        x.set(0, 0, 1.0);
        let k = dft2_real(&x);
        for z in k.data() {
            assert!((z.re - 0.25).abs() < 1e-15 && z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn constant_has_only_dc() {
        let c = 1.7;
        let k = dft2_real(&Image::filled(6, 6, c));
        assert!((k.get(0, 0).re - c * 6.0).abs() < 1e-12);
        for (i, z) in k.data().iter().enumerate().skip(1) {
            assert!(z.norm() < 1e-12, "bin {i}: {z}");
        }
    }

    #[test]
    fn parseval_and_inverse() {
        let mut rng = RngState::new(11);
        for &(r, c) in &[(8, 8), (5, 12), (32, 32), (1, 7)] {
            let x = gaussian_field(r, c, &mut rng);
            let k = dft2_real(&x);
            assert!((k.norm() - x.norm()).abs() <= 1e-12 * x.norm());
            let back = idft2(&k).re();
            let err = (&back - &x).norm();
            assert!(err <= 1e-12 * x.norm(), "{r}x{c}: {err}");
        }
    }

    #[test]
    fn full_mask_is_plain_dft() {
        let x = gaussian_field(6, 10, &mut RngState::new(1));
        let m = KMask::full(6, 10);
        assert_eq!(mri_forward(&x, &m).unwrap(), dft2_real(&x));
        let back = mri_adjoint(&mri_forward(&x, &m).unwrap(), &m).unwrap().re();
        assert!((&back - &x).norm() < 1e-12 * x.norm());
    }

    #[test]
    fn dc_only_mask_keeps_dc_of_constant() {
        let mut keep = vec![false; 16];
        keep[0] = true;
        let m = KMask::new(4, 4, keep).unwrap();
        let k = mri_forward(&Image::filled(4, 4, 2.0), &m).unwrap();
        assert!((k.get(0, 0).re - 8.0).abs() < 1e-12);
        assert!(k.data()[1..].iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn masked_entries_are_exact_zeros() {
        let mut rng = RngState::new(5);
        let m = crate::operators::mask_gaussian2d(16, 16, 3.0, &mut rng).unwrap();
        let k = mri_forward(&gaussian_field(16, 16, &mut rng), &m).unwrap();
        for (z, &keep) in k.data().iter().zip(m.keep()) {
            if !keep {
                assert_eq!(*z, Complex64::new(0.0, 0.0));
            }
        }
    }

    #[test]
    fn adjoint_identity_and_projection() {
        let mut rng = RngState::new(9);
        let m = crate::operators::mask_gaussian1d(32, 32, 2.0, 0.08, &mut rng).unwrap();
        for _ in 0..20 {
            let x = gaussian_field(32, 32, &mut rng);
            let yr = gaussian_field(32, 32, &mut rng);
            let yi = gaussian_field(32, 32, &mut rng);
            let y = ComplexField::from_vec(
                32,
                32,
                yr.data().iter().zip(yi.data()).map(|(&a, &b)| Complex64::new(a, b)).collect(),
            )
            .unwrap();
            let lhs = mri_forward(&x, &m).unwrap().dot_re(&y);
            let rhs = x.to_complex().dot_re(&mri_adjoint(&y, &m).unwrap());
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }
        // A*A is idempotent on complex inputs
        let x = gaussian_field(32, 32, &mut rng).to_complex();
        let once = idft2(&{
            let mut k = dft2(&x);
            m.apply(&mut k);
            k
        });
        let twice = idft2(&{
            let mut k = dft2(&once);
            m.apply(&mut k);
            k
        });
        assert!(twice.sub(&once).norm() <= 1e-10 * once.norm());
    }

    #[test]
    fn signed_frequencies() {
        assert_eq!(signed_freq(0, 8), 0);
        assert_eq!(signed_freq(3, 8), 3);
        assert_eq!(signed_freq(4, 8), -4);
        assert_eq!(signed_freq(7, 8), -1);
        assert_eq!(signed_freq(2, 5), 2);
        assert_eq!(signed_freq(3, 5), -2);
    }
}
