use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::ScoreModel;
use crate::error::{Error, Result};
use crate::imgcore::Image;

/// Covariance of a Gaussian image prior.
#[derive(Debug, Clone)]
pub enum Covariance {
    /// `v * Id`
    Isotropic(f64),
    /// Per-pixel variances, row-major.
    Diagonal(Vec<f64>),
    /// Dense covariance kept in eigen-decomposed form.
    Full {
        eigenvalues: DVector<f64>,
        eigenvectors: DMatrix<f64>,
    },
}

impl Covariance {
    /// Validate and decompose a dense symmetric positive-definite matrix.
    pub fn full(matrix: DMatrix<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::dim("covariance must be square"));
        }
        let scale = matrix.amax().max(1.0);
        if (&matrix - matrix.transpose()).amax() > 1e-10 * scale {
            return Err(Error::param("covariance is not symmetric"));
        }
        let eig = SymmetricEigen::new(matrix);
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::param("covariance is not positive definite"));
        }
        Ok(Covariance::Full {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    fn len(&self) -> Option<usize> {
        match self {
            Covariance::Isotropic(_) => None,
            Covariance::Diagonal(d) => Some(d.len()),
            Covariance::Full { eigenvalues, .. } => Some(eigenvalues.len()),
        }
    }

    /// Sum of the variances.
    pub fn trace(&self, n: usize) -> f64 {
        match self {
            Covariance::Isotropic(v) => v * n as f64,
            Covariance::Diagonal(d) => d.iter().sum(),
            Covariance::Full { eigenvalues, .. } => eigenvalues.sum(),
        }
    }

    /// `(Sigma + s2 Id)^{-1} r`
    fn solve_shifted(&self, r: &[f64], s2: f64) -> Vec<f64> {
        match self {
            Covariance::Isotropic(v) => r.iter().map(|x| x / (v + s2)).collect(),
            Covariance::Diagonal(d) => r.iter().zip(d).map(|(x, v)| x / (v + s2)).collect(),
            Covariance::Full {
                eigenvalues,
                eigenvectors,
            } => {
                let rv = DVector::from_column_slice(r);
                let mut coeffs = eigenvectors.tr_mul(&rv);
                for (c, l) in coeffs.iter_mut().zip(eigenvalues.iter()) {
                    *c /= l + s2;
                }
                (eigenvectors * coeffs).as_slice().to_vec()
            }
        }
    }

    /// Draw `L z` with `L L^T = Sigma` for a standard normal `z`.
    fn color(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Covariance::Isotropic(v) => z.iter().map(|x| x * v.sqrt()).collect(),
            Covariance::Diagonal(d) => z.iter().zip(d).map(|(x, v)| x * v.sqrt()).collect(),
            Covariance::Full {
                eigenvalues,
                eigenvectors,
            } => {
                let scaled = DVector::from_iterator(
                    z.len(),
                    z.iter().zip(eigenvalues.iter()).map(|(x, l)| x * l.sqrt()),
                );
                (eigenvectors * scaled).as_slice().to_vec()
            }
        }
    }
}

/// Exact score of `N(mu, Sigma)` convolved with `N(0, sigma^2 Id)`:
/// `-(Sigma + sigma^2 Id)^{-1} (x - mu)`.
#[derive(Debug, Clone)]
pub struct GaussianScore {
    mean: Image,
    cov: Covariance,
}

impl GaussianScore {
    pub fn new(mean: Image, cov: Covariance) -> Result<Self> {
        if let Some(n) = cov.len() {
            if n != mean.len() {
                return Err(Error::dim(format!(
                    "covariance of size {n} for {} pixels",
                    mean.len()
                )));
            }
        }
        match &cov {
            Covariance::Isotropic(v) if !(*v > 0.0) => {
                return Err(Error::param("variance must be positive"))
            }
            Covariance::Diagonal(d) if d.iter().any(|v| !(*v > 0.0)) => {
                return Err(Error::param("variances must be positive"))
            }
            _ => {}
        }
        Ok(Self { mean, cov })
    }

    /// Per-pixel mean and variance of a dataset (variance floored at `min_var`).
    pub fn fit_diagonal(dataset: &[Image], min_var: f64) -> Result<Self> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::param("cannot fit a prior to an empty dataset"))?;
        for img in dataset {
            first.same_dims(img)?;
        }
        let n = dataset.len() as f64;
        let mut mean = Image::zeros(first.rows(), first.cols());
        for img in dataset {
            mean.axpy(1.0 / n, img);
        }
        let mut var = vec![0.0; mean.len()];
        for img in dataset {
            for ((v, &x), &m) in var.iter_mut().zip(img.data()).zip(mean.data()) {
                *v += (x - m).powi(2) / n;
            }
        }
        var.iter_mut().for_each(|v| *v = v.max(min_var));
        Self::new(mean, Covariance::Diagonal(var))
    }

    pub fn mean(&self) -> &Image {
        &self.mean
    }

    pub fn covariance(&self) -> &Covariance {
        &self.cov
    }

    /// One draw from the prior.
    pub fn sample(&self, rng: &mut crate::imgcore::RngState) -> Image {
        let (r, c) = self.mean.dims();
        let z = crate::imgcore::gaussian_field(r, c, rng);
        let mut out = self.mean.clone();
        for (o, d) in out.data_mut().iter_mut().zip(self.cov.color(z.data())) {
            *o += d;
        }
        out
    }
}

impl ScoreModel for GaussianScore {
    fn score(&self, x: &Image, sigma: f64) -> Result<Image> {
        x.same_dims(&self.mean)?;
        let diff: Vec<f64> = x.data().iter().zip(self.mean.data()).map(|(a, m)| a - m).collect();
        let mut s = self.cov.solve_shifted(&diff, sigma * sigma);
        s.iter_mut().for_each(|v| *v = -*v);
        Image::from_vec(x.rows(), x.cols(), s)
    }

    fn dims(&self) -> Option<(usize, usize)> {
        Some(self.mean.dims())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::{gaussian_field, RngState};

    fn random_spd(n: usize, rng: &mut RngState) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
    }

    fn log_density(mean: &Image, cov: &DMatrix<f64>, x: &Image, sigma: f64) -> f64 {
        let n = mean.len();
        let k = cov + DMatrix::identity(n, n) * sigma * sigma;
        let chol = k.cholesky().unwrap();
        let d = DVector::from_iterator(n, x.data().iter().zip(mean.data()).map(|(a, m)| a - m));
        let sol = chol.solve(&d);
        -0.5 * d.dot(&sol) - chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    #[test]
    fn zero_at_the_mean() {
        let mean = gaussian_field(3, 3, &mut RngState::new(1));
        let g = GaussianScore::new(mean.clone(), Covariance::Isotropic(0.3)).unwrap();
        assert!(g.score(&mean, 0.7).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_covariance_closed_form() {
        let mut rng = RngState::new(2);
        let mean = gaussian_field(4, 4, &mut rng);
        let x = gaussian_field(4, 4, &mut rng);
        let g = GaussianScore::new(mean.clone(), Covariance::Isotropic(1.0)).unwrap();
        let s = g.score(&x, 1.0).unwrap();
        let expected = (&x - &mean).map(|v| -v / 2.0);
        assert!((&s - &expected).norm() < 1e-14);
    }

    #[test]
    fn affine_in_x() {
        let mut rng = RngState::new(3);
        let cov = Covariance::full(random_spd(9, &mut rng)).unwrap();
        let g = GaussianScore::new(gaussian_field(3, 3, &mut rng), cov).unwrap();
        let a = gaussian_field(3, 3, &mut rng);
        let b = gaussian_field(3, 3, &mut rng);
        let mid = a.zip_map(&b, |p, q| 0.3 * p + 0.7 * q);
        let (sa, sb, sm) = (g.score(&a, 0.4).unwrap(), g.score(&b, 0.4).unwrap(), g.score(&mid, 0.4).unwrap());
        let interp = sa.zip_map(&sb, |p, q| 0.3 * p + 0.7 * q);
        assert!((&sm - &interp).norm() <= 1e-10 * sm.norm().max(1.0));
    }

    #[test]
    fn matches_numerical_gradient_of_log_density() {
        let mut rng = RngState::new(4);
        let covm = random_spd(9, &mut rng);
        let mean = gaussian_field(3, 3, &mut rng);
        let g = GaussianScore::new(mean.clone(), Covariance::full(covm.clone()).unwrap()).unwrap();
        let x = gaussian_field(3, 3, &mut rng);
        let sigma = 0.6;
        let s = g.score(&x, sigma).unwrap();
        let h = 1e-4;
        for i in 0..9 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (log_density(&mean, &covm, &xp, sigma) - log_density(&mean, &covm, &xm, sigma)) / (2.0 * h);
            assert!((fd - s.data()[i]).abs() <= 1e-5 * s.data()[i].abs().max(1e-3), "pixel {i}");
        }
    }

    #[test]
    fn rejects_indefinite_or_mis_sized() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Covariance::full(bad).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(Covariance::full(asym).is_err());
        assert!(GaussianScore::new(Image::zeros(2, 2), Covariance::Diagonal(vec![1.0; 3])).is_err());
    }

    #[test]
    fn prior_draws_have_the_right_spread() {
        let g = GaussianScore::new(Image::filled(4, 4, 0.5), Covariance::Diagonal((1..=16).map(|i| i as f64 * 0.01).collect())).unwrap();
        let mut rng = RngState::new(5);
        let draws: Vec<Image> = (0..4000).map(|_| g.sample(&mut rng)).collect();
        let fit = GaussianScore::fit_diagonal(&draws, 1e-12).unwrap();
        if let Covariance::Diagonal(v) = fit.covariance() {
            for (i, v) in v.iter().enumerate() {
                let truth = (i + 1) as f64 * 0.01;
                assert!((v - truth).abs() < 0.1 * truth, "{i}: {v}");
            }
        }
        assert!((fit.mean().mean() - 0.5).abs() < 0.01);
    }
}
