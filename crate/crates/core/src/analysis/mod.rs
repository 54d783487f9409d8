//! Image-quality metrics and dataset gradient statistics.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imgcore::{fd_h, fd_v, Image};

fn dynamic_range(reference: &Image) -> Result<f64> {
    let range = reference.max() - reference.min();
    if !(range > 0.0) {
        return Err(Error::Degenerate("reference image is constant".into()));
    }
    Ok(range)
}

/// Peak signal-to-noise ratio in dB with the reference's dynamic range as
/// peak; `+inf` for a perfect match.
pub fn psnr(x: &Image, reference: &Image) -> Result<f64> {
    x.same_dims(reference)?;
    let peak = dynamic_range(reference)?;
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(data: &[f64], rows: usize, cols: usize, w: &[f64; SSIM_WIN]) -> (Vec<f64>, usize, usize) {
    let oc = cols - SSIM_WIN + 1;
    let or = rows - SSIM_WIN + 1;
    let mut tmp = vec![0.0; rows * oc];
    for r in 0..rows {
        for c in 0..oc {
            tmp[r * oc + c] = (0..SSIM_WIN).map(|k| w[k] * data[r * cols + c + k]).sum();
        }
    }
    let mut out = vec![0.0; or * oc];
    for r in 0..or {
        for c in 0..oc {
            out[r * oc + c] = (0..SSIM_WIN).map(|k| w[k] * tmp[(r + k) * oc + c]).sum();
        }
    }
    (out, or, oc)
}

/// Mean structural similarity over all fully contained 11x11 Gaussian
/// windows (sigma 1.5, K1 = 0.01, K2 = 0.03), with the reference's dynamic range.
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    x.same_dims(reference)?;
    let (rows, cols) = x.dims();
    if rows < SSIM_WIN || cols < SSIM_WIN {
        return Err(Error::dim(format!("SSIM needs at least 11x11 pixels, got {rows}x{cols}")));
    }
    let range = dynamic_range(reference)?;
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let w = gaussian_window();
    let a = x.data();
    let b = reference.data();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
    let (mu_a, ..) = filter_valid(a, rows, cols, &w);
    let (mu_b, ..) = filter_valid(b, rows, cols, &w);
    let (aa, ..) = filter_valid(&prod(&|p, _| p * p), rows, cols, &w);
    let (bb, ..) = filter_valid(&prod(&|_, q| q * q), rows, cols, &w);
    let (ab, ..) = filter_valid(&prod(&|p, q| p * q), rows, cols, &w);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Pixelwise mean of equally sized images.
pub fn mean_image(dataset: &[Image]) -> Result<Image> {
    let first = dataset.first().ok_or_else(|| Error::Degenerate("empty dataset".into()))?;
    let mut acc = Image::zeros(first.rows(), first.cols());
    for img in dataset {
        img.same_dims(first)?;
        acc.axpy(1.0, img);
    }
    acc.scale(1.0 / dataset.len() as f64);
    Ok(acc)
}

/// Fixed-width histogram on `[bin_edges[0], bin_edges[last]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<f64>,
    /// Whether `counts` are densities (`sum counts * width = 1`).
    pub normalized: bool,
}

impl Histogram {
    /// Count `values` into `bins` equal bins; values outside `[lo, hi]` are dropped.
    pub fn from_values(values: impl IntoIterator<Item = f64>, bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(lo < hi) {
            return Err(Error::param(format!("need bins >= 1 and lo < hi, got {bins}, [{lo}, {hi}]")));
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0.0; bins];
        for v in values {
            if !(lo..=hi).contains(&v) {
                continue;
            }
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1.0;
        }
        let bin_edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        Ok(Self {
            bin_edges,
            counts,
            normalized: false,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn width(&self, k: usize) -> f64 {
        self.bin_edges[k + 1] - self.bin_edges[k]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    /// `sum counts * width`.
    pub fn mass(&self) -> f64 {
        (0..self.bins()).map(|k| self.counts[k] * self.width(k)).sum()
    }

    /// Rescale to unit mass; an empty histogram is left as is.
    pub fn normalize(&mut self) {
        let m = self.mass();
        if m > 0.0 {
            self.counts.iter_mut().for_each(|c| *c /= m);
            self.normalized = true;
        }
    }

    /// `-log(density)` per bin, `+inf` for empty bins.
    pub fn neg_log(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| if c > 0.0 { -c.ln() } else { f64::INFINITY })
            .collect()
    }

    /// Two columns, `bin_center,neg_log_density`.
    pub fn write_neg_log_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_center", "neg_log_density"])?;
        for (c, v) in self.centers().iter().zip(self.neg_log()) {
            w.write_record([format!("{c}"), format!("{v}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Default range and resolution of the gradient histograms.
pub const HIST_BINS: usize = 101;
pub const HIST_RANGE: (f64, f64) = (-0.35, 0.35);

/// Unit-mass histograms of the horizontal and vertical forward differences
/// pooled over a dataset; [`Histogram::neg_log`] gives the plotted curve.
///
/// Only true differences enter: the zero padding in the last column (rows)
/// of the forward-difference images is skipped.
pub fn grad_neg_log_hist(dataset: &[Image], bins: usize, lo: f64, hi: f64) -> Result<(Histogram, Histogram)> {
    let mut h_vals = Vec::new();
    let mut v_vals = Vec::new();
    for img in dataset {
        let (rows, cols) = img.dims();
        let gh = fd_h(img);
        let gv = fd_v(img);
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    h_vals.push(gh.get(r, c));
                }
                if r + 1 < rows {
                    v_vals.push(gv.get(r, c));
                }
            }
        }
    }
    let mut h = Histogram::from_values(h_vals, bins, lo, hi)?;
    let mut v = Histogram::from_values(v_vals, bins, lo, hi)?;
    h.normalize();
    v.normalize();
    Ok((h, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::{gaussian_field, RngState};
    use proptest::prelude::*;

    fn textured(rows: usize, cols: usize) -> Image {
        Image::from_fn(rows, cols, |r, c| {
            0.5 + 0.3 * ((r as f64) * 0.7).sin() * ((c as f64) * 0.45).cos() + 0.1 * ((r * c) % 5) as f64
        })
    }

    #[test]
    fn psnr_identity_is_infinite() {
        let x = textured(8, 8);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_closed_form() {
        let reference = Image::from_fn(10, 10, |r, _| if r == 0 { 1.0 } else { 0.0 });
        let x = reference.map(|v| v + 0.1);
        assert!((psnr(&x, &reference).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_rejects_constant_reference() {
        let r = Image::filled(4, 4, 2.0);
        assert!(psnr(&r.map(|v| v + 1.0), &r).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let x = textured(32, 32);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (lo, hi) = (x.min(), x.max());
        let inv = x.map(|v| hi + lo - v);
        assert!(ssim(&inv, &x).unwrap() < 0.5);
    }

    #[test]
    fn ssim_is_symmetric_for_matching_ranges() {
        let mut rng = RngState::new(1);
        let a = gaussian_field(20, 24, &mut rng);
        // an affine-free perturbation that keeps min and max in place
        let mut b = a.clone();
        let (imin, imax) = (
            a.data().iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).unwrap().0,
            a.data().iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0,
        );
        for (k, v) in b.data_mut().iter_mut().enumerate() {
            if k != imin && k != imax {
                *v = (*v * 0.8).clamp(a.min(), a.max());
            }
        }
        assert_eq!(a.max() - a.min(), b.max() - b.min());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn ssim_needs_eleven_pixels() {
        let x = textured(10, 40);
        assert!(matches!(ssim(&x, &x), Err(Error::Dimension(_))));
    }

    #[test]
    fn mean_image_cases() {
        let x = textured(5, 6);
        assert_eq!(mean_image(std::slice::from_ref(&x)).unwrap(), x);
        let neg = x.map(|v| -v);
        assert!(mean_image(&[x, neg]).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(mean_image(&[]).is_err());
        let mut rng = RngState::new(2);
        let noise: Vec<Image> = (0..100).map(|_| gaussian_field(6, 6, &mut rng)).collect();
        assert!(mean_image(&noise).unwrap().data().iter().all(|v| v.abs() < 0.4));
    }

    #[test]
    fn constant_dataset_puts_all_mass_at_zero() {
        let data = vec![Image::filled(6, 6, 0.4); 3];
        let (h, v) = grad_neg_log_hist(&data, HIST_BINS, HIST_RANGE.0, HIST_RANGE.1).unwrap();
        for hist in [h, v] {
            assert!((hist.mass() - 1.0).abs() < 1e-12);
            let nl = hist.neg_log();
            let expected = -(HIST_BINS as f64 / 0.7).ln();
            assert!((nl[HIST_BINS / 2] - expected).abs() < 1e-9);
            assert!(nl.iter().enumerate().all(|(k, v)| k == HIST_BINS / 2 || v.is_infinite()));
        }
    }

    #[test]
    fn mirrored_dataset_gives_symmetric_histogram() {
        let mut rng = RngState::new(3);
        let x = gaussian_field(64, 64, &mut rng).map(|v| 0.05 * v);
        let mirrored = Image::from_fn(64, 64, |r, c| x.get(r, 63 - c));
        let (h, _) = grad_neg_log_hist(&[x, mirrored], 21, -0.35, 0.35).unwrap();
        for k in 0..21 {
            assert!((h.counts[k] - h.counts[20 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_csv_marks_empty_bins() {
        let mut h = Histogram::from_values([0.0, 0.1], 2, -1.0, 1.0).unwrap();
        h.normalize();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.write_neg_log_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, "bin_center,neg_log_density\n-0.5,inf\n0.5,-0\n");
    }

    proptest! {
        #[test]
        fn psnr_shift_invariant(c in -5.0f64..5.0, seed in 0u64..50) {
            let mut rng = RngState::new(seed);
            let r = gaussian_field(6, 6, &mut rng);
            let x = gaussian_field(6, 6, &mut rng);
            let a = psnr(&x, &r).unwrap();
            let b = psnr(&x.map(|v| v + c), &r.map(|v| v + c)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn psnr_decreases_with_error(scale in 0.01f64..1.0, seed in 0u64..50) {
            let mut rng = RngState::new(seed);
            let r = gaussian_field(6, 6, &mut rng);
            let e = gaussian_field(6, 6, &mut rng);
            let near = r.zip_map(&e, |a, b| a + scale * b);
            let far = r.zip_map(&e, |a, b| a + 2.0 * scale * b);
            prop_assert!(psnr(&near, &r).unwrap() > psnr(&far, &r).unwrap());
        }

        #[test]
        fn normalized_histograms_have_unit_mass(seed in 0u64..50, bins in 1usize..60) {
            let mut rng = RngState::new(seed);
            let x = gaussian_field(12, 12, &mut rng).map(|v| 0.1 * v);
            let (h, v) = grad_neg_log_hist(&[x], bins, -0.35, 0.35).unwrap();
            prop_assert!((h.mass() - 1.0).abs() < 1e-9 && (v.mass() - 1.0).abs() < 1e-9);
        }
    }
}
