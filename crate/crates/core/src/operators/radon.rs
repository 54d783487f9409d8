//! Parallel-beam Radon transform with bilinear pixel interpolation.
//!
//! Geometry for an `N x N` image: pixel `(r, c)` sits at world position
//! `(c - m, r - m)` with `m = (N - 1) / 2`. Detector `d` of `D` measures the
//! line at signed offset `d - (D - 1) / 2` along the normal `(cos t, sin t)`;
//! the line is sampled every half pixel out to the image circumradius.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;

use super::AngleSet;
use crate::error::{Error, Result};
use crate::imgcore::Image;
use crate::par;

const STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    detectors: usize,
    samples: usize,
    center: f64,
}

impl Geometry {
    fn new(side: usize, detectors: usize) -> Self {
        let half = (side as f64 * SQRT_2 / 2.0 / STEP).ceil() as usize + 1;
        Self {
            detectors,
            samples: 2 * half + 1,
            center: (side as f64 - 1.0) / 2.0,
        }
    }

    #[inline]
    fn offset(&self, d: usize) -> f64 {
        d as f64 - (self.detectors as f64 - 1.0) / 2.0
    }

    #[inline]
    fn along(&self, j: usize) -> f64 {
        (j as f64 - (self.samples as f64 - 1.0) / 2.0) * STEP
    }

    /// Pixel-grid coordinates (col, row) of sample `j` on detector `d`.
    #[inline]
    fn sample_point(&self, cos: f64, sin: f64, d: usize, j: usize) -> (f64, f64) {
        let t = self.offset(d);
        let s = self.along(j);
        (t * cos - s * sin + self.center, t * sin + s * cos + self.center)
    }
}

#[inline]
fn tent(u: f64) -> f64 {
    (1.0 - u.abs()).max(0.0)
}

fn check_square(x: &Image) -> Result<usize> {
    if x.rows() != x.cols() {
        return Err(Error::dim(format!(
            "radon needs a square image, got {}x{}",
            x.rows(),
            x.cols()
        )));
    }
    Ok(x.rows())
}

/// Sinogram with one row per angle and `detectors` columns.
pub fn radon(x: &Image, angles: &AngleSet, detectors: usize) -> Result<Image> {
    let side = check_square(x)?;
    if detectors == 0 {
        return Err(Error::dim("no detectors"));
    }
    let g = Geometry::new(side, detectors);
    let n = side as isize;
    let rows = par::map_range(angles.len(), |a| {
        let (sin, cos) = angles.angles()[a].sin_cos();
        let mut row = vec![0.0; detectors];
        for (d, out) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..g.samples {
                let (px, py) = g.sample_point(cos, sin, d, j);
                let c0 = px.floor() as isize;
                let r0 = py.floor() as isize;
                if c0 < -1 || r0 < -1 || c0 >= n || r0 >= n {
                    continue;
                }
                for r in r0..=r0 + 1 {
                    if r < 0 || r >= n {
                        continue;
                    }
                    let wy = tent(py - r as f64);
                    for c in c0..=c0 + 1 {
                        if c < 0 || c >= n {
                            continue;
                        }
                        acc += wy * tent(px - c as f64) * x.get(r as usize, c as usize);
                    }
                }
            }
            *out = acc * STEP;
        }
        row
    });
    Image::from_vec(angles.len(), detectors, rows.concat())
}

/// Exact transpose of [`radon`].
pub fn backproject(sino: &Image, angles: &AngleSet, side: usize) -> Result<Image> {
    if sino.rows() != angles.len() {
        return Err(Error::dim(format!(
            "sinogram has {} rows for {} angles",
            sino.rows(),
            angles.len()
        )));
    }
    let g = Geometry::new(side, sino.cols());
    let trig: Vec<(f64, f64)> = angles.angles().iter().map(|a| a.sin_cos()).collect();
    let reach_d = SQRT_2;
    let reach_j = SQRT_2 / STEP;
    let half_d = (g.detectors as f64 - 1.0) / 2.0;
    let half_j = (g.samples as f64 - 1.0) / 2.0;

    let mut out = vec![0.0; side * side];
    par::for_each_chunk_mut(&mut out, side, |r, row| {
        for (c, px_out) in row.iter_mut().enumerate() {
            let (x, y) = (c as f64 - g.center, r as f64 - g.center);
            let mut acc = 0.0;
            for (a, &(sin, cos)) in trig.iter().enumerate() {
                let t = x * cos + y * sin;
                let s = -x * sin + y * cos;
                let df = t + half_d;
                let jf = s / STEP + half_j;
                let d_lo = (df - reach_d).ceil().max(0.0) as usize;
                let d_hi = (df + reach_d).floor().min(g.detectors as f64 - 1.0);
                let j_lo = (jf - reach_j).ceil().max(0.0) as usize;
                let j_hi = (jf + reach_j).floor().min(g.samples as f64 - 1.0);
                if d_hi < 0.0 || j_hi < 0.0 {
                    continue;
                }
                let sino_row = sino.row(a);
                for d in d_lo..=d_hi as usize {
                    let mut wsum = 0.0;
                    for j in j_lo..=j_hi as usize {
                        let (px, py) = g.sample_point(cos, sin, d, j);
                        wsum += tent(py - r as f64) * tent(px - c as f64);
                    }
                    acc += wsum * sino_row[d];
                }
            }
            *px_out = acc * STEP;
        }
    });
    Image::from_vec(side, side, out)
}

/// Ram-Lak kernel (unit detector spacing) applied to every sinogram row by
/// zero-padded FFT convolution.
fn ramp_filter(sino: &Image) -> Image {
    let det = sino.cols();
    let size = (2 * det).next_power_of_two();
    let mut kernel = vec![Complex64::new(0.0, 0.0); size];
    for k in -(det as isize - 1)..det as isize {
        let h = if k == 0 {
            0.25
        } else if k % 2 != 0 {
            -1.0 / (PI * PI * (k * k) as f64)
        } else {
            0.0
        };
        kernel[k.rem_euclid(size as isize) as usize] = Complex64::new(h, 0.0);
    }
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    fwd.process(&mut kernel);

    let rows = par::map_range(sino.rows(), |a| {
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        for (b, &v) in buf.iter_mut().zip(sino.row(a)) {
            *b = Complex64::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&kernel) {
            *b *= k;
        }
        inv.process(&mut buf);
        buf[..det].iter().map(|z| z.re / size as f64).collect::<Vec<_>>()
    });
    Image::from_vec(sino.rows(), det, rows.concat()).expect("filtered sinogram dims")
}

/// Filtered backprojection: ramp-filter each view, backproject, and weight
/// by `pi / n_angles`.
pub fn fbp(sino: &Image, angles: &AngleSet, side: usize) -> Result<Image> {
    if angles.len() < 2 {
        return Err(Error::Degenerate(format!(
            "filtered backprojection needs at least 2 angles, got {}",
            angles.len()
        )));
    }
    let mut out = backproject(&ramp_filter(sino), angles, side)?;
    out.scale(PI / angles.len() as f64);
    Ok(out)
}
