//! k-space undersampling patterns.
//!
//! Masks are stored in native DFT order: index `(0, 0)` is the DC bin and
//! signed frequencies wrap as in [`signed_freq`].

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;

use super::signed_freq;
use crate::error::{Error, Result};
use crate::imgcore::{io, ComplexField, Image, RngState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl KMask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} mask entries for {rows}x{cols}",
                keep.len()
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::param("mask keeps no k-space location"));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.keep.len() as f64
    }

    pub fn acceleration(&self) -> f64 {
        1.0 / self.kept_fraction()
    }

    /// Zero every unsampled location.
    pub fn apply(&self, k: &mut ComplexField) {
        for (z, &keep) in k.data_mut().iter_mut().zip(&self.keep) {
            if !keep {
                *z = Complex64::new(0.0, 0.0);
            }
        }
    }

    /// Whether `keep[k] == keep[-k]` for every frequency.
    pub fn is_conjugate_symmetric(&self) -> bool {
        (0..self.rows).all(|r| {
            (0..self.cols).all(|c| self.is_kept(r, c) == self.is_kept(self.mirror(r, self.rows), self.mirror(c, self.cols)))
        })
    }

    /// Smallest conjugate-symmetric mask containing this one.
    ///
    /// For real images `Re(F^-1 M F)` is an orthogonal projection only when
    /// the mask has this symmetry.
    pub fn symmetrized(&self) -> Self {
        let mut keep = self.keep.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.is_kept(r, c) {
                    keep[self.mirror(r, self.rows) * self.cols + self.mirror(c, self.cols)] = true;
                }
            }
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            keep,
        }
    }

    fn mirror(&self, j: usize, n: usize) -> usize {
        (n - j) % n
    }

    /// 0/1 image in native order.
    pub fn to_image(&self) -> Image {
        Image::from_fn(self.rows, self.cols, |r, c| {
            if self.is_kept(r, c) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// 0/1 image with DC moved to the centre, for previews.
    pub fn to_centered_image(&self) -> Image {
        Image::from_fn(self.rows, self.cols, |r, c| {
            let rr = (r + self.rows - self.rows / 2) % self.rows;
            let cc = (c + self.cols - self.cols / 2) % self.cols;
            if self.is_kept(rr, cc) {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn from_image(img: &Image) -> Result<Self> {
        Self::new(img.rows(), img.cols(), img.data().iter().map(|&v| v > 0.5).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write(path, &self.to_image())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_image(&io::read(path)?)
    }
}

/// Native DFT index of signed frequency `f` on an axis of length `n`.
fn native(f: isize, n: usize) -> usize {
    f.rem_euclid(n as isize) as usize
}

/// Indices of the `count` largest Efraimidis-Spirakis keys `ln(u) / w`,
/// i.e. weighted sampling without replacement.
fn weighted_pick(weights: &[f64], count: usize, rng: &mut RngState) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u = rng.uniform().max(f64::MIN_POSITIVE);
            let key = if w > 0.0 { u.ln() / w } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(count).map(|(_, i)| i).collect()
}

fn check_accel(accel: f64) -> Result<()> {
    if !(accel >= 1.0) || !accel.is_finite() {
        return Err(Error::param(format!("acceleration {accel} must be >= 1")));
    }
    Ok(())
}

/// Column (phase-encoding) mask with a fully sampled centre block.
///
/// `floor(cols * center_frac)` central columns are always kept; the rest are
/// drawn without replacement with probability proportional to a Gaussian
/// profile of width `cols / 6` around DC until `round(cols / accel)` columns
/// are kept in total.
pub fn mask_gaussian1d(
    rows: usize,
    cols: usize,
    accel: f64,
    center_frac: f64,
    rng: &mut RngState,
) -> Result<KMask> {
    check_accel(accel)?;
    if !(0.0..1.0).contains(&center_frac) {
        return Err(Error::param(format!("center_frac {center_frac} not in [0, 1)")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::dim("empty mask"));
    }
    let n_center = (cols as f64 * center_frac).floor() as usize;
    let total = ((cols as f64 / accel).round() as usize).clamp(n_center.max(1), cols);

    let mut col_keep = vec![false; cols];
    let first = -((n_center / 2) as isize);
    for f in first..first + n_center as isize {
        col_keep[native(f, cols)] = true;
    }

    let width = cols as f64 / 6.0;
    let candidates: Vec<usize> = (0..cols).filter(|&c| !col_keep[c]).collect();
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&c| {
            let f = signed_freq(c, cols) as f64;
            (-f * f / (2.0 * width * width)).exp()
        })
        .collect();
    for i in weighted_pick(&weights, total - n_center, rng) {
        col_keep[candidates[i]] = true;
    }

    let keep = (0..rows).flat_map(|_| col_keep.iter().copied()).collect();
    KMask::new(rows, cols, keep)
}

/// Variable-density 2-D mask: `round(rows * cols / accel)` locations drawn
/// without replacement with a separable Gaussian density (width side / 6).
pub fn mask_gaussian2d(rows: usize, cols: usize, accel: f64, rng: &mut RngState) -> Result<KMask> {
    check_accel(accel)?;
    if rows == 0 || cols == 0 {
        return Err(Error::dim("empty mask"));
    }
    let n = rows * cols;
    let total = ((n as f64 / accel).round() as usize).clamp(1, n);
    let (wr, wc) = (rows as f64 / 6.0, cols as f64 / 6.0);
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let fr = signed_freq(i / cols, rows) as f64;
            let fc = signed_freq(i % cols, cols) as f64;
            (-(fr * fr) / (2.0 * wr * wr) - (fc * fc) / (2.0 * wc * wc)).exp()
        })
        .collect();
    let mut keep = vec![false; n];
    for i in weighted_pick(&weights, total, rng) {
        keep[i] = true;
    }
    KMask::new(rows, cols, keep)
}

/// Straight equiangular spokes through the k-space centre.
pub fn mask_radial(rows: usize, cols: usize, spokes: usize) -> Result<KMask> {
    if spokes == 0 {
        return Err(Error::param("need at least one spoke"));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::dim("empty mask"));
    }
    let mut keep = vec![false; rows * cols];
    let reach = ((rows * rows + cols * cols) as f64).sqrt() / 2.0 + 1.0;
    let steps = (2.0 * reach / 0.5).ceil() as usize;
    let (hr, hc) = ((rows / 2) as isize, (cols / 2) as isize);
    for s in 0..spokes {
        let theta = s as f64 * PI / spokes as f64;
        let (sin, cos) = theta.sin_cos();
        for i in 0..=steps {
            let t = -reach + 0.5 * i as f64;
            let fr = (t * sin).round() as isize;
            let fc = (t * cos).round() as isize;
            // frequencies representable on this grid
            if fr < -hr || fr >= rows as isize - hr || fc < -hc || fc >= cols as isize - hc {
                continue;
            }
            keep[native(fr, rows) * cols + native(fc, cols)] = true;
        }
    }
    KMask::new(rows, cols, keep)
}

/// Smallest spoke count whose radial mask keeps at least `1 / accel` of k-space.
pub fn radial_spokes_for_accel(rows: usize, cols: usize, accel: f64) -> Result<usize> {
    check_accel(accel)?;
    let target = 1.0 / accel;
    let max = 4 * rows.max(cols);
    for spokes in 1..=max {
        if mask_radial(rows, cols, spokes)?.kept_fraction() >= target {
            return Ok(spokes);
        }
    }
    Ok(max)
}

/// A Poisson-disk mask together with the spacing it honours.
#[derive(Debug, Clone)]
pub struct PoissonDisk {
    pub mask: KMask,
    /// Minimum distance (in k-space grid units) between kept points that lie
    /// outside the forced centre disk.
    pub radius: f64,
    pub center_radius: f64,
}

impl PoissonDisk {
    fn centered(i: usize, rows: usize, cols: usize) -> (f64, f64) {
        (
            signed_freq(i / cols, rows) as f64,
            signed_freq(i % cols, cols) as f64,
        )
    }

    pub fn in_center(&self, r: usize, c: usize) -> bool {
        let (rows, cols) = self.mask.dims();
        let (fr, fc) = Self::centered(r * cols + c, rows, cols);
        fr.hypot(fc) <= self.center_radius
    }
}

/// Random-sequential-adsorption Poisson-disk pattern with a fixed radius.
///
/// Every location inside `center_radius` of DC is kept. The remaining
/// locations are visited in a random order and accepted when no previously
/// kept point lies closer than `radius`.
pub fn poisson_disk_with_radius(
    rows: usize,
    cols: usize,
    radius: f64,
    center_radius: f64,
    rng: &mut RngState,
) -> Result<PoissonDisk> {
    if !(radius > 0.0) {
        return Err(Error::param("poisson radius must be positive"));
    }
    let n = rows * cols;
    let cell = radius;
    let key = |fr: f64, fc: f64| ((fr / cell).floor() as i64, (fc / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<(f64, f64)>> = HashMap::new();
    let mut keep = vec![false; n];

    let mut order = Vec::with_capacity(n);
    for i in 0..n {
        let (fr, fc) = PoissonDisk::centered(i, rows, cols);
        if fr.hypot(fc) <= center_radius {
            keep[i] = true;
            grid.entry(key(fr, fc)).or_default().push((fr, fc));
        } else {
            order.push(i);
        }
    }
    order.shuffle(rng.raw());

    let r2 = radius * radius;
    for i in order {
        let (fr, fc) = PoissonDisk::centered(i, rows, cols);
        let (kr, kc) = key(fr, fc);
        let blocked = (kr - 1..=kr + 1).any(|a| {
            (kc - 1..=kc + 1).any(|b| {
                grid.get(&(a, b)).is_some_and(|pts| {
                    pts.iter()
                        .any(|&(pr, pc)| (pr - fr).powi(2) + (pc - fc).powi(2) < r2)
                })
            })
        });
        if !blocked {
            keep[i] = true;
            grid.entry((kr, kc)).or_default().push((fr, fc));
        }
    }
    Ok(PoissonDisk {
        mask: KMask::new(rows, cols, keep)?,
        radius,
        center_radius,
    })
}

/// Poisson-disk mask whose radius is tuned by bisection so that the kept
/// fraction is as close as possible to `1 / accel`. The centre disk has a
/// radius of 2% of the shorter side.
pub fn mask_poisson_disk(rows: usize, cols: usize, accel: f64, rng: &mut RngState) -> Result<PoissonDisk> {
    check_accel(accel)?;
    if rows == 0 || cols == 0 {
        return Err(Error::dim("empty mask"));
    }
    let center_radius = 0.02 * rows.min(cols) as f64;
    let target = (rows * cols) as f64 / accel;
    let base = rng.clone();

    let attempt = |radius: f64| {
        let mut r = base.clone();
        poisson_disk_with_radius(rows, cols, radius, center_radius, &mut r)
    };
    let (mut lo, mut hi) = (0.5_f64, rows.max(cols) as f64);
    let mut best = attempt(lo)?;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let cand = attempt(mid)?;
        let count = cand.mask.kept_count() as f64;
        if (count - target).abs() < (best.mask.kept_count() as f64 - target).abs() {
            best = cand;
        }
        if count > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-3 {
            break;
        }
    }
    // consume from the caller's stream so later draws differ
    rng.uniform();
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian1d_fastmri_counts() {
        let mut rng = RngState::new(1);
        let m = mask_gaussian1d(320, 320, 4.0, 0.04, &mut rng).unwrap();
        let cols: Vec<bool> = (0..320).map(|c| m.is_kept(0, c)).collect();
        assert_eq!(cols.iter().filter(|&&k| k).count(), 80);
        for f in -6isize..6 {
            assert!(cols[native(f, 320)], "central column {f} missing");
        }
        // constant along rows
        for r in 1..320 {
            for c in 0..320 {
                assert_eq!(m.is_kept(r, c), cols[c]);
            }
        }
        assert_eq!(m.kept_count(), 80 * 320);
    }

    #[test]
    fn gaussian1d_accel_one_is_full() {
        let m = mask_gaussian1d(8, 50, 1.0, 0.0, &mut RngState::new(0)).unwrap();
        assert_eq!(m, KMask::full(8, 50));
    }

    #[test]
    fn gaussian1d_rejects_bad_params() {
        let mut rng = RngState::new(0);
        assert!(mask_gaussian1d(4, 4, 0.5, 0.1, &mut rng).is_err());
        assert!(mask_gaussian1d(4, 4, 2.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let a = mask_gaussian1d(16, 64, 4.0, 0.08, &mut RngState::new(3)).unwrap();
        let b = mask_gaussian1d(16, 64, 4.0, 0.08, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        let a = mask_gaussian2d(32, 32, 4.0, &mut RngState::new(3)).unwrap();
        let b = mask_gaussian2d(32, 32, 4.0, &mut RngState::new(3)).unwrap();
        assert_eq!(a, b);
        let a = mask_poisson_disk(48, 48, 8.0, &mut RngState::new(3)).unwrap();
        let b = mask_poisson_disk(48, 48, 8.0, &mut RngState::new(3)).unwrap();
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn gaussian2d_count_on_320() {
        let m = mask_gaussian2d(320, 320, 4.0, &mut RngState::new(8)).unwrap();
        let n = m.kept_count() as f64;
        assert!((0.9 * 25600.0..=1.1 * 25600.0).contains(&n), "{n}");
        // density decays away from DC
        let band = |lo: f64, hi: f64| {
            let (mut kept, mut all) = (0usize, 0usize);
            for r in 0..320 {
                for c in 0..320 {
                    let rad = (signed_freq(r, 320) as f64).hypot(signed_freq(c, 320) as f64);
                    if rad >= lo && rad < hi {
                        all += 1;
                        kept += m.is_kept(r, c) as usize;
                    }
                }
            }
            kept as f64 / all as f64
        };
        let (inner, outer) = (band(0.0, 20.0), band(120.0, 160.0));
        assert!(inner > 0.8 && outer < 0.1, "{inner} {outer}");
    }

    #[test]
    fn radial_saturates() {
        let m = mask_radial(32, 32, 400).unwrap();
        assert!(m.kept_fraction() > 0.99, "{}", m.kept_fraction());
        let few = mask_radial(32, 32, 4).unwrap();
        assert!(few.is_kept(0, 0));
        assert!(few.kept_fraction() < 0.3);
    }

    #[test]
    fn radial_spoke_search_hits_target() {
        let spokes = radial_spokes_for_accel(64, 64, 11.0).unwrap();
        let m = mask_radial(64, 64, spokes).unwrap();
        assert!(m.kept_fraction() >= 1.0 / 11.0);
        let fewer = mask_radial(64, 64, spokes - 1).unwrap();
        assert!(fewer.kept_fraction() < 1.0 / 11.0);
    }

    #[test]
    fn poisson_respects_radius() {
        let pd = mask_poisson_disk(64, 64, 15.0, &mut RngState::new(21)).unwrap();
        let frac = pd.mask.kept_fraction();
        assert!((frac * 15.0 - 1.0).abs() < 0.1, "fraction {frac}");
        let pts: Vec<(f64, f64)> = (0..64 * 64)
            .filter(|&i| pd.mask.keep()[i] && !pd.in_center(i / 64, i % 64))
            .map(|i| PoissonDisk::centered(i, 64, 64))
            .collect();
        for (a, p) in pts.iter().enumerate() {
            for q in &pts[a + 1..] {
                let d = (p.0 - q.0).hypot(p.1 - q.1);
                assert!(d >= pd.radius, "{p:?} {q:?} at {d} < {}", pd.radius);
            }
        }
    }

    #[test]
    fn symmetrize_closes_under_negation() {
        let m = mask_gaussian2d(9, 12, 5.0, &mut RngState::new(2)).unwrap();
        let s = m.symmetrized();
        assert!(s.is_conjugate_symmetric());
        assert!(s.kept_count() >= m.kept_count());
        assert!(m.keep().iter().zip(s.keep()).all(|(&a, &b)| !a || b));
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(KMask::new(2, 2, vec![false; 4]).is_err());
    }
}
