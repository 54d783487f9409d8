use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{gaussian_field, io, Image, RngState};
use crate::operators::{dft2_real, idft2, signed_freq};

/// Synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    PiecewiseBlobs,
    GaussianDraws,
}

impl PhantomKind {
    pub fn name(&self) -> &'static str {
        match self {
            PhantomKind::SheppLogan => "shepp-logan",
            PhantomKind::PiecewiseBlobs => "piecewise-blobs",
            PhantomKind::GaussianDraws => "gaussian-draws",
        }
    }
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan" => Ok(PhantomKind::SheppLogan),
            "piecewise-blobs" => Ok(PhantomKind::PiecewiseBlobs),
            "gaussian-draws" => Ok(PhantomKind::GaussianDraws),
            other => Err(Error::param(format!("unknown phantom kind {other:?}"))),
        }
    }
}

/// Ellipse `(intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees)`
/// on the `[-1, 1]^2` square, `y` pointing up.
type Ellipse = (f64, f64, f64, f64, f64, f64);

/// The modified (higher-contrast) Shepp-Logan head.
const SHEPP_LOGAN: [Ellipse; 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

fn draw_ellipses(size: usize, ellipses: &[Ellipse]) -> Image {
    let half = size as f64 / 2.0;
    let mut img = Image::from_fn(size, size, |r, c| {
        let x = (c as f64 + 0.5 - half) / half;
        let y = (half - r as f64 - 0.5) / half;
        ellipses
            .iter()
            .filter(|&&(_, a, b, x0, y0, deg)| {
                let (s, co) = deg.to_radians().sin_cos();
                let (dx, dy) = (x - x0, y - y0);
                let u = dx * co + dy * s;
                let v = -dx * s + dy * co;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            })
            .map(|e| e.0)
            .sum()
    });
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Shepp-Logan head; copies after the first get jittered centres and intensities.
fn shepp_logan(size: usize, jitter: Option<&mut RngState>) -> Image {
    let mut ellipses = SHEPP_LOGAN;
    if let Some(rng) = jitter {
        for e in ellipses.iter_mut().skip(2) {
            e.0 *= 1.0 + 0.3 * (rng.uniform() - 0.5);
            e.3 += 0.03 * (rng.uniform() - 0.5);
            e.4 += 0.03 * (rng.uniform() - 0.5);
        }
    }
    draw_ellipses(size, &ellipses)
}

/// A handful of random flat ellipses on a dark background.
fn piecewise_blobs(size: usize, rng: &mut RngState) -> Image {
    let count = 3 + rng.below(4);
    let mut ellipses = vec![(0.3 + 0.2 * rng.uniform(), 0.8, 0.8, 0.0, 0.0, 0.0)];
    for _ in 0..count {
        ellipses.push((
            0.5 * (rng.uniform() - 0.3),
            0.1 + 0.3 * rng.uniform(),
            0.1 + 0.3 * rng.uniform(),
            0.8 * (rng.uniform() - 0.5),
            0.8 * (rng.uniform() - 0.5),
            180.0 * rng.uniform(),
        ));
    }
    draw_ellipses(size, &ellipses)
}

/// Smooth stationary Gaussian field: white noise shaped by a Gaussian
/// low-pass (correlation length `size / 16`), mean 0.5, pixel std 0.12.
fn gaussian_draw(size: usize, rng: &mut RngState) -> Image {
    let noise = gaussian_field(size, size, rng);
    let mut k = dft2_real(&noise);
    let ell = size as f64 / 16.0;
    let mut power = 0.0;
    for r in 0..size {
        for c in 0..size {
            let fr = signed_freq(r, size) as f64 / size as f64;
            let fc = signed_freq(c, size) as f64 / size as f64;
            let h = (-2.0 * (std::f64::consts::PI * ell).powi(2) * (fr * fr + fc * fc)).exp();
            k.data_mut()[r * size + c] *= h;
            power += h * h;
        }
    }
    let scale = 0.12 / (power / (size * size) as f64).sqrt();
    idft2(&k).re().map(|v| 0.5 + scale * v)
}

/// Deterministic synthetic dataset of `count` square images of side `size`.
pub fn make_phantoms(kind: PhantomKind, size: usize, count: usize, rng: &mut RngState) -> Result<Vec<Image>> {
    if size == 0 {
        return Err(Error::dim("phantom size must be positive"));
    }
    Ok((0..count)
        .map(|k| {
            let mut stream = rng.derive(k as u64);
            match kind {
                PhantomKind::SheppLogan => shepp_logan(size, (k > 0).then_some(&mut stream)),
                PhantomKind::PiecewiseBlobs => piecewise_blobs(size, &mut stream),
                PhantomKind::GaussianDraws => gaussian_draw(size, &mut stream),
            }
        })
        .collect())
}

/// Write `images` as `{prefix}_{k:04}.srimg` into `dir` (created if needed).
pub fn write_dataset(dir: &Path, prefix: &str, images: &[Image]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let path = dir.join(format!("{prefix}_{k:04}.srimg"));
            io::write(&path, img)?;
            Ok(path)
        })
        .collect()
}

/// Load a single raw image or every `*.srimg` file of a directory in name
/// order. Unreadable files are skipped with a warning.
pub fn load_dataset(path: &Path) -> Result<Vec<(String, Image)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "srimg"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        match io::read(&f) {
            Ok(img) => {
                let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                out.push((id, img));
            }
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    Ok(out)
}
