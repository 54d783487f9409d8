use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Projection angles in radians, strictly increasing within `[0, pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSet {
    angles: Vec<f64>,
}

impl AngleSet {
    pub fn new(angles: Vec<f64>) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::param("angle set is empty"));
        }
        if angles.iter().any(|a| !(0.0..PI).contains(a)) {
            return Err(Error::param("angles must lie in [0, pi)"));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("angles must be strictly increasing"));
        }
        Ok(Self { angles })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// One angle per line, shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        self.angles.iter().map(|a| format!("{a}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let angles = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|e| Error::param(format!("bad angle {l:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(angles)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// `theta_k = k * pi / n_theta`, `k = 0..n_theta`.
pub fn sparse_view_angles(n_theta: usize) -> Result<AngleSet> {
    if n_theta == 0 {
        return Err(Error::param("n_theta must be positive"));
    }
    AngleSet::new(
        (0..n_theta)
            .map(|k| k as f64 * PI / n_theta as f64)
            .collect(),
    )
}
