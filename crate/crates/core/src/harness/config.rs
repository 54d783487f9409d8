use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, SigmaSchedule};
use crate::error::{Error, Result};
use crate::imgcore::RngState;
use crate::operators::{
    mask_gaussian1d, mask_gaussian2d, mask_poisson_disk, mask_radial, sparse_view_angles, KMask, MeasurementOp,
};
use crate::samplers::{AldParams, PcParams};
use crate::variational::TvParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Mri,
    Ct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pc,
    Ald,
    Tv,
    ZeroFilled,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Pc => "pc",
            Method::Ald => "ald",
            Method::Tv => "tv",
            Method::ZeroFilled => "zero-filled",
        }
    }

    pub fn needs_model(&self) -> bool {
        matches!(self, Method::Pc | Method::Ald)
    }
}

/// Undersampling pattern. MRI kinds produce a k-space mask, `sparse-view`
/// an angle set for CT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskSpec {
    Full,
    Gaussian1d {
        accel: f64,
        #[serde(default = "default_center_frac")]
        center_frac: f64,
    },
    Gaussian2d {
        accel: f64,
    },
    Poisson {
        accel: f64,
    },
    Radial {
        spokes: usize,
    },
    SparseView {
        angles: usize,
    },
}

fn default_center_frac() -> f64 {
    0.08
}

impl MaskSpec {
    /// Short label used in report tables, e.g. `G1Dx4`.
    pub fn label(&self) -> String {
        match self {
            MaskSpec::Full => "full".into(),
            MaskSpec::Gaussian1d { accel, .. } => format!("G1Dx{accel}"),
            MaskSpec::Gaussian2d { accel } => format!("G2Dx{accel}"),
            MaskSpec::Poisson { accel } => format!("Poissonx{accel}"),
            MaskSpec::Radial { spokes } => format!("Radial{spokes}"),
            MaskSpec::SparseView { angles } => format!("Ntheta{angles}"),
        }
    }

    pub fn build_mask(&self, rows: usize, cols: usize, rng: &mut RngState) -> Result<KMask> {
        match *self {
            MaskSpec::Full => Ok(KMask::full(rows, cols)),
            MaskSpec::Gaussian1d { accel, center_frac } => mask_gaussian1d(rows, cols, accel, center_frac, rng),
            MaskSpec::Gaussian2d { accel } => mask_gaussian2d(rows, cols, accel, rng),
            MaskSpec::Poisson { accel } => Ok(mask_poisson_disk(rows, cols, accel, rng)?.mask),
            MaskSpec::Radial { spokes } => mask_radial(rows, cols, spokes),
            MaskSpec::SparseView { .. } => Err(Error::Config("sparse-view is a CT pattern".into())),
        }
    }

    /// Measurement operator for an image of the given size (square for CT).
    pub fn build_operator(&self, modality: Modality, rows: usize, cols: usize, rng: &mut RngState) -> Result<MeasurementOp> {
        match (modality, self) {
            (Modality::Ct, MaskSpec::SparseView { angles }) => {
                Ok(MeasurementOp::ct(sparse_view_angles(*angles)?, rows.max(cols)))
            }
            (Modality::Ct, _) => Err(Error::Config("CT experiments need a sparse-view mask".into())),
            (Modality::Mri, _) => Ok(MeasurementOp::mri(self.build_mask(rows, cols, rng)?)),
        }
    }
}

/// Where the score comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ModelSource {
    /// A trained network; the EMA weights unless `ema = false`.
    Checkpoint {
        path: PathBuf,
        #[serde(default = "yes")]
        ema: bool,
    },
    /// Analytic Gaussian prior: fitted per pixel to `fit_dataset` when given,
    /// otherwise isotropic with the stated mean and variance.
    GaussianOracle {
        #[serde(default)]
        fit_dataset: Option<PathBuf>,
        #[serde(default = "half")]
        mean: f64,
        #[serde(default = "tenth")]
        variance: f64,
    },
}

fn yes() -> bool {
    true
}

fn half() -> f64 {
    0.5
}

fn tenth() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    /// Number of noise levels; defaults to 250 for PC and 500 for ALD.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "sigma_min")]
    pub sigma_min: f64,
    #[serde(default = "sigma_max")]
    pub sigma_max: f64,
}

fn sigma_min() -> f64 {
    0.01
}

fn sigma_max() -> f64 {
    378.0
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            n: None,
            sigma_min: sigma_min(),
            sigma_max: sigma_max(),
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self, method: Method) -> Result<SigmaSchedule> {
        let n = self.n.unwrap_or(if method == Method::Ald { 500 } else { 250 });
        make_schedule(n, self.sigma_min, self.sigma_max)
    }
}

/// Sampler knobs shared by both posterior samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "snr")]
    pub snr: f64,
    #[serde(default = "n_start")]
    pub n_start: usize,
    #[serde(default = "inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "eps0")]
    pub eps0: f64,
    #[serde(default = "yes")]
    pub final_denoise: bool,
}

fn one() -> f64 {
    1.0
}

fn snr() -> f64 {
    0.16
}

fn n_start() -> usize {
    230
}

fn inner_steps() -> usize {
    3
}

fn eps0() -> f64 {
    2e-5
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            snr: snr(),
            n_start: n_start(),
            inner_steps: inner_steps(),
            eps0: eps0(),
            final_denoise: true,
        }
    }
}

impl SamplerSpec {
    pub fn pc(&self) -> PcParams {
        PcParams {
            lambda: self.lambda,
            snr: self.snr,
        }
    }

    pub fn ald(&self) -> AldParams {
        AldParams {
            n_start: self.n_start,
            inner_steps: self.inner_steps,
            lambda: self.lambda,
            eps0: self.eps0,
            final_denoise: self.final_denoise,
        }
    }
}

/// One reconstruction experiment, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub modality: Modality,
    pub method: Method,
    /// A raw image or a directory of them.
    pub dataset: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Write wall-clock seconds into the metrics CSV (makes it run-dependent).
    #[serde(default)]
    pub record_time: bool,
    /// Use only the first `max_slices` images.
    #[serde(default)]
    pub max_slices: Option<usize>,
    pub mask: MaskSpec,
    #[serde(default)]
    pub model: Option<ModelSource>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub tv: TvParams,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.dataset);
        fix(&mut cfg.output);
        match &mut cfg.model {
            Some(ModelSource::Checkpoint { path, .. }) => fix(path),
            Some(ModelSource::GaussianOracle {
                fit_dataset: Some(p), ..
            }) => fix(p),
            _ => {}
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.needs_model() {
            if self.model.is_none() {
                return Err(Error::Config(format!("method {} needs a [model] section", self.method.name())));
            }
            if !(0.0..=1.0).contains(&self.sampler.lambda) {
                return Err(Error::Config("sampler lambda must lie in [0, 1]".into()));
            }
        }
        if self.method == Method::Tv && !(self.tv.lambda >= 0.0) {
            return Err(Error::Config("TV lambda must be nonnegative".into()));
        }
        match (self.modality, self.mask) {
            (Modality::Ct, MaskSpec::SparseView { .. }) => {}
            (Modality::Ct, _) => return Err(Error::Config("CT experiments need a sparse-view mask".into())),
            (Modality::Mri, MaskSpec::SparseView { .. }) => {
                return Err(Error::Config("sparse-view masks are for CT".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
modality = "mri"
method = "pc"
dataset = "data"
output = "out"
seed = 3

[mask]
kind = "gaussian1d"
accel = 4

[model]
source = "gaussian-oracle"
variance = 0.2

[sampler]
lambda = 0.5
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.mask, MaskSpec::Gaussian1d { accel: 4.0, center_frac: 0.08 });
        assert_eq!(cfg.sampler.lambda, 0.5);
        assert_eq!(cfg.sampler.snr, 0.16);
        assert_eq!(cfg.schedule.build(cfg.method).unwrap().len(), 250);
        assert!(!cfg.record_time);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let no_model = EXAMPLE.replace("[model]\nsource = \"gaussian-oracle\"\nvariance = 0.2\n", "");
        assert!(ExperimentConfig::from_toml(&no_model).is_err());
        let ct = EXAMPLE.replace("modality = \"mri\"", "modality = \"ct\"");
        assert!(ExperimentConfig::from_toml(&ct).is_err());
        let typo = format!("{EXAMPLE}\n[tv]\nlambda = 1.0\nbogus = 2\n");
        assert!(ExperimentConfig::from_toml(&typo).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(MaskSpec::Gaussian1d { accel: 4.0, center_frac: 0.08 }.label(), "G1Dx4");
        assert_eq!(MaskSpec::SparseView { angles: 23 }.label(), "Ntheta23");
    }
}
