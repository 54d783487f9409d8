//! Posterior sampling with a score prior: annealed Langevin dynamics and the
//! predictor-corrector reverse-SDE sampler, both interleaved with a
//! data-consistency step.

use serde::{Deserialize, Serialize};

use crate::analysis::psnr;
use crate::diffusion::SigmaSchedule;
use crate::error::{Error, Result};
use crate::imgcore::{gaussian_field, Image, RngState};
use crate::operators::{Measurement, MeasurementOp};
use crate::par;
use crate::scoremodel::{check_model_dims, ScoreModel};

/// `Re(x + lambda A*(y - A x))`, with filtered backprojection as `A*` for CT.
pub fn data_consistency(x: &Image, y: &Measurement, op: &MeasurementOp, lambda: f64) -> Result<Image> {
    check_lambda(lambda)?;
    if x.dims() != op.image_dims() {
        return Err(Error::dim(format!(
            "image {:?} does not match operator {:?}",
            x.dims(),
            op.image_dims()
        )));
    }
    if lambda == 0.0 {
        return Ok(x.clone());
    }
    let resid = y.sub(&op.forward(x)?)?;
    let mut out = x.clone();
    out.axpy(lambda, &op.back(&resid)?);
    Ok(out)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Settings for annealed Langevin dynamics. The noise ladder (length `N`)
/// is passed separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AldParams {
    /// Number of noise levels actually visited, counting down from here.
    pub n_start: usize,
    /// Langevin iterations per noise level.
    pub inner_steps: usize,
    pub lambda: f64,
    /// Step size at the smallest noise level; level `i` uses `eps0 sigma_{i+1}^2 / sigma_1^2`.
    pub eps0: f64,
    /// Finish with one denoising step `x + sigma_1^2 * (posterior score)`.
    pub final_denoise: bool,
}

impl Default for AldParams {
    fn default() -> Self {
        Self {
            n_start: 230,
            inner_steps: 3,
            lambda: 1.0,
            eps0: 2e-5,
            final_denoise: true,
        }
    }
}

impl AldParams {
    fn validate(&self, schedule: &SigmaSchedule) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.n_start == 0 || self.n_start > schedule.len() {
            return Err(Error::param(format!(
                "n_start must lie in 1..={}, got {}",
                schedule.len(),
                self.n_start
            )));
        }
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::param("eps0 must be positive"));
        }
        Ok(())
    }

    /// Step size used at loop index `i` (noise level `sigma_{i+1}`).
    pub fn step_size(&self, schedule: &SigmaSchedule, i: usize) -> f64 {
        let ratio = schedule.sigma(i + 1) / schedule.sigma_min();
        self.eps0 * ratio * ratio
    }
}

/// Settings for the predictor-corrector sampler; `N` is the schedule length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcParams {
    pub lambda: f64,
    /// Signal-to-noise ratio of the Langevin corrector.
    pub snr: f64,
}

impl Default for PcParams {
    fn default() -> Self {
        Self { lambda: 1.0, snr: 0.16 }
    }
}

impl PcParams {
    fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return Err(Error::param("corrector snr must be positive"));
        }
        Ok(())
    }
}

/// Periodic progress report: `callback(level, psnr)` every `every` noise levels,
/// with the PSNR against `reference` when one is given.
pub struct Progress<'a> {
    pub every: usize,
    pub reference: Option<&'a Image>,
    pub callback: Box<dyn FnMut(usize, Option<f64>) + 'a>,
}

impl Progress<'_> {
    fn report(&mut self, level: usize, x: &Image) {
        if self.every > 0 && level % self.every == 0 {
            let q = self.reference.and_then(|r| psnr(x, r).ok());
            (self.callback)(level, q);
        }
    }
}

struct Cond<'a> {
    y: &'a Measurement,
    op: &'a MeasurementOp,
    lambda: f64,
}

impl Cond<'_> {
    fn apply(&self, x: &Image) -> Result<Image> {
        data_consistency(x, self.y, self.op, self.lambda)
    }
}

fn diverged(x: &Image, level: usize, step: usize) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { level, step })
    }
}

/// Annealed Langevin dynamics:
/// `x <- x + eps_i (s(x, sigma_{i+1}) - lambda Re A*(Ax - y) / gamma_i^2) + sqrt(2 eps_i) z`
/// for `i = n_start - 1, ..., 0`, `inner_steps` times each, with `gamma_i = sigma_{i+1}`.
pub fn ald_sample(
    model: &dyn ScoreModel,
    y: &Measurement,
    op: &MeasurementOp,
    p: &AldParams,
    schedule: &SigmaSchedule,
    rng: &mut RngState,
) -> Result<Image> {
    ald_sample_with(model, y, op, p, schedule, rng, None)
}

pub fn ald_sample_with(
    model: &dyn ScoreModel,
    y: &Measurement,
    op: &MeasurementOp,
    p: &AldParams,
    schedule: &SigmaSchedule,
    rng: &mut RngState,
    mut progress: Option<&mut Progress<'_>>,
) -> Result<Image> {
    p.validate(schedule)?;
    let (rows, cols) = op.image_dims();
    check_model_dims(model, (rows, cols))?;
    let mut x = gaussian_field(rows, cols, rng);
    if p.inner_steps == 0 {
        return Ok(x);
    }
    let likelihood = |x: &Image| -> Result<Image> {
        if p.lambda == 0.0 {
            return Ok(Image::zeros(rows, cols));
        }
        let resid = op.forward(x)?.sub(y)?;
        let mut g = op.back(&resid)?;
        g.scale(p.lambda);
        Ok(g)
    };
    for i in (0..p.n_start).rev() {
        let sigma = schedule.sigma(i + 1);
        let gamma2 = sigma * sigma;
        let eps = p.step_size(schedule, i);
        let noise = (2.0 * eps).sqrt();
        for j in 0..p.inner_steps {
            let s = model.score(&x, sigma)?;
            let lik = likelihood(&x)?;
            let z = gaussian_field(rows, cols, rng);
            let data = x.data_mut();
            for k in 0..data.len() {
                data[k] += eps * (s.data()[k] - lik.data()[k] / gamma2) + noise * z.data()[k];
            }
            diverged(&x, i, j)?;
        }
        if let Some(pr) = progress.as_deref_mut() {
            pr.report(i, &x);
        }
    }
    if p.final_denoise {
        let sigma = schedule.sigma_min();
        let s = model.score(&x, sigma)?;
        let lik = likelihood(&x)?;
        x.axpy(sigma * sigma, &s);
        x.axpy(-1.0, &lik);
        diverged(&x, 0, p.inner_steps)?;
    }
    Ok(x)
}

/// Predictor-corrector sampling of the reverse VE SDE, starting from
/// `x_N ~ N(0, sigma_N^2 I)`, with data consistency after both the reverse
/// diffusion (predictor) step and the Langevin (corrector) step.
pub fn pc_sample(
    model: &dyn ScoreModel,
    y: &Measurement,
    op: &MeasurementOp,
    p: &PcParams,
    schedule: &SigmaSchedule,
    rng: &mut RngState,
) -> Result<Image> {
    pc_sample_with(model, y, op, p, schedule, rng, None)
}

pub fn pc_sample_with(
    model: &dyn ScoreModel,
    y: &Measurement,
    op: &MeasurementOp,
    p: &PcParams,
    schedule: &SigmaSchedule,
    rng: &mut RngState,
    progress: Option<&mut Progress<'_>>,
) -> Result<Image> {
    p.validate()?;
    let cond = Cond {
        y,
        op,
        lambda: p.lambda,
    };
    pc_core(model, op.image_dims(), Some(&cond), p, schedule, rng, progress)
}

/// Prior sample (no measurements) with the predictor-corrector sampler.
pub fn sample_unconditional(
    model: &dyn ScoreModel,
    dims: (usize, usize),
    p: &PcParams,
    schedule: &SigmaSchedule,
    rng: &mut RngState,
) -> Result<Image> {
    p.validate()?;
    pc_core(model, dims, None, p, schedule, rng, None)
}

fn pc_core(
    model: &dyn ScoreModel,
    (rows, cols): (usize, usize),
    cond: Option<&Cond<'_>>,
    p: &PcParams,
    schedule: &SigmaSchedule,
    rng: &mut RngState,
    mut progress: Option<&mut Progress<'_>>,
) -> Result<Image> {
    check_model_dims(model, (rows, cols))?;
    let consistent = |x: Image| -> Result<Image> {
        match cond {
            Some(c) => c.apply(&x),
            None => Ok(x),
        }
    };
    let mut x = gaussian_field(rows, cols, rng);
    x.scale(schedule.sigma_max());
    for i in (0..schedule.len()).rev() {
        let hi = schedule.sigma(i + 1);
        let lo = schedule.sigma(i);
        let dv = hi * hi - lo * lo;
        let s = model.score(&x, hi)?;
        let z = gaussian_field(rows, cols, rng);
        x.axpy(dv, &s);
        x.axpy(dv.sqrt(), &z);
        diverged(&x, i, 0)?;
        x = consistent(x)?;

        let sigma_c = if i == 0 { schedule.sigma_min() } else { lo };
        let g = model.score(&x, sigma_c)?;
        let z = gaussian_field(rows, cols, rng);
        let gn = g.norm();
        if gn > 0.0 {
            let eps = 2.0 * (p.snr * z.norm() / gn).powi(2);
            x.axpy(eps, &g);
            x.axpy((2.0 * eps).sqrt(), &z);
        }
        diverged(&x, i, 1)?;
        x = consistent(x)?;
        if let Some(pr) = progress.as_deref_mut() {
            pr.report(i, &x);
        }
    }
    Ok(x)
}

/// One predictor-corrector reconstruction per `lambda`, each starting from
/// the same random state.
pub fn lambda_sweep(
    model: &dyn ScoreModel,
    y: &Measurement,
    op: &MeasurementOp,
    lambdas: &[f64],
    p: &PcParams,
    schedule: &SigmaSchedule,
    rng: &RngState,
) -> Result<Vec<Image>> {
    par::map_slice(lambdas, |&lambda| {
        let params = PcParams { lambda, ..*p };
        pc_sample(model, y, op, &params, schedule, &mut rng.clone())
    })
    .into_iter()
    .collect()
}

/// Run `count` independent chains, chain `k` on the stream `rng.derive(k)`.
pub fn run_chains<F>(count: usize, rng: &RngState, chain: F) -> Result<Vec<Image>>
where
    F: Fn(&mut RngState) -> Result<Image> + Send + Sync,
{
    par::map_range(count, |k| chain(&mut rng.derive(k as u64)))
        .into_iter()
        .collect()
}
