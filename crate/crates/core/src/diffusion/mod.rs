//! Variance-exploding noise schedule, denoising score matching and training.

mod checkpoint;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use crate::error::{Error, Result};
use crate::imgcore::{gaussian_field, Image, RngState};
use crate::par;
use crate::scoremodel::{check_model_dims, ScoreModel, ScoreNet};

/// Geometric noise ladder `sigma_1 < ... < sigma_N`, stored 1-indexed via [`SigmaSchedule::sigma`].
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
}

/// `sigma_i = sigma_min (sigma_max / sigma_min)^((i - 1) / (n - 1))` for `i = 1..=n`.
pub fn make_schedule(n: usize, sigma_min: f64, sigma_max: f64) -> Result<SigmaSchedule> {
    if n < 2 {
        return Err(Error::param(format!("schedule needs at least 2 levels, got {n}")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(Error::param(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
        )));
    }
    let ratio = (sigma_max / sigma_min).ln();
    let mut sigmas: Vec<f64> = (0..n)
        .map(|k| sigma_min * (ratio * k as f64 / (n - 1) as f64).exp())
        .collect();
    sigmas[0] = sigma_min;
    sigmas[n - 1] = sigma_max;
    Ok(SigmaSchedule { sigmas })
}

impl SigmaSchedule {
    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    /// `sigma_i` for `1 <= i <= N`; `sigma_0 = 0` closes the ladder.
    pub fn sigma(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.sigmas[i - 1]
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigmas[0]
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[self.sigmas.len() - 1]
    }
}

/// `x0 + sigma z` with `z` standard normal.
pub fn perturb(x0: &Image, sigma: f64, rng: &mut RngState) -> Image {
    let mut out = x0.clone();
    if sigma != 0.0 {
        out.axpy(sigma, &gaussian_field(x0.rows(), x0.cols(), rng));
    }
    out
}

/// One drawn training target: noise level and the unit noise field.
struct Draw {
    sigma: f64,
    z: Image,
}

fn draw_noise(batch: &[Image], schedule: &SigmaSchedule, rng: &mut RngState) -> Vec<Draw> {
    batch
        .iter()
        .map(|x0| {
            let i = 1 + rng.below(schedule.len());
            Draw {
                sigma: schedule.sigma(i),
                z: gaussian_field(x0.rows(), x0.cols(), rng),
            }
        })
        .collect()
}

fn noisy(x0: &Image, d: &Draw) -> Image {
    let mut x = x0.clone();
    x.axpy(d.sigma, &d.z);
    x
}

/// Weighted denoising score-matching loss, averaged over the batch.
///
/// With `x_t = x0 + sigma z` and noise level index uniform over the schedule,
/// each term is `sigma^2 |s(x_t, sigma) - (x0 - x_t)/sigma^2|^2 = |sigma s + z|^2`.
pub fn dsm_loss(model: &dyn ScoreModel, batch: &[Image], schedule: &SigmaSchedule, rng: &mut RngState) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    for x in batch {
        check_model_dims(model, x.dims())?;
    }
    let draws = draw_noise(batch, schedule, rng);
    let terms = par::map_range(batch.len(), |k| -> Result<f64> {
        let d = &draws[k];
        let s = model.score(&noisy(&batch[k], d), d.sigma)?;
        s.same_dims(&d.z)?;
        Ok(s.data().iter().zip(d.z.data()).map(|(s, z)| (d.sigma * s + z).powi(2)).sum())
    });
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total / batch.len() as f64)
}

/// Optimizer and schedule settings for [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub grad_clip: f64,
    pub ema_rate: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr_peak: 2e-4,
            warmup_iters: 5000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            grad_clip: 1.0,
            ema_rate: 0.999,
            batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_peak, self.grad_clip, self.ema_rate];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.batch == 0 {
            return Err(Error::param("learning rate, clip, EMA rate and batch must be positive"));
        }
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !unit(self.adam_beta1) || !unit(self.adam_beta2) || self.ema_rate >= 1.0 {
            return Err(Error::param("Adam betas and EMA rate must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Linear warmup to `lr_peak` over `warmup_iters`, constant afterwards (`t` is 1-based).
    pub fn learning_rate(&self, t: usize) -> f64 {
        if self.warmup_iters == 0 {
            self.lr_peak
        } else {
            self.lr_peak * (t as f64 / self.warmup_iters as f64).min(1.0)
        }
    }
}

/// Exponential moving average of a parameter vector.
#[derive(Debug, Clone)]
pub struct Ema {
    rate: f64,
    value: Vec<f64>,
}

impl Ema {
    pub fn new(rate: f64, init: &[f64]) -> Self {
        Self {
            rate,
            value: init.to_vec(),
        }
    }

    pub fn update(&mut self, params: &[f64]) {
        let r = self.rate;
        for (e, p) in self.value.iter_mut().zip(params) {
            *e = r * *e + (1.0 - r) * p;
        }
    }

    pub fn value(&self) -> &[f64] {
        &self.value
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, b1: f64, b2: f64) {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Result of [`train`]: final weights, their moving average and the per-iteration loss.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ScoreNet,
    pub ema: ScoreNet,
    pub losses: Vec<f64>,
}

/// Batch loss and its parameter gradient for one optimization step.
pub fn loss_and_gradient(
    net: &ScoreNet,
    params: &[f64],
    batch: &[Image],
    schedule: &SigmaSchedule,
    rng: &mut RngState,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let draws = draw_noise(batch, schedule, rng);
    let scale = 1.0 / batch.len() as f64;
    let parts = par::map_range(batch.len(), |k| -> Result<(f64, Vec<f64>)> {
        let d = &draws[k];
        let x = noisy(&batch[k], d);
        let mut gp = vec![0.0; params.len()];
        let mut loss = 0.0;
        net.score_and_backward(
            params,
            &x,
            d.sigma,
            |s| {
                let resid = s.zip_map(&d.z, |s, z| d.sigma * s + z);
                loss = resid.dot(&resid) * scale;
                resid.map(|r| 2.0 * scale * d.sigma * r)
            },
            &mut gp,
        )?;
        Ok((loss, gp))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let frozen = net.frozen();
    grad[frozen].iter_mut().for_each(|g| *g = 0.0);
    Ok((loss, grad))
}

/// Train with Adam, linear warmup, global-norm clipping and a parameter EMA.
///
/// Each iteration draws `cfg.batch` images uniformly with replacement.
pub fn train(
    net: ScoreNet,
    dataset: &[Image],
    schedule: &SigmaSchedule,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<Trained> {
    if dataset.is_empty() {
        return Err(Error::param("empty training set"));
    }
    cfg.validate()?;
    for x in dataset {
        net.check_dims(x.rows(), x.cols())?;
    }
    let mut params = net.params().to_vec();
    let mut adam = Adam::new(params.len());
    let mut ema = Ema::new(cfg.ema_rate, &params);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let log_every = (cfg.iterations / 20).max(1);
    for it in 1..=cfg.iterations {
        let batch: Vec<Image> = (0..cfg.batch)
            .map(|_| dataset[rng.below(dataset.len())].clone())
            .collect();
        let (loss, mut grad) = loss_and_gradient(&net, &params, &batch, schedule, rng)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { iteration: it, loss });
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let s = cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        adam.step(&mut params, &grad, cfg.learning_rate(it), cfg.adam_beta1, cfg.adam_beta2);
        ema.update(&params);
        losses.push(loss);
        if it % log_every == 0 {
            log::info!("iteration {it}: loss {loss:.4}");
        }
    }
    let config = *net.config();
    Ok(Trained {
        model: ScoreNet::from_params(config, params)?,
        ema: ScoreNet::from_params(config, ema.value)?,
        losses,
    })
}

/// Loss trace as CSV with header `iteration,loss` (1-based iterations).
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoremodel::{FnScore, NetConfig, ZeroScore};

    #[test]
    fn schedule_endpoints_and_ratio() {
        let s = make_schedule(500, 0.01, 378.0).unwrap();
        assert_eq!(s.len(), 500);
        assert_eq!(s.sigma(1), 0.01);
        assert_eq!(s.sigma(500), 378.0);
        let r = s.sigma(2) / s.sigma(1);
        for i in 1..500 {
            assert!((s.sigma(i + 1) / s.sigma(i) - r).abs() < 1e-12);
        }
        assert!((s.sigma(230) - 1.26).abs() < 0.01, "{}", s.sigma(230));
        assert_eq!(s.sigma(0), 0.0);
    }

    #[test]
    fn two_level_schedule() {
        assert_eq!(make_schedule(2, 0.5, 3.0).unwrap().sigmas(), &[0.5, 3.0]);
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(make_schedule(1, 0.1, 1.0).is_err());
        assert!(make_schedule(10, 0.0, 1.0).is_err());
        assert!(make_schedule(10, 2.0, 1.0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = RngState::new(0);
        let x = gaussian_field(4, 5, &mut rng);
        assert_eq!(perturb(&x, 0.0, &mut rng), x);
    }

    #[test]
    fn perturbation_moments() {
        let mut rng = RngState::new(1);
        let x0 = Image::from_fn(2, 2, |r, c| (r * 2 + c) as f64);
        let draws = 100_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..draws {
            let x = perturb(&x0, 2.0, &mut rng);
            for k in 0..4 {
                let d = x.data()[k] - x0.data()[k];
                sum[k] += d;
                sq[k] += d * d;
            }
        }
        for k in 0..4 {
            let mean = sum[k] / draws as f64;
            let var = sq[k] / draws as f64 - mean * mean;
            assert!((var - 4.0).abs() < 0.08, "variance {var}");
            // standard error of the mean is 2 / sqrt(1e5)
            assert!(mean.abs() < 4.0 * 2.0 / (draws as f64).sqrt());
        }
    }

    #[test]
    fn exact_conditional_score_has_zero_loss() {
        // the conditional score needs x0, which a ScoreModel does not see, so
        // check the per-sample identity directly
        let mut rng = RngState::new(2);
        let x0 = gaussian_field(6, 6, &mut rng);
        let sigma = 0.7;
        let xt = perturb(&x0, sigma, &mut rng);
        let s = x0.zip_map(&xt, |a, b| (a - b) / (sigma * sigma));
        let z = xt.zip_map(&x0, |a, b| (a - b) / sigma);
        let loss: f64 = s.data().iter().zip(z.data()).map(|(s, z)| (sigma * s + z).powi(2)).sum();
        assert!(loss < 1e-20);
    }

    #[test]
    fn zero_model_loss_is_pixel_count() {
        let mut rng = RngState::new(3);
        let schedule = make_schedule(10, 0.1, 10.0).unwrap();
        let batch: Vec<Image> = (0..50).map(|_| gaussian_field(4, 4, &mut rng)).collect();
        let reps = 1000;
        let vals: Vec<f64> = (0..reps)
            .map(|_| dsm_loss(&ZeroScore, &batch, &schedule, &mut rng).unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        // each sample's loss is chi-square with 16 degrees of freedom (variance 32)
        let se = (32.0 / (50 * reps) as f64).sqrt();
        assert!((mean - 16.0).abs() < 3.0 * se, "{mean}");
        assert!(vals.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn loss_checks_model_dims() {
        struct Fixed;
        impl ScoreModel for Fixed {
            fn score(&self, x: &Image, _: f64) -> Result<Image> {
                Ok(x.clone())
            }
            fn dims(&self) -> Option<(usize, usize)> {
                Some((3, 3))
            }
        }
        let mut rng = RngState::new(4);
        let schedule = make_schedule(4, 0.1, 1.0).unwrap();
        let err = dsm_loss(&Fixed, &[Image::zeros(4, 4)], &schedule, &mut rng);
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert!(dsm_loss(&FnScore(|x: &Image, _| x.clone()), &[], &schedule, &mut rng).is_err());
    }

    #[test]
    fn ema_tracks_frozen_parameters() {
        let mut ema = Ema::new(0.9, &[0.0, 10.0]);
        for _ in 0..400 {
            ema.update(&[1.0, -1.0]);
        }
        assert!((ema.value()[0] - 1.0).abs() < 1e-12 && (ema.value()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig {
            warmup_iters: 100,
            lr_peak: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate(50), 0.5);
        assert_eq!(cfg.learning_rate(100), 1.0);
        assert_eq!(cfg.learning_rate(1000), 1.0);
    }

    fn toy_setup() -> (ScoreNet, Vec<Image>, SigmaSchedule, RngState) {
        let mut rng = RngState::new(5);
        let cfg = NetConfig {
            depth: 1,
            base_channels: 4,
            deep_channels: 4,
            blocks_per_stage: 1,
            attention: false,
            fourier_scale: 1.0,
        };
        let net = ScoreNet::new(cfg, &mut rng).unwrap();
        let data = (0..32).map(|_| perturb(&Image::filled(4, 4, 0.5), 0.3, &mut rng)).collect();
        (net, data, make_schedule(20, 0.05, 5.0).unwrap(), rng)
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let (net, data, schedule, mut rng) = toy_setup();
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &data, &schedule, &cfg, &mut rng).unwrap();
        assert_eq!(out.model.params(), net.params());
        assert_eq!(out.ema.params(), net.params());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn gradient_matches_finite_difference_of_loss() {
        let (net, data, schedule, rng) = toy_setup();
        let p = net.params().to_vec();
        let (_, grad) = loss_and_gradient(&net, &p, &data[..3], &schedule, &mut rng.clone()).unwrap();
        let f = |p: &[f64]| loss_and_gradient(&net, p, &data[..3], &schedule, &mut rng.clone()).unwrap().0;
        let frozen = net.frozen();
        for i in (0..p.len()).step_by(37).filter(|i| !frozen.contains(i)) {
            let h = 1e-6;
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (f(&pp) - f(&pm)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-5 * fd.abs().max(1e-2), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let (net, data, schedule, rng) = toy_setup();
        let cfg = TrainConfig {
            iterations: 300,
            lr_peak: 3e-3,
            warmup_iters: 20,
            batch: 8,
            ema_rate: 0.99,
            ..TrainConfig::default()
        };
        let a = train(net.clone(), &data, &schedule, &cfg, &mut rng.clone()).unwrap();
        let b = train(net, &data, &schedule, &cfg, &mut rng.clone()).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        let head: f64 = a.losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = a.losses[250..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&path, &[3.0, 2.5]).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "iteration,loss\n1,3\n2,2.5\n");
    }
}
