//! Experiment orchestration: configs, synthetic data, per-slice
//! reconstruction and report tables.
//!
//! Every slice is normalized to `[0, 1]` by its maximum before it is
//! undersampled, and every slice draws from its own stream
//! `RngState::new(seed).derive(slice_index)`, so the output does not depend
//! on the number of worker threads.

mod config;
mod phantoms;
mod report;

use std::path::Path;
use std::time::Instant;

pub use config::{ExperimentConfig, MaskSpec, Method, Modality, ModelSource, SamplerSpec, ScheduleSpec};
pub use phantoms::{load_dataset, make_phantoms, write_dataset, PhantomKind};
pub use report::{compare_table, write_compare_table, ReconReport, SliceRow};

use crate::analysis::{grad_neg_log_hist, mean_image, psnr, ssim, HIST_BINS, HIST_RANGE};
use crate::diffusion::load_checkpoint;
use crate::error::{Error, Result};
use crate::imgcore::{io, Image, RngState};
use crate::operators::{Measurement, MeasurementOp};
use crate::par;
use crate::samplers::{ald_sample_with, lambda_sweep, pc_sample_with, Progress};
use crate::scoremodel::{Covariance, GaussianScore, ScoreModel};
use crate::variational::{reconstruct_tv, write_trace_csv};

/// Stream reserved for mask generation, disjoint from the per-slice streams.
const MASK_STREAM: u64 = u64::MAX;

/// Scale to `[0, 1]` by the maximum (images with a nonpositive maximum are
/// left alone) and square it for CT.
pub fn normalize_slice(img: &Image, modality: Modality) -> Image {
    let max = img.max();
    let mut out = if max > 0.0 { img.map(|v| v / max) } else { img.clone() };
    if modality == Modality::Ct && out.rows() != out.cols() {
        out = out.to_square(out.rows().max(out.cols()));
    }
    out
}

fn load_slices(cfg: &ExperimentConfig) -> Result<Vec<(String, Image)>> {
    let mut slices = load_dataset(&cfg.dataset)?;
    if let Some(m) = cfg.max_slices {
        slices.truncate(m);
    }
    if slices.is_empty() {
        return Err(Error::Degenerate(format!("no readable images in {}", cfg.dataset.display())));
    }
    Ok(slices
        .into_iter()
        .map(|(id, img)| (id, normalize_slice(&img, cfg.modality)))
        .collect())
}

/// Score model named by the config, checked against the image size.
/// Returns the model and the network depth when it is a network.
pub fn load_model(
    source: &ModelSource,
    modality: Modality,
    dims: (usize, usize),
) -> Result<(Box<dyn ScoreModel>, Option<usize>)> {
    match source {
        ModelSource::Checkpoint { path, ema } => {
            let (model, avg) = load_checkpoint(path)?;
            let net = if *ema { avg } else { model };
            net.check_dims(dims.0, dims.1)?;
            let depth = net.config().depth;
            Ok((Box::new(net), Some(depth)))
        }
        ModelSource::GaussianOracle {
            fit_dataset,
            mean,
            variance,
        } => {
            let oracle = match fit_dataset {
                Some(path) => {
                    let data: Vec<Image> = load_dataset(path)?
                        .into_iter()
                        .map(|(_, img)| normalize_slice(&img, modality))
                        .collect();
                    GaussianScore::fit_diagonal(&data, 1e-4)?
                }
                None => GaussianScore::new(Image::filled(dims.0, dims.1, *mean), Covariance::Isotropic(*variance))?,
            };
            if oracle.mean().dims() != dims {
                return Err(Error::dim(format!(
                    "oracle fitted on {:?} images, data is {dims:?}",
                    oracle.mean().dims()
                )));
            }
            Ok((Box::new(oracle), None))
        }
    }
}

struct Setup {
    op: MeasurementOp,
    model: Option<Box<dyn ScoreModel>>,
    depth: Option<usize>,
}

fn setup(cfg: &ExperimentConfig, dims: (usize, usize)) -> Result<Setup> {
    let mut mask_rng = RngState::new(cfg.seed).derive(MASK_STREAM);
    let op = cfg.mask.build_operator(cfg.modality, dims.0, dims.1, &mut mask_rng)?;
    let (model, depth) = match (&cfg.model, cfg.method.needs_model()) {
        (Some(src), true) => {
            let (m, d) = load_model(src, cfg.modality, dims)?;
            (Some(m), d)
        }
        _ => (None, None),
    };
    Ok(Setup { op, model, depth })
}

/// Reconstruct one slice from its simulated measurement.
fn reconstruct(
    cfg: &ExperimentConfig,
    s: &Setup,
    id: &str,
    truth: &Image,
    y: &Measurement,
    rng: &mut RngState,
) -> Result<Image> {
    let every = 50;
    let mut progress = Progress {
        every,
        reference: Some(truth),
        callback: Box::new(|level, q| {
            log::debug!("{id}: level {level}, psnr {}", q.map_or("-".into(), |v| format!("{v:.2}")));
        }),
    };
    match cfg.method {
        Method::ZeroFilled => s.op.back(y),
        Method::Tv => {
            let out = reconstruct_tv(y, &s.op, &cfg.tv)?;
            write_trace_csv(cfg.output.join("tv").join(format!("{id}.csv")), &out.trace)?;
            Ok(out.image)
        }
        Method::Pc => {
            let model = s.model.as_deref().ok_or_else(|| Error::Config("missing model".into()))?;
            let schedule = cfg.schedule.build(cfg.method)?;
            pc_sample_with(model, y, &s.op, &cfg.sampler.pc(), &schedule, rng, Some(&mut progress))
        }
        Method::Ald => {
            let model = s.model.as_deref().ok_or_else(|| Error::Config("missing model".into()))?;
            let schedule = cfg.schedule.build(cfg.method)?;
            ald_sample_with(model, y, &s.op, &cfg.sampler.ald(), &schedule, rng, Some(&mut progress))
        }
    }
}

fn write_previews(dir: &Path, id: &str, img: &Image, hi: f64) -> Result<()> {
    io::write(dir.join(format!("{id}.srimg")), img)?;
    io::write_png(dir.join(format!("{id}.png")), img, 0.0, hi)
}

/// Peak of the difference-image previews.
const DIFF_PREVIEW_MAX: f64 = 0.25;

fn run_slice(cfg: &ExperimentConfig, s: &Setup, index: usize, id: &str, truth: &Image) -> SliceRow {
    let mut row = SliceRow::new(id);
    if truth.dims() != s.op.image_dims() {
        let msg = format!("size {:?} differs from the experiment's {:?}", truth.dims(), s.op.image_dims());
        log::warn!("skipping {id}: {msg}");
        row.error = Some(msg);
        return row;
    }
    let start = Instant::now();
    let mut rng = RngState::new(cfg.seed).derive(index as u64);
    let result = s
        .op
        .forward(truth)
        .and_then(|y| reconstruct(cfg, s, id, truth, &y, &mut rng));
    let elapsed = start.elapsed().as_secs_f64();
    match result {
        Ok(recon) => {
            let diff = recon.zip_map(truth, |a, b| (a - b).abs());
            let written = write_previews(&cfg.output.join("recon"), id, &recon, 1.0)
                .and_then(|_| write_previews(&cfg.output.join("diff"), id, &diff, DIFF_PREVIEW_MAX));
            if let Err(e) = written {
                log::warn!("{id}: could not write images: {e}");
            }
            row.psnr = psnr(&recon, truth).ok();
            row.ssim = ssim(&recon, truth).ok();
            row.time_s = cfg.record_time.then_some(elapsed);
        }
        Err(e) => {
            log::warn!("{id}: reconstruction failed: {e}");
            row.error = Some(e.to_string());
        }
    }
    row
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<()> {
    for sub in ["recon", "diff"] {
        std::fs::create_dir_all(cfg.output.join(sub))?;
    }
    if cfg.method == Method::Tv {
        std::fs::create_dir_all(cfg.output.join("tv"))?;
    }
    std::fs::write(cfg.output.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn write_operator_preview(cfg: &ExperimentConfig, op: &MeasurementOp) -> Result<()> {
    match op {
        MeasurementOp::Mri { mask } => mask.save(cfg.output.join("mask.srimg")).and_then(|_| {
            io::write_png(cfg.output.join("mask.png"), &mask.to_centered_image(), 0.0, 1.0)
        }),
        MeasurementOp::Ct { angles, .. } => Ok(std::fs::write(cfg.output.join("angles.txt"), angles.to_text())?),
    }
}

/// Simulate noise-free measurements for every slice, reconstruct, score and
/// write images (`recon/`, `diff/`), `metrics.csv`, the slice manifest
/// `slices.txt` and a `config.toml` echo.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReconReport> {
    cfg.validate()?;
    let slices = load_slices(cfg)?;
    let dims = slices[0].1.dims();
    let s = setup(cfg, dims)?;
    prepare_output(cfg)?;
    write_operator_preview(cfg, &s.op)?;
    // the split actually used, one slice id per line
    let manifest: String = slices.iter().map(|(id, _)| format!("{id}\n")).collect();
    std::fs::write(cfg.output.join("slices.txt"), manifest)?;
    let rows = par::map_range(slices.len(), |k| run_slice(cfg, &s, k, &slices[k].0, &slices[k].1));
    let report = ReconReport {
        dataset: dataset_name(&cfg.dataset),
        mask: cfg.mask.label(),
        method: cfg.method.name().to_string(),
        depth: s.depth,
        lambda: match cfg.method {
            Method::Tv => Some(cfg.tv.lambda),
            Method::Pc | Method::Ald => Some(cfg.sampler.lambda),
            Method::ZeroFilled => None,
        },
        rows,
    };
    report.write_metrics_csv(&cfg.output.join("metrics.csv"))?;
    Ok(report)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// One entry of a data-weight sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub residual: f64,
    pub psnr: Option<f64>,
}

/// Predictor-corrector reconstructions of the first slice for each `lambda`,
/// all from the same random stream. Writes `sweep/lambda_<v>.{srimg,png}`
/// and `sweep/sweep.csv` (`lambda,residual_norm,psnr`).
pub fn run_lambda_sweep(cfg: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    let slices = load_slices(cfg)?;
    let (id, truth) = &slices[0];
    let mut pc_cfg = cfg.clone();
    pc_cfg.method = Method::Pc;
    pc_cfg.validate()?;
    let s = setup(&pc_cfg, truth.dims())?;
    let model = s.model.as_deref().ok_or_else(|| Error::Config("missing model".into()))?;
    let y = s.op.forward(truth)?;
    let schedule = pc_cfg.schedule.build(Method::Pc)?;
    let rng = RngState::new(cfg.seed).derive(0);
    let images = lambda_sweep(model, &y, &s.op, lambdas, &pc_cfg.sampler.pc(), &schedule, &rng)?;
    let dir = cfg.output.join("sweep");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(["lambda", "residual_norm", "psnr"])?;
    for (&lambda, img) in lambdas.iter().zip(&images) {
        write_previews(&dir, &format!("lambda_{lambda}"), img, 1.0)?;
        let row = SweepRow {
            lambda,
            residual: s.op.residual_norm(img, &y)?,
            psnr: psnr(img, truth).ok(),
        };
        w.write_record([
            format!("{lambda}"),
            format!("{}", row.residual),
            row.psnr.map_or(String::new(), |v| format!("{v}")),
        ])?;
        rows.push(row);
    }
    w.flush()?;
    log::info!("swept {} values of lambda on {id}", lambdas.len());
    Ok(rows)
}

/// Mean image and gradient histograms of a dataset: writes `mean.srimg`,
/// `mean.png`, `hist_x.csv` and `hist_y.csv` into `out`.
pub fn dataset_statistics(images: &[Image], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mean = mean_image(images)?;
    io::write(out.join("mean.srimg"), &mean)?;
    io::write_png(out.join("mean.png"), &mean, 0.0, mean.max().max(1e-12))?;
    let (h, v) = grad_neg_log_hist(images, HIST_BINS, HIST_RANGE.0, HIST_RANGE.1)?;
    h.write_neg_log_csv(out.join("hist_x.csv"))?;
    v.write_neg_log_csv(out.join("hist_y.csv"))?;
    Ok(())
}

/// PSNR/SSIM of every reconstruction against the reference with the same
/// file stem, written as `id,psnr,ssim`.
pub fn pair_metrics(recon: &Path, reference: &Path, out: &Path) -> Result<usize> {
    let refs = load_dataset(reference)?;
    let recons = load_dataset(recon)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["id", "psnr", "ssim"])?;
    let mut n = 0;
    for (id, r) in &refs {
        let Some((_, x)) = recons.iter().find(|(rid, _)| rid == id) else {
            log::warn!("no reconstruction for {id}");
            continue;
        };
        let cell = |v: Result<f64>| v.map(|v| format!("{v}")).unwrap_or_default();
        w.write_record([id.clone(), cell(psnr(x, r)), cell(ssim(x, r))])?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn experiment(dir: &Path, method: &str, mask: &str, extra: &str) -> ExperimentConfig {
        let data = dir.join("data");
        if !data.exists() {
            let imgs = make_phantoms(PhantomKind::PiecewiseBlobs, 16, 2, &mut RngState::new(1)).unwrap();
            write_dataset(&data, "blob", &imgs).unwrap();
        }
        let text = format!(
            "modality = \"mri\"\nmethod = \"{method}\"\ndataset = \"data\"\noutput = \"out_{method}\"\nseed = 5\n\n\
             [mask]\n{mask}\n\n{extra}"
        );
        std::fs::write(dir.join("exp.toml"), text).unwrap();
        ExperimentConfig::load(&dir.join("exp.toml")).unwrap()
    }

    #[test]
    fn zero_filled_runs_without_a_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = experiment(dir.path(), "zero-filled", "kind = \"gaussian1d\"\naccel = 2", "");
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.psnr.is_some_and(f64::is_finite)));
        assert!(cfg.output.join("diff/blob_0000.srimg").exists());
        assert!(cfg.output.join("metrics.csv").exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = experiment(
            dir.path(),
            "pc",
            "kind = \"gaussian1d\"\naccel = 2",
            "[model]\nsource = \"gaussian-oracle\"\n\n[schedule]\nn = 30\n",
        );
        let a = run_experiment(&cfg).unwrap();
        let first = std::fs::read(cfg.output.join("metrics.csv")).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(first, std::fs::read(cfg.output.join("metrics.csv")).unwrap());
    }

    #[test]
    fn oracle_with_full_mask_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = experiment(dir.path(), "pc", "kind = \"full\"", "[model]\nsource = \"gaussian-oracle\"\n");
        let report = run_experiment(&cfg).unwrap();
        let (mean, _) = report.psnr_stats().unwrap();
        assert!(mean >= 50.0, "{mean}");
    }

    #[test]
    fn tv_writes_objective_traces() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = experiment(
            dir.path(),
            "tv",
            "kind = \"gaussian1d\"\naccel = 2",
            "[tv]\nlambda = 100.0\nmax_iters = 50\n",
        );
        run_experiment(&cfg).unwrap();
        let trace = std::fs::read_to_string(cfg.output.join("tv/blob_0001.csv")).unwrap();
        assert!(trace.starts_with("iter,objective,data_fidelity,tv\n"));
    }

    #[test]
    fn sweep_writes_one_row_per_lambda() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = experiment(
            dir.path(),
            "pc",
            "kind = \"gaussian1d\"\naccel = 2",
            "[model]\nsource = \"gaussian-oracle\"\n\n[schedule]\nn = 20\n",
        );
        let rows = run_lambda_sweep(&cfg, &[0.0, 1.0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].residual < rows[0].residual);
    }

    #[test]
    fn statistics_files() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = make_phantoms(PhantomKind::SheppLogan, 32, 3, &mut RngState::new(0)).unwrap();
        dataset_statistics(&imgs, dir.path()).unwrap();
        for f in ["mean.srimg", "mean.png", "hist_x.csv", "hist_y.csv"] {
            assert!(dir.path().join(f).exists());
        }
    }

    #[test]
    fn normalization_and_ct_padding() {
        let img = Image::from_fn(4, 6, |r, c| (r + c) as f64);
        let n = normalize_slice(&img, Modality::Ct);
        assert_eq!(n.dims(), (6, 6));
        assert_eq!(n.max(), 1.0);
    }
}
