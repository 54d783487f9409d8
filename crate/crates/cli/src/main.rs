use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use diffrecon::diffusion::{make_schedule, save_checkpoint, train, write_loss_csv, TrainConfig};
use diffrecon::harness::{
    compare_table, dataset_statistics, load_dataset, load_model, make_phantoms, normalize_slice, pair_metrics,
    run_experiment, run_lambda_sweep, write_dataset, ExperimentConfig, MaskSpec, Method, Modality, ModelSource,
    PhantomKind,
};
use diffrecon::imgcore::io;
use diffrecon::operators::sparse_view_angles;
use diffrecon::samplers::{run_chains, sample_unconditional, PcParams};
use diffrecon::scoremodel::{NetConfig, ReceptiveField, ScoreNet};
use diffrecon::{Image, RngState};

#[derive(Parser)]
#[command(name = "diffrecon", version, about = "Score-based priors for undersampled MRI and sparse-view CT")]
struct Cli {
    /// Worker threads for data-parallel loops (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Phantoms(PhantomsArgs),
    /// Generate an undersampling pattern with a preview and statistics.
    Masks(MasksArgs),
    /// Receptive field of the score network per depth.
    Rf(RfArgs),
    /// Train a score network with denoising score matching.
    Train(TrainArgs),
    /// Draw unconditional samples from a prior.
    Sample(SampleArgs),
    /// Run the reconstruction experiment described by a config file.
    Reconstruct(ExperimentArgs),
    /// Total-variation reconstruction for the experiment in a config file.
    Tv(ExperimentArgs),
    /// Image quality metrics and dataset statistics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Reconstruct the first slice for several data weights.
    SweepLambda(SweepArgs),
}

#[derive(Args)]
struct PhantomsArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: PhantomKind,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> std::result::Result<PhantomKind, String> {
    s.parse().map_err(|e: diffrecon::Error| e.to_string())
}

#[derive(Args)]
struct MasksArgs {
    /// full, gaussian1d, gaussian2d, poisson, radial or sparse-view.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 4.0)]
    accel: f64,
    #[arg(long, default_value_t = 0.08)]
    center_frac: f64,
    #[arg(long, default_value_t = 22)]
    spokes: usize,
    #[arg(long, default_value_t = 23)]
    angles: usize,
    #[arg(long, default_value_t = 320)]
    rows: usize,
    #[arg(long, default_value_t = 320)]
    cols: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl MasksArgs {
    fn spec(&self) -> Result<MaskSpec> {
        Ok(match self.kind.as_str() {
            "full" => MaskSpec::Full,
            "gaussian1d" => MaskSpec::Gaussian1d {
                accel: self.accel,
                center_frac: self.center_frac,
            },
            "gaussian2d" => MaskSpec::Gaussian2d { accel: self.accel },
            "poisson" => MaskSpec::Poisson { accel: self.accel },
            "radial" => MaskSpec::Radial { spokes: self.spokes },
            "sparse-view" => MaskSpec::SparseView { angles: self.angles },
            other => bail!("unknown mask kind {other:?}"),
        })
    }
}

#[derive(Args)]
struct RfArgs {
    /// Single depth; all of 1 to 4 when omitted.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    attention: bool,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value_t = 256)]
    deep_channels: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long)]
    attention: bool,
    #[arg(long, default_value_t = 16.0)]
    fourier_scale: f64,
}

impl NetArgs {
    fn config(&self) -> NetConfig {
        NetConfig {
            depth: self.depth,
            base_channels: self.channels,
            deep_channels: self.deep_channels,
            blocks_per_stage: self.blocks,
            attention: self.attention,
            fourier_scale: self.fourier_scale,
        }
    }
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 500)]
    levels: usize,
    #[arg(long, default_value_t = 0.01)]
    sigma_min: f64,
    #[arg(long, default_value_t = 378.0)]
    sigma_max: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Raw image or directory of them; each is scaled to [0, 1] by its maximum.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "mri", value_parser = parse_modality)]
    modality: Modality,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with a `loss.csv` extension.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 5000)]
    warmup: usize,
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0.999)]
    ema_rate: f64,
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    seed: u64,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    match s {
        "mri" => Ok(Modality::Mri),
        "ct" => Ok(Modality::Ct),
        _ => Err(format!("unknown modality {s:?}")),
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Trained network; a Gaussian oracle is used when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the raw weights instead of the moving average.
    #[arg(long)]
    no_ema: bool,
    #[arg(long, default_value_t = 0.5)]
    oracle_mean: f64,
    #[arg(long, default_value_t = 0.1)]
    oracle_variance: f64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0.16)]
    snr: f64,
    #[arg(long, default_value_t = 250)]
    levels: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    max_slices: Option<usize>,
    /// Data weight of the sampler, or of the TV data term for `tv`.
    #[arg(long)]
    lambda: Option<f64>,
    /// Record wall-clock seconds per slice (the CSV then differs between runs).
    #[arg(long)]
    record_time: bool,
}

impl ExperimentArgs {
    fn load(&self, tv: bool) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        cfg.seed = self.seed;
        if tv {
            cfg.method = Method::Tv;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if self.max_slices.is_some() {
            cfg.max_slices = self.max_slices;
        }
        if let Some(l) = self.lambda {
            if cfg.method == Method::Tv {
                cfg.tv.lambda = l;
            } else {
                cfg.sampler.lambda = l;
            }
        }
        cfg.record_time |= self.record_time;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// PSNR and SSIM of reconstructions against references with the same file stem.
    Pairs {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean image and gradient histograms of a dataset.
    Dataset {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Concatenate the summary rows of several reconstruction runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,1")]
    lambdas: Vec<f64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // read by the global pool when it is first used
        std::env::set_var("RAYON_NUM_THREADS", n.max(1).to_string());
    }
    match cli.command {
        Command::Phantoms(a) => phantoms(a),
        Command::Masks(a) => masks(a),
        Command::Rf(a) => rf(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Reconstruct(a) => reconstruct(a.load(false)?),
        Command::Tv(a) => reconstruct(a.load(true)?),
        Command::Metrics(m) => metrics(m),
        Command::SweepLambda(a) => sweep(a),
    }
}

fn phantoms(a: PhantomsArgs) -> Result<()> {
    let imgs = make_phantoms(a.kind, a.size, a.count, &mut RngState::new(a.seed))?;
    let paths = write_dataset(&a.out, a.kind.name(), &imgs)?;
    for (p, img) in paths.iter().zip(&imgs) {
        io::write_png(p.with_extension("png"), img, 0.0, 1.0)?;
    }
    println!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}

fn masks(a: MasksArgs) -> Result<()> {
    let spec = a.spec()?;
    std::fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("mask.csv"))?;
    if let MaskSpec::SparseView { angles } = spec {
        let set = sparse_view_angles(angles)?;
        set.save(a.out.join("angles.txt"))?;
        w.write_record(["label", "angles"])?;
        w.write_record([spec.label(), set.len().to_string()])?;
    } else {
        let mask = spec.build_mask(a.rows, a.cols, &mut RngState::new(a.seed))?;
        mask.save(a.out.join("mask.srimg"))?;
        io::write_png(a.out.join("mask.png"), &mask.to_centered_image(), 0.0, 1.0)?;
        w.write_record(["label", "rows", "cols", "kept", "kept_fraction", "acceleration", "conjugate_symmetric"])?;
        w.write_record([
            spec.label(),
            a.rows.to_string(),
            a.cols.to_string(),
            mask.kept_count().to_string(),
            mask.kept_fraction().to_string(),
            mask.acceleration().to_string(),
            mask.is_conjugate_symmetric().to_string(),
        ])?;
    }
    w.flush()?;
    println!("{} written to {}", spec.label(), a.out.display());
    Ok(())
}

fn rf(a: RfArgs) -> Result<()> {
    let depths: Vec<usize> = match a.depth {
        Some(d) => vec![d],
        None => (1..=4).collect(),
    };
    let mut rows = Vec::new();
    for d in depths {
        let cfg = NetConfig {
            blocks_per_stage: a.blocks,
            ..NetConfig::paper(d, a.attention)
        };
        cfg.validate()?;
        let (value, global) = match cfg.receptive_field() {
            ReceptiveField::Finite(n) => (n, false),
            ReceptiveField::Global { conv_only } => (conv_only, true),
        };
        let note = if global { " (attention: global; conv path shown)" } else { "" };
        println!("d={d}: {value}{note}");
        rows.push([d.to_string(), a.attention.to_string(), value.to_string(), global.to_string()]);
    }
    if let Some(path) = a.csv {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["depth", "attention", "receptive_field", "global"])?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn load_images(path: &Path, modality: Modality) -> Result<Vec<Image>> {
    let imgs: Vec<Image> = load_dataset(path)?
        .into_iter()
        .map(|(_, img)| normalize_slice(&img, modality))
        .collect();
    if imgs.is_empty() {
        bail!("no readable images in {}", path.display());
    }
    Ok(imgs)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = load_images(&a.data, a.modality)?;
    let schedule = make_schedule(a.schedule.levels, a.schedule.sigma_min, a.schedule.sigma_max)?;
    let cfg = TrainConfig {
        iterations: a.iterations,
        lr_peak: a.lr,
        warmup_iters: a.warmup,
        grad_clip: a.grad_clip,
        ema_rate: a.ema_rate,
        batch: a.batch,
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(a.seed);
    let net = ScoreNet::new(a.net.config(), &mut rng)?;
    let (rows, cols) = data[0].dims();
    net.check_dims(rows, cols)?;
    log::info!("training {} parameters on {} images", net.param_count(), data.len());
    let out = train(net, &data, &schedule, &cfg, &mut rng)?;
    save_checkpoint(&a.out, &out.model, &out.ema)?;
    let loss_path = a.loss_csv.unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_csv(&loss_path, &out.losses)?;
    println!("checkpoint {}, loss trace {}", a.out.display(), loss_path.display());
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let source = match &a.checkpoint {
        Some(path) => ModelSource::Checkpoint {
            path: path.clone(),
            ema: !a.no_ema,
        },
        None => ModelSource::GaussianOracle {
            fit_dataset: None,
            mean: a.oracle_mean,
            variance: a.oracle_variance,
        },
    };
    let dims = (a.size, a.size);
    let (model, _) = load_model(&source, Modality::Mri, dims)?;
    let schedule = make_schedule(a.levels, 0.01, 378.0)?;
    let p = PcParams {
        lambda: 0.0,
        snr: a.snr,
    };
    let samples = run_chains(a.count, &RngState::new(a.seed), |rng| {
        sample_unconditional(model.as_ref(), dims, &p, &schedule, rng)
    })?;
    std::fs::create_dir_all(&a.out)?;
    let mut w = csv::Writer::from_path(a.out.join("samples.csv"))?;
    w.write_record(["id", "mean", "min", "max"])?;
    for (k, img) in samples.iter().enumerate() {
        let id = format!("sample_{k:04}");
        io::write(a.out.join(format!("{id}.srimg")), img)?;
        io::write_png(a.out.join(format!("{id}.png")), img, 0.0, 1.0)?;
        w.write_record([id, img.mean().to_string(), img.min().to_string(), img.max().to_string()])?;
    }
    w.flush()?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn reconstruct(cfg: ExperimentConfig) -> Result<()> {
    let report = run_experiment(&cfg)?;
    std::fs::write(cfg.output.join("summary.csv"), compare_table(std::slice::from_ref(&report))?)?;
    match report.psnr_stats() {
        Some((m, s)) => println!(
            "{} {} on {}: PSNR {m:.2} ± {s:.2} dB over {} slices ({} failed)",
            report.method,
            report.mask,
            report.dataset,
            report.rows.len() - report.failures(),
            report.failures()
        ),
        None => println!("no slice produced a finite PSNR ({} failed)", report.failures()),
    }
    Ok(())
}

fn metrics(m: MetricsCommand) -> Result<()> {
    match m {
        MetricsCommand::Pairs { recon, reference, out } => {
            let n = pair_metrics(&recon, &reference, &out)?;
            println!("scored {n} pairs into {}", out.display());
        }
        MetricsCommand::Dataset { data, out } => {
            let imgs: Vec<Image> = load_dataset(&data)?.into_iter().map(|(_, i)| i).collect();
            dataset_statistics(&imgs, &out)?;
            println!("statistics of {} images in {}", imgs.len(), out.display());
        }
        MetricsCommand::Compare { runs, out } => {
            let mut text = String::new();
            for (k, run) in runs.iter().enumerate() {
                let path = run.join("summary.csv");
                let body = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let mut lines = body.lines();
                let header = lines.next().unwrap_or_default();
                if k == 0 {
                    text.push_str(header);
                    text.push('\n');
                }
                for l in lines {
                    text.push_str(l);
                    text.push('\n');
                }
            }
            std::fs::write(&out, text)?;
            println!("table of {} runs in {}", runs.len(), out.display());
        }
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    cfg.seed = a.seed;
    if let Some(o) = a.output {
        cfg.output = o;
    }
    let rows = run_lambda_sweep(&cfg, &a.lambdas)?;
    for r in rows {
        println!(
            "lambda {:>8}: residual {:.3e}, PSNR {}",
            r.lambda,
            r.residual,
            r.psnr.map_or("-".into(), |v| format!("{v:.2} dB"))
        );
    }
    Ok(())
}
