//! Thread-pool speedup of the data-parallel kernels: each benchmark runs the
//! same closure on the default pool and on a single-thread pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use diffrecon::diffusion::{loss_and_gradient, make_schedule};
use diffrecon::harness::{make_phantoms, PhantomKind};
use diffrecon::operators::{backproject, radon, sparse_view_angles, KMask, MeasurementOp};
use diffrecon::par;
use diffrecon::samplers::{pc_sample, run_chains, PcParams};
use diffrecon::scoremodel::{Covariance, GaussianScore, NetConfig, ScoreNet};
use diffrecon::{Image, RngState};

fn both<R: Send>(c: &mut Criterion, group: &str, f: impl Fn() -> R + Send + Sync) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(&f));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| {
        b.iter(|| par::sequential(&f))
    });
    g.finish();
}

fn radon_pair(c: &mut Criterion) {
    let img = make_phantoms(PhantomKind::SheppLogan, 128, 1, &mut RngState::new(0)).unwrap().remove(0);
    let angles = sparse_view_angles(60).unwrap();
    both(c, "radon_128", || radon(&img, &angles, 128).unwrap());
    let sino = radon(&img, &angles, 128).unwrap();
    both(c, "backproject_128", || backproject(&sino, &angles, 128).unwrap());
}

fn pc_chains(c: &mut Criterion) {
    let prior = GaussianScore::new(Image::filled(32, 32, 0.5), Covariance::Isotropic(0.1)).unwrap();
    let op = MeasurementOp::mri(KMask::full(32, 32));
    let y = op.forward(&Image::filled(32, 32, 0.3)).unwrap();
    let sched = make_schedule(100, 0.01, 378.0).unwrap();
    let rng = RngState::new(1);
    both(c, "pc_chains_8x32", || {
        run_chains(8, &rng, |r| pc_sample(&prior, &y, &op, &PcParams::default(), &sched, r)).unwrap()
    });
}

fn training_batch(c: &mut Criterion) {
    let cfg = NetConfig {
        depth: 2,
        base_channels: 16,
        deep_channels: 16,
        blocks_per_stage: 1,
        attention: false,
        fourier_scale: 1.0,
    };
    let net = ScoreNet::new(cfg, &mut RngState::new(2)).unwrap();
    let batch = make_phantoms(PhantomKind::GaussianDraws, 32, 8, &mut RngState::new(3)).unwrap();
    let sched = make_schedule(100, 0.01, 50.0).unwrap();
    both(c, "dsm_gradient_batch8", || {
        loss_and_gradient(&net, net.params(), &batch, &sched, &mut RngState::new(4)).unwrap()
    });
}

criterion_group!(benches, radon_pair, pc_chains, training_batch);
criterion_main!(benches);
