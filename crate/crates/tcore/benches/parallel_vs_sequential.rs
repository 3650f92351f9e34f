//! Rayon fan-out vs the forced sequential path on the three hot loops:
//! tensor matmul, frame encoding, and label propagation over a video.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tcore::encoder::{self, Binding, EncoderConfig};
use tcore::eval::{self, Features, PropagationConfig};
use tcore::parallel;
use tcore::sampling::{generate_synthetic_video, MaskSpec, ShapeSceneConfig};
use tcore::tensor::Tape;

fn with_mode<R>(sequential: bool, f: impl FnOnce() -> R) -> R {
    parallel::force_sequential(sequential);
    let out = f();
    parallel::force_sequential(false);
    out
}

fn bench_matmul(c: &mut Criterion) {
    let n = 128usize;
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let a: Vec<f32> = (0..n * n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let b: Vec<f32> = (0..n * n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let mut group = c.benchmark_group("matmul_128");
    for (label, sequential) in [("parallel", false), ("sequential", true)] {
        group.bench_function(label, |bench| {
            bench.iter_batched(
                Tape::<f32>::new,
                |mut tape| {
                    with_mode(sequential, || {
                        let ia = tape.constant(a.clone(), vec![n, n]).unwrap();
                        let ib = tape.constant(b.clone(), vec![n, n]).unwrap();
                        tape.matmul(ia, ib).unwrap()
                    })
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let params = encoder::init_params::<f32, _>(cfg, &mut rng).unwrap();
    let scene = ShapeSceneConfig { height: 32, width: 32, n_frames: 1, ..Default::default() };
    let video = generate_synthetic_video(&scene, &mut rng).unwrap();
    let frame = video.frames[0].clone();
    let mut group = c.benchmark_group("encode_32x32");
    for (label, sequential) in [("parallel", false), ("sequential", true)] {
        group.bench_function(label, |bench| {
            bench.iter(|| {
                with_mode(sequential, || {
                    let mut tape = Tape::<f32>::new();
                    let bound = Binding::bind(&mut tape, &params.named(), false).unwrap();
                    encoder::encode(&mut tape, &bound, &cfg, &frame, &MaskSpec::empty(16)).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_propagation(c: &mut Criterion) {
    let scene = ShapeSceneConfig { height: 64, width: 64, n_frames: 12, ..Default::default() };
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let videos: Vec<_> =
        (0..4).map(|_| generate_synthetic_video(&scene, &mut rng).unwrap()).collect();
    let prop = PropagationConfig::default();
    let mut group = c.benchmark_group("oracle_propagation_4_videos");
    group.sample_size(10);
    for (label, sequential) in [("parallel", false), ("sequential", true)] {
        group.bench_function(label, |bench| {
            bench.iter(|| {
                with_mode(sequential, || {
                    eval::evaluate_videos(&videos, &Features::Oracle, 8, &prop).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_encode, bench_propagation);
criterion_main!(benches);
