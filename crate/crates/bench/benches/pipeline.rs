//! Benchmarks for the hot paths: codebook assignment, the full forward pass
//! with losses, one optimization step, single-input encoding, and the
//! histogram distance matrix used by the analysis suite.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use imageome_core::analysis::{class_histograms, embedding_distance_matrix, Segment};
use imageome_core::quantizer::Codebook;
use imageome_core::trainer::{TrainConfig, Trainer};
use imageome_core::{CodecConfig, Imageome, PhyloCodec, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn model() -> PhyloCodec {
    let cfg = CodecConfig::new(6, 9, 4, 2, 3, 4, 1, 8, 6, vec![2, 4, 6]);
    PhyloCodec::init(cfg, 7).unwrap()
}

fn batch(model: &PhyloCodec, n: usize, seed: u64) -> (Vec<Tensor>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [model.cfg.c_in, model.cfg.h_in, model.cfg.w_in];
    let xs: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut rng, &shape)).collect();
    let labels: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            model
                .cfg
                .class_counts
                .iter()
                .map(|&c| rng.gen_range(0..c))
                .collect()
        })
        .collect();
    (xs, labels)
}

fn bench_codebook_assign(c: &mut Criterion) {
    let cb = Codebook::init(64, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = rand_tensor(&mut rng, &[1024, 8]);
    c.bench_function("codebook_assign_1024x8_64codes", |b| {
        b.iter(|| cb.assign(std::hint::black_box(&z)).unwrap())
    });
}

fn bench_forward_batch(c: &mut Criterion) {
    let m = model();
    let (xs, labels) = batch(&m, 32, 3);
    c.bench_function("forward_batch_32", |b| {
        b.iter(|| m.forward_batch(&xs, &labels, true).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (xs, labels) = batch(&model(), 32, 4);
    c.bench_function("train_step_32", |b| {
        b.iter_batched(
            || (model(), Trainer::new(TrainConfig::default())),
            |(mut m, mut tr)| tr.train_step(&mut m, &xs, &labels).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_encode(c: &mut Criterion) {
    let m = model();
    let (xs, _) = batch(&m, 1, 5);
    c.bench_function("encode_single", |b| {
        b.iter(|| m.encode(std::hint::black_box(&xs[0])).unwrap())
    });
}

fn bench_distance_matrix(c: &mut Criterion) {
    let m = model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n_codes = m.cfg.n_q;
    let n_locs = m.cfg.n_l * m.cfg.n_p + m.cfg.n_np;
    // 8 classes x 50 sequences of random codes
    let hists: Vec<_> = (0..8)
        .map(|k| {
            let ims: Vec<Imageome> = (0..50)
                .map(|_| {
                    let flat: Vec<usize> =
                        (0..n_locs).map(|_| rng.gen_range(0..n_codes)).collect();
                    Imageome::from_flat(&flat, m.cfg.n_l, m.cfg.n_p, m.cfg.n_np).unwrap()
                })
                .collect();
            class_histograms(&format!("class{k}"), &ims, n_codes).unwrap()
        })
        .collect();
    c.bench_function("js_distance_matrix_8x8", |b| {
        b.iter(|| embedding_distance_matrix(std::hint::black_box(&hists), Segment::PhyloFull).unwrap())
    });
}

criterion_group!(
    benches,
    bench_codebook_assign,
    bench_forward_batch,
    bench_train_step,
    bench_encode,
    bench_distance_matrix
);
criterion_main!(benches);
