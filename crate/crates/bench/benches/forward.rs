use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mimalloc::MiMalloc;
use pimi_core::dataset::{Event, FixedSequence, TrainingSample};
use pimi_core::model::{forward_eval, ModelConfig, ParameterSet};
use pimi_core::training::{batch_loss, NegativeSampler};
use pimi_core::{Tape, SECONDS_PER_DAY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

const NUM_ITEMS: usize = 200;

fn config() -> ModelConfig {
    ModelConfig {
        dim: 32,
        max_len: 20,
        interests: 4,
        layers: 2,
        ..ModelConfig::default()
    }
}

fn window(rng: &mut ChaCha8Rng, n: usize) -> FixedSequence {
    let len = rng.gen_range(n / 2..=n);
    let mut t = 1_600_000_000;
    let history: Vec<Event> = (0..len)
        .map(|_| {
            t += rng.gen_range(0..30 * SECONDS_PER_DAY);
            Event {
                item: rng.gen_range(1..=NUM_ITEMS),
                timestamp: t,
            }
        })
        .collect();
    FixedSequence::from_history(&history, n)
}

fn bench_forward(c: &mut Criterion) {
    let cfg = config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ParameterSet::init(&cfg, NUM_ITEMS, &mut rng);
    let seq = window(&mut rng, cfg.max_len);
    c.bench_function("forward_eval d32 n20 K4 L2", |b| {
        b.iter(|| forward_eval(black_box(&params), &cfg, black_box(&seq)).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = config();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = ParameterSet::init(&cfg, NUM_ITEMS, &mut rng);
    let samples: Vec<TrainingSample> = (0..64)
        .map(|_| TrainingSample {
            input: window(&mut rng, cfg.max_len),
            target: rng.gen_range(1..=NUM_ITEMS),
        })
        .collect();
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    let sampler = NegativeSampler::uniform(NUM_ITEMS);
    let negatives: Vec<Vec<usize>> = samples
        .iter()
        .map(|s| sampler.sample(s.target, 10, &mut rng).unwrap())
        .collect();
    c.bench_function("loss and gradients, batch 64", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(3),
            |mut drop_rng| {
                let mut tape = Tape::new();
                let vars = params.register(&mut tape);
                let loss = batch_loss(
                    &mut tape,
                    &vars,
                    &params,
                    &cfg,
                    &refs,
                    &negatives,
                    Some(&mut drop_rng),
                )
                .unwrap();
                tape.backward(loss).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_forward, bench_train_step
}
criterion_main!(benches);
