//! Fixtures shared by the benchmarks under `benches/`: the default benchmark
//! task, a trainer on it, and a sampled batch.

use crma_core::data::BatchSampler;
use crma_core::rng::{substream, Stream};
use crma_core::{generate_task, DomainBatch, Matrix, Task, TaskSpec, TrainConfig, Trainer};
use rand::Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = substream(seed, Stream::Data);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// The default two-moons benchmark, shrunk to `samples` per domain.
pub fn task(samples: usize) -> Task {
    let spec = TaskSpec {
        samples_per_domain: samples,
        ..TaskSpec::default_benchmark()
    };
    generate_task(&spec).expect("valid benchmark task")
}

pub fn trainer(task: &Task) -> Trainer {
    let config = TrainConfig::default();
    let arch = config.architecture(task.dim(), task.num_sources(), task.num_classes);
    Trainer::new(config, arch).expect("valid default config")
}

pub fn batch(task: &Task) -> DomainBatch {
    let batch = TrainConfig::default().batch_per_domain;
    BatchSampler::seeded(&task.sources, &task.target, batch, 0)
        .expect("domains hold a full batch")
        .next_batch()
}
