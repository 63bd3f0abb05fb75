//! Sequential vs parallel execution of the data-parallel stages.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bytescope::baselines::knn_fit;
use bytescope::corpus::shuffle_split;
use bytescope::eval::{run_sweep, Algorithm, SweepPlan};
use bytescope::features::featurize_files;
use bytescope::ndmath::{seeded, DenseNet};
use bytescope::par::Exec;
use bytescope::sgan::{trunk_specs, Classifier, TrainConfig};
use bytescope::synthetic::{write_file_corpus, DirichletFamily};
use bytescope::{Histogram, Predictor};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn featurize(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    write_file_corpus(dir.path(), 40, 16 * 1024, 1).unwrap();
    let mut paths: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    let mut group = c.benchmark_group("featurize_200_files");
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| black_box(featurize_files(exec, &paths))));
    }
    group.finish();
}

fn batch_inference(c: &mut Criterion) {
    let (samples, classes) = DirichletFamily::default_with_classes(11).sample_dataset(2860, 3);
    let split = shuffle_split(samples, classes, 0.8, 42).unwrap();
    let queries: Vec<&Histogram> = split.test.iter().map(|s| &s.features).collect();

    let knn = knn_fit(&split.train, &split.classes, 3).unwrap();
    let net = DenseNet::init(&trunk_specs(11), &mut seeded(1)).unwrap();
    let classifier = Classifier::new(net, split.classes.clone()).unwrap();

    let mut group = c.benchmark_group("predict_572");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("knn_k3", name), &exec, |b, &exec| {
            b.iter(|| black_box(knn.predict_batch(&queries, exec)))
        });
        group.bench_with_input(BenchmarkId::new("classifier", name), &exec, |b, &exec| {
            b.iter(|| black_box(classifier.probabilities_batch(&queries, exec)))
        });
    }
    group.finish();
}

fn sweep_cells(c: &mut Criterion) {
    let (samples, classes) = DirichletFamily::default_with_classes(5).sample_dataset(500, 4);
    let split = shuffle_split(samples, classes, 0.8, 42).unwrap();
    let plan = SweepPlan {
        algorithms: vec![Algorithm::Tree, Algorithm::Knn(1), Algorithm::Knn(5)],
        budgets: vec![400, 100, 25],
        replicates: 2,
        master_seed: 42,
        train: TrainConfig::default(),
    };
    let mut group = c.benchmark_group("sweep_18_cells");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| black_box(run_sweep(&split, &plan, exec, |_| {}).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, featurize, batch_inference, sweep_cells);
criterion_main!(benches);
