//! Benchmarks along the fitting pipeline: kernel assembly, single-tree and
//! forest fits at benchmark-relevant shapes, the GLS leaf refit, and one
//! alternating-loop iteration.

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use longrf::data::marginal_covariance;
use longrf::em::{fit, MethodSpec};
use longrf::forest::{fit_forest, ForestParams};
use longrf::kernel::KernelSpec;
use longrf::sim::{simulate_dataset, Scheme, SimulationConfig};
use longrf::tree::{fit_tree, gls_refit_leaves, TreeParams};
use longrf::VarianceComponents;

fn random_xy(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    let y = DVector::from_fn(n, |r, _| {
        x[(r, 0)] * x[(r, 0)] + x[(r, 1)].abs().sqrt() + rng.random::<f64>()
    });
    (x, y)
}

fn bench_kernels(c: &mut Criterion) {
    let times: Vec<f64> = (1..=10).map(|t| t as f64).collect();
    let mut group = c.benchmark_group("kernel_matrix");
    for (name, spec) in [
        ("bm", KernelSpec::Brownian),
        ("fbm_075", KernelSpec::FractionalBrownian { hurst: 0.75 }),
        ("ou_1", KernelSpec::OrnsteinUhlenbeck { rate: 1.0 }),
    ] {
        group.bench_function(name, |b| {
            b.iter(|| spec.matrix(black_box(&times)).unwrap())
        });
    }
    group.finish();
}

fn bench_trees(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_tree");
    group.sample_size(20);
    for (n, p, mtry) in [(160usize, 6usize, 6usize), (160, 800, 600)] {
        let (x, y) = random_xy(n, p, 42);
        let params = TreeParams {
            mtry,
            min_node_size: 5,
            bootstrap: true,
        };
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("n{n}_p{p}_mtry{mtry}")),
            &(x, y),
            |b, (x, y)| {
                b.iter(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(7);
                    fit_tree(black_box(x), black_box(y), &params, &mut rng).unwrap()
                })
            },
        );
    }
    group.finish();
}

fn bench_forest(c: &mut Criterion) {
    let (x, y) = random_xy(160, 6, 43);
    let params = ForestParams {
        n_trees: 100,
        mtry: 6,
        min_node_size: 5,
        bootstrap: true,
        seed: 3,
    };
    let mut group = c.benchmark_group("fit_forest");
    group.sample_size(10);
    group.bench_function("lowdim_100_trees", |b| {
        b.iter(|| fit_forest(black_box(&x), black_box(&y), &params).unwrap())
    });
    group.finish();
}

fn bench_gls_refit(c: &mut Criterion) {
    let config = SimulationConfig::low_dim(Scheme::Stochastic, 5);
    let sim = simulate_dataset(&config, 0).unwrap();
    let ds = sim.dataset;
    let vc = VarianceComponents::new(config.b.clone(), 0.8, 0.5).unwrap();
    let covs: Vec<_> = ds
        .individuals()
        .iter()
        .map(|b| marginal_covariance(b, &vc, &KernelSpec::Brownian).unwrap())
        .collect();
    let (x, y) = (ds.stacked_x(), ds.stacked_y());
    let params = TreeParams {
        mtry: 6,
        min_node_size: 5,
        bootstrap: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let template = fit_tree(&x, &y, &params, &mut rng).unwrap();

    c.bench_function("gls_refit_leaves", |b| {
        b.iter(|| {
            let mut tree = template.clone();
            gls_refit_leaves(black_box(&mut tree), &ds, &covs).unwrap()
        })
    });
}

fn bench_em(c: &mut Criterion) {
    let config = SimulationConfig::low_dim(Scheme::Stochastic, 9);
    let sim = simulate_dataset(&config, 0).unwrap();
    let mut spec = MethodSpec::sreemforest(KernelSpec::Brownian);
    spec.learner_params.n_trees = 50;
    spec.em.max_iter = 2;
    spec.em.rel_tol = 0.0;

    let mut group = c.benchmark_group("em_iterations");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    group.bench_function("sreemforest_2_iters", |b| {
        b.iter(|| fit(black_box(&sim.dataset), &spec, 21).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_kernels,
    bench_trees,
    bench_forest,
    bench_gls_refit,
    bench_em
);
criterion_main!(benches);
