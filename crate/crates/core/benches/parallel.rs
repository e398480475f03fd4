//! `par::map` against its sequential reference on the crate's hot loops.
//!
//! The `row_grads` and `mc_variance` groups run the same closure through
//! both maps. `meta_gradient` exercises the library path, which uses
//! whichever map the build selected; compare
//! `cargo bench` with `cargo bench --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use revar::bilevel::{self, InnerStep, MetaObjective, Method, Task, TrainConfig};
use revar::data::Dataset;
use revar::mcvar::{self, McConfig};
use revar::nets::{self, Activation, NetParams, OutputKind};
use revar::numkit::{Matrix, Rng};
use revar::par;

fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let x: Vec<f64> = (0..n * d).map(|_| rng.standard_normal()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    Dataset::new(Matrix::from_vec(n, d, x).unwrap(), y).unwrap()
}

fn net(d: usize, hidden: usize) -> NetParams {
    NetParams::new(&[d, hidden, 1], Activation::Relu, OutputKind::Linear, 0.2, &mut Rng::new(1)).unwrap()
}

fn row_grads(c: &mut Criterion) {
    let mut g = c.benchmark_group("row_grads");
    for &n in &[64usize, 512] {
        let data = dataset(n, 72, 2);
        let theta = net(72, 64);
        let work = |i: usize| nets::loss_grad(&theta, data.x.row(i), data.y[i], 1.0).unwrap();
        g.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| {
            b.iter(|| black_box(par::map(n, work)))
        });
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| black_box(par::map_seq(n, work)))
        });
    }
    g.finish();
}

fn mc_variance(c: &mut Criterion) {
    let mut g = c.benchmark_group("mc_variance");
    let data = dataset(256, 72, 3);
    let theta = net(72, 64);
    let mc = McConfig::default();
    let root = Rng::new(4);
    let work = |i: usize| {
        let mut r = root.derive(i as u64);
        mcvar::dropout_variance(&theta, data.x.row(i), &mc, &mut r).unwrap()
    };
    g.bench_function("parallel", |b| b.iter(|| black_box(par::map(data.len(), work))));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_seq(data.len(), work))));
    g.finish();
}

fn meta_gradient(c: &mut Criterion) {
    let train = dataset(64, 72, 5);
    let val = dataset(64, 72, 6);
    let cfg = TrainConfig::default();
    let theta = bilevel::init_classifier(Task::Regression, 72, &cfg).unwrap();
    let meta = bilevel::init_meta(Method::Revar, 72, &cfg).unwrap().unwrap();
    let objective = MetaObjective::sample(&theta, &val, None, &cfg.mc, 1.0, &mut Rng::new(7));
    let label = if par::is_parallel() { "parallel" } else { "sequential" };
    c.bench_function(&format!("meta_gradient/{label}"), |b| {
        b.iter(|| {
            black_box(
                bilevel::meta_gradient_with(&theta, &train, &objective, &meta, InnerStep::normalized(0.01)).unwrap(),
            )
        })
    });
}

criterion_group!(benches, row_grads, mc_variance, meta_gradient);
criterion_main!(benches);
