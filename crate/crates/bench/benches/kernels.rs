use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use sedkit::dists::IsotropicGaussian;
use sedkit::env::{ConjugateGaussianTask, Environment, SourceLocationTask};
use sedkit::estimators::{rollout_policy, scee, spce, AnalyticGaussianPosterior, RandomPolicy};
use sedkit::flows::{FlowConfig, PosteriorNet};
use sedkit::grad::{logsumexp_slice, Graph, ParamStore, Tensor};
use sedkit::{HistoryBatch, Rng};

fn logsumexp(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let xs: Vec<f64> = (0..10_001).map(|_| 30.0 * rng.standard_normal()).collect();
    c.bench_function("logsumexp_10001", |b| b.iter(|| logsumexp_slice(black_box(&xs))));
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let mut fill = |r, k| Tensor::matrix(r, k, (0..r * k).map(|_| rng.standard_normal()).collect()).unwrap();
    let (a, w) = (fill(256, 64), fill(64, 64));
    c.bench_function("matmul_256x64x64_fwd_bwd", |b| {
        b.iter_batched(
            Graph::new,
            |mut g| {
                let (x, y) = (g.variable(a.clone()), g.variable(w.clone()));
                let p = g.matmul(x, y).unwrap();
                let s = g.sum(p).unwrap();
                g.backward(s).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn estimators(c: &mut Criterion) {
    let env = Environment::new(ConjugateGaussianTask::new(10, 0.0, 0.5, 1.0).unwrap(), 10).unwrap();
    let ro = rollout_policy(&env, &RandomPolicy, &Rng::new(2), 100).unwrap();
    let q = AnalyticGaussianPosterior::new(IsotropicGaussian::new(vec![0.0; 10], 0.5).unwrap(), 1.0);
    let mut g = c.benchmark_group("estimators");
    g.sample_size(10);
    g.bench_function("spce_n100_L1000", |b| b.iter(|| spce(&ro, &env, 1_000, &Rng::new(3)).unwrap()));
    g.bench_function("scee_analytic_n100", |b| {
        b.iter(|| scee(&ro, &q, env.prior().entropy(), &env, 0).unwrap())
    });
    g.finish();
}

fn flow_log_prob(c: &mut Criterion) {
    let env = Environment::new(SourceLocationTask::default(), 10).unwrap();
    let mut store = ParamStore::new();
    let net = PosteriorNet::new(&env, &FlowConfig::default(), &mut store, &mut Rng::new(4)).unwrap();
    let ro = rollout_policy(&env, &RandomPolicy, &Rng::new(5), 256).unwrap();
    let feats: Vec<Vec<f64>> = ro.rollouts.iter().map(|r| r.history.features(&env)).collect();
    let refs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
    let batch = HistoryBatch::new(env.feature_dim(), &refs).unwrap();
    let thetas: Vec<&[f64]> = ro.rollouts.iter().map(|r| r.theta.as_slice()).collect();
    c.bench_function("flow_log_prob_batch256_T10", |b| {
        b.iter(|| net.log_prob(&store, &thetas, &batch).unwrap())
    });
}

criterion_group!(benches, logsumexp, matmul, estimators, flow_log_prob);
criterion_main!(benches);
