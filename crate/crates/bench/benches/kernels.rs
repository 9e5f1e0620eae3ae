use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use threshcox::mpple::phi_tilde_grad;
use threshcox::pl_engine::{evaluate, InducedRiskModel, EXPONENT_CAP};
use threshcox::{Order, SubstitutionPair, ThetaParams};
use threshcox_bench::common_cohort;

fn likelihood(c: &mut Criterion) {
    let (cohort, model) = common_cohort(3000, 2);
    let theta = [0.4, 0.7, 0.1];
    let naive = SubstitutionPair::naive(&cohort);
    let induced = InducedRiskModel::new(&cohort, &model);
    let mut g = c.benchmark_group("partial_likelihood_3000");
    for (name, order) in [
        ("value", Order::Value),
        ("gradient", Order::Gradient),
        ("hessian", Order::Hessian),
    ] {
        g.bench_function(format!("naive_{name}"), |b| {
            b.iter(|| evaluate(&cohort, &naive, black_box(&theta), order, EXPONENT_CAP).unwrap())
        });
        g.bench_function(format!("induced_{name}"), |b| {
            b.iter(|| evaluate(&cohort, &induced, black_box(&theta), order, EXPONENT_CAP).unwrap())
        });
    }
    g.finish();
}

fn integrands(c: &mut Criterion) {
    let (_, model) = common_cohort(10, 3);
    let post = model.posterior(0.3, &[]);
    let theta = ThetaParams::new(vec![], 0.4, 0.7, 0.1);
    c.bench_function("induced_log_risk", |b| {
        b.iter(|| post.induced_log_risk(black_box(0.4), 0.7, 0.1))
    });
    c.bench_function("phi_tilde_grad", |b| {
        b.iter(|| phi_tilde_grad(&theta, &[], post, black_box(0.8)).unwrap())
    });
}

criterion_group!(benches, likelihood, integrands);
criterion_main!(benches);
