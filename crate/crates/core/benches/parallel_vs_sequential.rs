use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use looped_icl::dynamics::{scan_dominance, DominanceConfig};
use looped_icl::loss::{closedform_loss, compact_loss, CovarianceBatch, Mc};
use looped_icl::matkernel::SymMatrix;
use looped_icl::model::LoopedParams;
use looped_icl::par::Exec;
use looped_icl::tasks::TaskDistribution;
use nalgebra::DVector;

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn losses(c: &mut Criterion) {
    let dist = TaskDistribution::isotropic(10, 40, 7).unwrap();
    let a = SymMatrix::identity(10).scale(0.5);
    let p = LoopedParams::new(a.clone(), DVector::zeros(10), 5).unwrap();
    let mut g = c.benchmark_group("closedform_loss");
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| closedform_loss(&a, 5, &dist, Mc::new(4000).with_exec(e)))
        });
    }
    g.finish();
    let mut g = c.benchmark_group("compact_loss");
    for (name, exec) in EXECS {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| compact_loss(&p, &dist, Mc::new(4000).with_exec(e)))
        });
    }
    g.finish();
    let mut g = c.benchmark_group("loss_and_grad");
    for (name, exec) in EXECS {
        let batch = CovarianceBatch::sample(&dist, Mc::new(4000).with_exec(exec));
        g.bench_function(name, |b| b.iter(|| batch.loss_and_grad(&a, 5)));
    }
    g.finish();
}

fn dominance(c: &mut Criterion) {
    let dist = TaskDistribution::isotropic(3, 64, 11).unwrap();
    let mut g = c.benchmark_group("scan_dominance");
    g.sample_size(10);
    for (name, exec) in EXECS {
        let cfg = DominanceConfig { trials: 40, m: 500, min_samples: 1, exec, ..DominanceConfig::default() };
        g.bench_function(name, |b| b.iter(|| scan_dominance(&dist, 2, &cfg)));
    }
    g.finish();
}

criterion_group!(benches, losses, dominance);
criterion_main!(benches);
