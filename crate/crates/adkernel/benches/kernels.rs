use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use adkernel::{Activation, Graph, Tensor};

fn mode() -> &'static str {
    if adkernel::par::is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("matmul/{}", mode()));
    for &(m, k, n) in &[(512usize, 256usize, 256usize), (4096, 144, 64)] {
        let a = Tensor::<f32>::from_fn(&[m, k], |i| (i % 7) as f32 * 0.1);
        let b = Tensor::<f32>::from_fn(&[n, k], |i| (i % 5) as f32 * 0.1);
        group.bench_function(format!("{m}x{k}x{n}"), |bch| {
            bch.iter(|| {
                let mut g = Graph::new();
                let av = g.constant(a.clone());
                let bv = g.constant(b.clone());
                black_box(g.matmul_nt(av, bv).unwrap());
            })
        });
    }
    group.finish();
}

fn bench_linear_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group(format!("linear_fwd_bwd/{}", mode()));
    let (m, inw, outw) = (4096usize, 144usize, 64usize);
    let x = Tensor::<f32>::from_fn(&[m, inw], |i| (i % 11) as f32 * 0.01);
    let w = Tensor::<f32>::from_fn(&[outw, inw], |i| (i % 13) as f32 * 0.01);
    let b = Tensor::<f32>::zeros(&[1, outw]);
    group.bench_function(format!("{m}x{inw}->{outw}"), |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(w.clone(), true);
            let bv = g.leaf(b.clone(), true);
            let h = g.linear(xv, wv, Some(bv), Activation::Relu).unwrap();
            let loss = g.mean_all(h);
            black_box(g.backward(loss).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_linear_backward);
criterion_main!(benches);
