use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zvos_core::{parallel, Tape, Tensor};

fn conv_step(x: &Tensor, w: &Tensor, b: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone());
    let bv = tape.leaf(b.clone());
    let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
    let l = tape.mean(y);
    tape.backward(l).unwrap();
    tape.grad(wv).data()[0]
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    for &(ch, side) in &[(32usize, 32usize), (64, 16)] {
        let x = Tensor::uniform(&[4, ch, side, side], -1.0, 1.0, &mut rng);
        let w = Tensor::normal(&[16, ch, 3, 3], 0.1, &mut rng);
        let b = Tensor::zeros(&[16]);
        for (label, on) in [("sequential", false), ("parallel", true)] {
            group.bench_with_input(BenchmarkId::new(label, format!("{ch}x{side}")), &(), |bench, _| {
                parallel::set_enabled(on);
                bench.iter(|| conv_step(&x, &w, &b));
            });
        }
    }
    group.finish();
    parallel::set_enabled(true);
}

fn upsample(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[4, 32, 16, 16], 0.0, 1.0, &mut rng);
    let mut group = c.benchmark_group("upsample_x2");
    for (label, on) in [("sequential", false), ("parallel", true)] {
        group.bench_function(label, |bench| {
            parallel::set_enabled(on);
            bench.iter(|| {
                let mut tape = Tape::new();
                let v = tape.leaf(x.clone());
                let u = tape.upsample(v, 32, 32).unwrap();
                let l = tape.mean(u);
                tape.backward(l).unwrap();
            });
        });
    }
    group.finish();
    parallel::set_enabled(true);
}

criterion_group!(benches, conv, upsample);
criterion_main!(benches);
