use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use distillkit::data::{synth_blobs, BlobSpec};
use distillkit::losses::LossSpec;
use distillkit::nn::{Architecture, Model, ModelDescriptor};
use distillkit::optim::Sgd;
use distillkit::trainer::{train_step, FrozenTeacher};
use distillkit::{Tape, Tensor};

fn filled(shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product::<usize>();
    Tensor::new(shape, (0..n).map(|i| (i as f64 * 0.37).sin() * scale).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 128, 256] {
        let a = filled(vec![n, n], 1.0);
        let b = filled(vec![n, n], 0.5);
        g.bench_with_input(BenchmarkId::new("forward+backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let va = tape.leaf(&a.clone().with_grad());
                let vb = tape.leaf(&b.clone().with_grad());
                let y = tape.matmul(va, vb).unwrap();
                let s = tape.sum_all(y).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let (n, k) = (64, 100);
    let logits = filled(vec![n, k], 3.0);
    let teacher = filled(vec![n, k], 2.0);
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let specs = [
        ("ce", LossSpec::cross_entropy()),
        ("lsr", LossSpec::lsr(0.1)),
        ("kd", LossSpec::kd(0.9, 20.0)),
        ("tf-reg", LossSpec::tf_reg(0.1, 20.0, 0.99)),
    ];
    let mut g = c.benchmark_group("loss_64x100");
    for (name, spec) in specs {
        let t = spec.needs_teacher().then_some(&teacher);
        g.bench_function(name, |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let z = tape.leaf(&logits.clone().with_grad());
                let l = spec.compute(&mut tape, z, &labels, t).unwrap();
                black_box(tape.backward(l).unwrap());
            })
        });
    }
    g.finish();
}

fn train_steps(c: &mut Criterion) {
    let spec = BlobSpec {
        classes: 10,
        n_per_class: 20,
        dim: 32,
        spread: 0.33,
    };
    let (train, _) = synth_blobs(&spec, 0).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let (x, y) = train.gather(&idx).unwrap();
    let desc = ModelDescriptor::new(Architecture::small_mlp(), vec![32], 10).unwrap();
    let teacher = FrozenTeacher::new(Model::build(&desc, 9).unwrap());

    let mut g = c.benchmark_group("train_step_small_mlp_b64");
    let cases = [
        ("ce", LossSpec::cross_entropy(), false),
        ("tf-reg", LossSpec::tf_reg(0.1, 20.0, 0.99), false),
        ("kd", LossSpec::kd(0.9, 20.0), true),
    ];
    for (name, loss, with_teacher) in cases {
        let mut model = Model::build(&desc, 1).unwrap();
        let mut opt = Sgd::new(model.params(), 0.9, 5e-4);
        let t = with_teacher.then_some(&teacher);
        g.bench_function(name, |bench| {
            bench.iter(|| black_box(train_step(&mut model, &mut opt, &x, &y, &loss, t, 0.01).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, losses, train_steps);
criterion_main!(benches);
