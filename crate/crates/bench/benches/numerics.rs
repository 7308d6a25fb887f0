use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pipnet::numerics::{Tape, Tensor};
use pipnet::protomodel::{ModelConfig, ProtoModel};

fn filled(shape: &[usize], seed: u32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) % 1000) as f32 / 1000.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let x = filled(&[16, 32, 16, 16], 1);
    let k = filled(&[64, 32, 3, 3], 2).with_grad();
    c.bench_function("conv2d forward 16x32x16x16 -> 64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.leaf(&k);
            black_box(tape.conv2d(xv, kv, None, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let kv = tape.leaf(&k);
            let y = tape.conv2d(xv, kv, None, 1, 1).unwrap();
            let loss = tape.mean(y);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn forward(c: &mut Criterion) {
    let model = ProtoModel::new(ModelConfig::default(), 1).unwrap();
    let size = model.config().image_size;
    let images: Vec<Tensor> = (0..16).map(|i| filled(&[3, size, size], i)).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    c.bench_function("model encode batch of 16 (64x64)", |b| {
        b.iter(|| black_box(model.encode_batch(&refs).unwrap()))
    });
}

criterion_group!(benches, conv, forward);
criterion_main!(benches);
