use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use qunet_core::ops::conv2d;
use qunet_core::pack::{pack_bits, unpack_bits};
use qunet_core::runtime::export_int_model;
use qunet_core::{QuantUNet, Tensor, UNetConfig};

fn ramp(shape: [usize; 4], scale: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919 % 1000) as f32 / 1000.0 - 0.5) * scale)
}

fn bench_conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for &(ch, size) in &[(16usize, 64usize), (64, 32)] {
        let x = ramp([4, ch, size, size], 1.0);
        let k = ramp([ch, ch, 3, 3], 0.1);
        let b = Tensor::zeros([ch]);
        g.throughput(Throughput::Elements((4 * ch * ch * 9 * size * size) as u64));
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{ch}ch_{size}px")),
            &(),
            |bench, _| bench.iter(|| conv2d(black_box(&x), &k, &b, 1).unwrap()),
        );
    }
    g.finish();
}

fn bench_pack(c: &mut Criterion) {
    let mut g = c.benchmark_group("pack");
    let n = 1 << 20;
    for bits in [2u32, 4, 5, 8] {
        let q = (1i32 << (bits - 1)) - 1;
        let values: Vec<i32> = (0..n).map(|i| (i as i32 * 31) % (2 * q + 1) - q).collect();
        let packed = pack_bits(&values, bits).unwrap();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(
            BenchmarkId::new("pack_bits", bits),
            &bits,
            |bench, &bits| bench.iter(|| pack_bits(black_box(&values), bits).unwrap()),
        );
        g.bench_with_input(
            BenchmarkId::new("unpack_bits", bits),
            &bits,
            |bench, &bits| bench.iter(|| unpack_bits(black_box(&packed), bits, n).unwrap()),
        );
    }
    g.finish();
}

fn bench_int_forward(c: &mut Criterion) {
    let mut model = QuantUNet::build(UNetConfig::with_base(8), 0).unwrap();
    model.set_frozen(true);
    let x = ramp([1, 1, 64, 64], 1.0).map(|v| v + 0.5);
    let int = export_int_model(&model, Some(&x)).unwrap();
    c.bench_function("int_forward_base8_64px", |bench| {
        bench.iter(|| int.forward(black_box(&x)).unwrap())
    });
}

criterion_group!(benches, bench_conv, bench_pack, bench_int_forward);
criterion_main!(benches);
