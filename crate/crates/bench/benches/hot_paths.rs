use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use surfnerf_core::encoding::{encode_into, encoded_dim};
use surfnerf_core::field::{self, ArchConfig, Model, ModelKind};
use surfnerf_core::geometry::{bin_edges, hierarchical_samples, stratified_samples};
use surfnerf_core::render::{alphas_from_sigma, composite};
use surfnerf_core::rng::{stream, CounterRng};
use ndarray::Array2;

fn small_arch() -> ArchConfig {
    ArchConfig {
        kind: ModelKind::Nerf,
        trunk_depth: 2,
        trunk_width: 32,
        skip_layer: None,
        head_width: 16,
        use_viewdirs: true,
        sun_head_uses_viewdirs: true,
        sun_depth: 2,
        sun_width: 16,
        sky_width: 16,
        enc: surfnerf_core::encoding::EncodingConfig { l_pos: 6, l_dir: 2, include_identity: true },
    }
}

fn encoded_batch(arch: &ArchConfig, n: usize, seed: u64) -> (Array2<f32>, Array2<f32>) {
    let mut rng = CounterRng::new(seed, stream::TEST, 0);
    let xd = encoded_dim(3, arch.enc.l_pos, true);
    let dd = encoded_dim(3, arch.enc.l_dir, true);
    let mut xs = vec![0.0f32; n * xd];
    let mut ds = vec![0.0f32; n * dd];
    for i in 0..n {
        let p = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        encode_into(&p, arch.enc.l_pos, true, &mut xs[i * xd..(i + 1) * xd]);
        encode_into(&[0.1, 0.2, -0.97], arch.enc.l_dir, true, &mut ds[i * dd..(i + 1) * dd]);
    }
    (
        Array2::from_shape_vec((n, xd), xs).unwrap(),
        Array2::from_shape_vec((n, dd), ds).unwrap(),
    )
}

fn bench_field(c: &mut Criterion) {
    let arch = small_arch();
    let model = Model::<f32>::init(arch.clone(), false, 1).unwrap();
    let n = 8192;
    let (x, d) = encoded_batch(&arch, n, 3);

    c.bench_function("field_forward_8192", |b| {
        b.iter(|| {
            let fwd = field::forward(&model.coarse(), x.clone(), Some(d.clone()), None);
            black_box(fwd.sigma_slice()[0]);
        })
    });

    c.bench_function("field_forward_backward_8192", |b| {
        b.iter(|| {
            let fwd = field::forward(&model.coarse(), x.clone(), Some(d.clone()), None);
            let d_sigma = Array2::from_elem((n, 1), 0.5f32);
            let d_rgb = Array2::from_elem((n, 3), 0.25f32);
            let mut grads = vec![0.0f32; model.net_len()];
            field::backward(&model.coarse(), &fwd, &d_sigma, &d_rgb, None, &mut grads);
            black_box(grads[0]);
        })
    });
}

fn bench_render(c: &mut Criterion) {
    let mut rng = CounterRng::new(9, stream::TEST, 0);
    let n = 64;
    let sigma: Vec<f32> = (0..n).map(|_| rng.uniform(0.0, 4.0) as f32).collect();
    let delta = vec![0.02f32; n];
    let rgb: Vec<f32> = (0..3 * n).map(|_| rng.uniform(0.0, 1.0) as f32).collect();

    c.bench_function("composite_64_samples", |b| {
        b.iter(|| {
            let mut alpha = vec![0.0f32; n];
            alphas_from_sigma(&sigma, &delta, &mut alpha);
            black_box(composite(&alpha, &rgb).color)
        })
    });
}

fn bench_sampling(c: &mut Criterion) {
    let edges = bin_edges(0.0, 1.0, 64);
    let weights: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect();

    c.bench_function("stratified_64", |b| {
        let mut rng = CounterRng::new(1, stream::TEST, 0);
        b.iter(|| black_box(stratified_samples(0.0, 1.0, 64, Some(&mut rng)).unwrap().t[0]))
    });

    c.bench_function("hierarchical_64_of_64", |b| {
        let mut rng = CounterRng::new(2, stream::TEST, 0);
        b.iter(|| black_box(hierarchical_samples(&edges, &weights, 64, Some(&mut rng))[0]))
    });
}

criterion_group!(benches, bench_field, bench_render, bench_sampling);
criterion_main!(benches);
