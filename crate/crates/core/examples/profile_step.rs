use attriprior::kernels::{conv2d, conv2d_back_input, conv2d_back_weight, ConvMeta};
use attriprior::tensor::Tensor;
use std::time::Instant;

fn bench(name: &str, flops: f64, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 1.0 {
        f();
        n += 1;
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("{name}: {:.2} ms, {:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);
}

fn main() {
    // Stage-1 conv: (16,8,64,64) x (8,8,3,3)
    let x = Tensor::<f32>::filled(&[16, 8, 64, 64], 0.5);
    let w = Tensor::<f32>::filled(&[8, 8, 3, 3], 0.1);
    let meta = ConvMeta::from_shapes(x.shape(), w.shape(), 1, 1);
    let flops = 2.0 * 16.0 * 8.0 * 8.0 * 64.0 * 64.0 * 9.0;
    let y = conv2d(&x, &w, &meta);
    bench("conv fwd s1", flops, || { let _ = conv2d(&x, &w, &meta); });
    bench("conv CBI s1", flops, || { let _ = conv2d_back_input(&y, &w, &meta); });
    bench("conv CBW s1", flops, || { let _ = conv2d_back_weight(&x, &y, &meta); });

    // Stage-2 entry: (16,8,64,64) x (16,8,3,3) stride 2
    let w2 = Tensor::<f32>::filled(&[16, 8, 3, 3], 0.1);
    let meta2 = ConvMeta::from_shapes(x.shape(), w2.shape(), 2, 1);
    let y2 = conv2d(&x, &w2, &meta2);
    let flops2 = 2.0 * 16.0 * 16.0 * 8.0 * 32.0 * 32.0 * 9.0;
    bench("conv fwd s2", flops2, || { let _ = conv2d(&x, &w2, &meta2); });
    bench("conv CBI s2", flops2, || { let _ = conv2d_back_input(&y2, &w2, &meta2); });

    // Full training step timing breakdown
    use attriprior::datagen::{generate_synthetic_dataset, SynthConfig};
    use attriprior::trainer::{train, TrainConfig};
    use attriprior::losses::Method;
    let data = generate_synthetic_dataset(&SynthConfig { n_train: 64, n_valid: 16, n_test: 16, ..Default::default() }).unwrap();
    let cfg = TrainConfig { max_epochs: 2, seed: 0, ..TrainConfig::synthetic_defaults(Method::Baseline) };
    let t0 = Instant::now();
    let _ = train::<f32>(&cfg, &data).unwrap();
    println!("2 epochs x 4 steps of 64-sample train: {:.2}s", t0.elapsed().as_secs_f64());
}
