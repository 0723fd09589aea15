//! Isolate conv3x3 kernel throughput.
use asyrp::numerics::kernels::conv3x3;
use asyrp::numerics::Tensor;
use asyrp::rng::Rng;
use std::time::Instant;

fn main() {
    let mut rng = Rng::seed(1);
    let x = Tensor::randn(&[32, 16, 16], &mut rng);
    let k = Tensor::randn(&[32, 32, 3, 3], &mut rng);
    let n = 200;
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = conv3x3(&x, &k).unwrap();
    }
    let ms = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
    let flops = 32.0 * 32.0 * 256.0 * 9.0 * 2.0;
    println!("conv3x3 [32,16,16]x[32]: {:.3} ms, {:.2} Gflop/s", ms, flops / ms / 1e6);
}
