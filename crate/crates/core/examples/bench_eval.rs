//! Rough timing of model evaluation and a training step.
use asyrp::denoiser::{DenoiserConfig, DenoiserModel};
use asyrp::diffusion::{q_sample, NoiseSchedule};
use asyrp::numerics::{Tape, Tensor};
use asyrp::rng::Rng;
use std::time::Instant;

fn main() {
    let model = DenoiserModel::new(DenoiserConfig::default(), 1).unwrap();
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let mut rng = Rng::seed(2);
    let x0 = Tensor::randn(&[1, 16, 16], &mut rng);
    let noise = Tensor::randn(&[1, 16, 16], &mut rng);
    let x_t = q_sample(&schedule, &x0, 100, &noise).unwrap();

    let t0 = Instant::now();
    let n = 50;
    for _ in 0..n {
        let _ = model.predict_eps(&x_t, 100).unwrap();
    }
    println!("forward: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::with_capacity(256);
        let bound = model.bind_leaves(&mut tape);
        let xv = tape.constant(x_t.clone());
        let (eps, _) = model.forward(&mut tape, &bound, xv, 100, None).unwrap();
        let tv = tape.constant(noise.clone());
        let d = tape.sub(eps, tv).unwrap();
        let sq = tape.mul(d, d).unwrap();
        let loss = tape.mean(sq).unwrap();
        let _ = tape.backward(loss).unwrap();
    }
    println!("fwd+bwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
