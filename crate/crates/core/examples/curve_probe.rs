//! Curve monotonicity vs sample count and subset.
use asyrp::denoiser::DenoiserModel;
use asyrp::diffusion::{NoiseSchedule, Subsequence};
use asyrp::glyphdata::{generate, Split};
use asyrp::numerics::Tensor;
use asyrp::scheduler::{perceptual_curve, PerceptualMetric};

fn dips(d: &[f64]) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for i in 1..d.len() {
        if d[i] < d[i - 1] {
            out.push((i, d[i - 1] - d[i]));
        }
    }
    out
}

fn main() {
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let dataset = generate(2000, 1, 16).unwrap();
    let model = DenoiserModel::load_checkpoint("target/probe_model.ckpt").unwrap();
    let metric = PerceptualMetric::new(16, 99).unwrap();
    let sub = Subsequence::linear(200, 25).unwrap();
    let held = dataset.indices(Split::HeldOut);

    for (name, lo, n) in [("held 0..50", 0usize, 50usize), ("held 50..100", 50, 50), ("held 0..100", 0, 100), ("held 0..200", 0, 200)] {
        let images: Vec<Tensor> =
            held.iter().skip(lo).take(n).map(|&i| dataset.images[i].clone()).collect();
        let curve = perceptual_curve(&schedule, &model, &metric, &images, &sub).unwrap();
        println!("{name}: pred dips {:?}", dips(&curve.d_pred));
        println!("{name}: latent dips {:?}", dips(&curve.d_latent));
    }
}
