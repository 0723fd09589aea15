//! Combination tuning: direction strength x interval width.
use asyrp::denoiser::DenoiserModel;
use asyrp::diffusion::NoiseSchedule;
use asyrp::glyphdata::{generate, Attribute, Split};
use asyrp::guidance::{measure_attribute, EditDirection, Embedder, PromptSpec, Strength};
use asyrp::numerics::Tensor;
use asyrp::pipeline::*;
use asyrp::scheduler::*;

fn main() {
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let dataset = generate(2000, 1, 16).unwrap();
    let model = DenoiserModel::load_checkpoint("target/probe_model.ckpt").unwrap();
    let metric = PerceptualMetric::new(16, 99).unwrap();
    let held = dataset.indices(Split::HeldOut);
    let train_idx = dataset.indices(Split::Train);
    let images: Vec<Tensor> =
        held.iter().take(20).map(|&i| dataset.images[i].clone()).collect();
    let curve_images: Vec<Tensor> =
        held.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let thresholds = calibrate_thresholds(&metric, &curve_images, 3).unwrap();
    let sub = asyrp::diffusion::Subsequence::linear(200, 25).unwrap();
    let curve = perceptual_curve(&schedule, &model, &metric, &curve_images, &sub).unwrap();
    let train_images: Vec<Tensor> =
        train_idx.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let store = precompute_latents(&schedule, &model, &train_images, 25, None).unwrap();
    let embedder = Embedder::calibrate(16, 2024).unwrap();

    let combo = |sim: f64, recon_r: f64, k_r: usize, recon_b: f64, k_b: usize| {
        let plan = build_plan(&curve, &thresholds, sim, 25, 25, vec![1.0, 1.0], 1234);
        let mk = |attr: Attribute, recon: f64, k: usize, seed: u64| {
            let prompt = PromptSpec::new(attr, EditDirection::Increase)
                .with_strength(Strength::Similarity(sim));
            let dcfg = DirectionTrainConfig {
                seed,
                epochs: k,
                lambda_recon: Some(recon),
                ..Default::default()
            };
            train_direction(&schedule, &model, &embedder, &store, &prompt, &plan, &dcfg)
                .unwrap()
                .0
        };
        let fr = mk(Attribute::Radius, recon_r, k_r, 5);
        let fb = mk(Attribute::Brightness, recon_b, k_b, 6);
        let mut r_pos = 0;
        let mut b_pos = 0;
        let mut both = 0;
        for x0 in &images {
            let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
            let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
            let out = edit(&schedule, &model, x0, &[(&fr, 1.0), (&fb, 1.0)], &plan).unwrap();
            let r1 = measure_attribute(&out.image, Attribute::Radius).unwrap().value;
            let b1 = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
            if r1 > r0 { r_pos += 1; }
            if b1 > b0 { b_pos += 1; }
            if r1 > r0 && b1 > b0 { both += 1; }
        }
        println!(
            "sim {sim} t_edit {} recon_r {recon_r} K{k_r} recon_b {recon_b} K{k_b}: r {r_pos}/20 b {b_pos}/20 both {both}/20",
            plan.t_edit
        );
    };

    combo(0.67, 0.5, 5, 1.0, 3);
    combo(0.5, 1.0, 3, 1.0, 3);
    combo(0.5, 0.5, 5, 0.5, 5);
    combo(0.4, 1.0, 3, 1.0, 3);
}
