//! Final combination recipe search on the cached fixture model.
use asyrp::denoiser::DenoiserModel;
use asyrp::diffusion::NoiseSchedule;
use asyrp::glyphdata::{generate, Attribute, Split};
use asyrp::guidance::{measure_attribute, EditDirection, Embedder, PromptSpec, Strength};
use asyrp::numerics::Tensor;
use asyrp::pipeline::*;
use asyrp::scheduler::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cache = &args[1];
    let n_train: usize = args[2].parse().unwrap();
    let recon_r: f64 = args[3].parse().unwrap();
    let k_r: usize = args[4].parse().unwrap();
    let recon_b: f64 = args[5].parse().unwrap();
    let k_b: usize = args[6].parse().unwrap();

    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let dataset = generate(2000, 1, 16).unwrap();
    let model = DenoiserModel::load_checkpoint(format!("{cache}/model.ckpt")).unwrap();
    let held = dataset.indices(Split::HeldOut);
    let train_idx = dataset.indices(Split::Train);
    let metric = PerceptualMetric::new(16, 99).unwrap();
    let curve_images: Vec<Tensor> =
        held.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let thresholds = calibrate_thresholds(&metric, &curve_images, 3).unwrap();
    let sub = asyrp::diffusion::Subsequence::linear(200, 25).unwrap();
    let curve = perceptual_curve(&schedule, &model, &metric, &curve_images, &sub).unwrap();
    let plan = build_plan(&curve, &thresholds, 0.5, 25, 25, vec![1.0, 1.0], 1234);
    println!("plan t_edit {} t_boost {}", plan.t_edit, plan.t_boost);

    let train_images: Vec<Tensor> =
        train_idx.iter().take(n_train).map(|&i| dataset.images[i].clone()).collect();
    let store = precompute_latents(&schedule, &model, &train_images, 25, None).unwrap();
    let embedder = Embedder::calibrate(16, 2024).unwrap();
    let mk = |attr: Attribute, recon: f64, k: usize, seed: u64| {
        let prompt = PromptSpec::new(attr, EditDirection::Increase)
            .with_strength(Strength::Similarity(0.5));
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
    fr.save(format!("{cache}/cand_radius.bin")).unwrap();
    fb.save(format!("{cache}/cand_bright.bin")).unwrap();

    let mut both = 0;
    let mut fails = Vec::new();
    for (k, &idx) in held.iter().take(50).enumerate() {
        let x0 = &dataset.images[idx];
        let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
        let out = edit(&schedule, &model, x0, &[(&fr, 1.0), (&fb, 1.0)], &plan).unwrap();
        let r1 = measure_attribute(&out.image, Attribute::Radius).unwrap().value;
        let b1 = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
        if r1 > r0 && b1 > b0 {
            both += 1;
        } else {
            fails.push(format!("{k}: dr {:+.2} db {:+.2} r0 {:.2}", r1 - r0, b1 - b0, r0));
        }
    }
    println!("N{n_train} rr{recon_r} K{k_r} rb{recon_b} K{k_b}: both {both}/50");
    for f in fails {
        println!("  {f}");
    }
}
