//! Edit-magnitude tuning: prompt strength, recon weight, epochs.
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
        held.iter().take(12).map(|&i| dataset.images[i].clone()).collect();
    let curve_images: Vec<Tensor> =
        held.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let thresholds = calibrate_thresholds(&metric, &curve_images, 3).unwrap();
    let sub = asyrp::diffusion::Subsequence::linear(200, 25).unwrap();
    let curve = perceptual_curve(&schedule, &model, &metric, &curve_images, &sub).unwrap();
    let train_images: Vec<Tensor> =
        train_idx.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let store = precompute_latents(&schedule, &model, &train_images, 25, None).unwrap();
    let embedder = Embedder::calibrate(16, 2024).unwrap();

    let run = |attr: Attribute, sim: f64, recon: Option<f64>, epochs: usize, c: f64| {
        let prompt = PromptSpec::new(attr, EditDirection::Increase)
            .with_strength(Strength::Similarity(sim));
        let plan = build_plan(&curve, &thresholds, sim, 25, 25, vec![1.0], 1234);
        let dcfg = DirectionTrainConfig {
            seed: 5,
            epochs,
            lambda_recon: recon,
            ..Default::default()
        };
        let (f, _) =
            train_direction(&schedule, &model, &embedder, &store, &prompt, &plan, &dcfg)
                .unwrap();
        let mut deltas = Vec::new();
        let mut pos = 0;
        for x0 in &images {
            let before = measure_attribute(x0, attr).unwrap().value;
            let out = edit(&schedule, &model, x0, &[(&f, c)], &plan).unwrap();
            let after = measure_attribute(&out.image, attr).unwrap().value;
            deltas.push(after - before);
            if after > before {
                pos += 1;
            }
        }
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        println!(
            "{:10} sim {sim} recon {recon:?} K{epochs} c{c}: t_edit {} mean {mean:+.3} pos {pos}/12",
            attr.name(),
            plan.t_edit
        );
        (f, plan)
    };

    run(Attribute::Radius, 0.9, None, 1, 1.0);
    run(Attribute::Radius, 0.67, None, 1, 1.0);
    run(Attribute::Radius, 0.67, None, 3, 1.0);
    run(Attribute::Radius, 0.67, Some(1.0), 1, 1.0);
    let (fr, plan_r) = run(Attribute::Radius, 0.67, Some(1.0), 3, 1.0);
    run(Attribute::Brightness, 0.9, None, 1, 1.0);
    let (fb, _) = run(Attribute::Brightness, 0.67, Some(1.0), 3, 1.0);

    // combination on the radius plan
    let mut both = 0;
    for x0 in &images {
        let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
        let out = edit(&schedule, &model, x0, &[(&fr, 1.0), (&fb, 1.0)], &plan_r).unwrap();
        let r1 = measure_attribute(&out.image, Attribute::Radius).unwrap().value;
        let b1 = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
        if r1 > r0 && b1 > b0 {
            both += 1;
        }
    }
    println!("combination on radius plan: {both}/12");

    // conditional sampling margin at c in {1, 1.5}
    for c in [1.0, 1.5] {
        let mut cond = Vec::new();
        let mut uncond = Vec::new();
        for seed in 0..20u64 {
            let xc = sample_random(&schedule, &model, &[(&fr, c)], &plan_r, seed).unwrap();
            let xu = sample_random(&schedule, &model, &[], &plan_r, seed).unwrap();
            cond.push(measure_attribute(&xc, Attribute::Radius).unwrap().value);
            uncond.push(measure_attribute(&xu, Attribute::Radius).unwrap().value);
        }
        let mc = cond.iter().sum::<f64>() / 20.0;
        let mu = uncond.iter().sum::<f64>() / 20.0;
        println!("sampling c{c}: cond {mc:.3} vs uncond {mu:.3} (diff {:+.3})", mc - mu);
    }
}
