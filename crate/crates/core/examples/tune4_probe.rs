//! Boost-noise contribution and final combination settings.
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

    // attribute jitter caused by the boosting phase alone
    let plan = build_plan(&curve, &thresholds, 0.5, 25, 25, vec![], 1234);
    let unboosted = EditPlan { t_boost: 0, ..plan.clone() };
    let mut dr = Vec::new();
    let mut db = Vec::new();
    for x0 in &images {
        let a = reconstruct(&schedule, &model, x0, &plan).unwrap();
        let b = reconstruct(&schedule, &model, x0, &unboosted).unwrap();
        dr.push(
            measure_attribute(&a.image, Attribute::Radius).unwrap().value
                - measure_attribute(&b.image, Attribute::Radius).unwrap().value,
        );
        db.push(
            measure_attribute(&a.image, Attribute::Brightness).unwrap().value
                - measure_attribute(&b.image, Attribute::Brightness).unwrap().value,
        );
    }
    let absmean = |v: &Vec<f64>| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    println!("boost jitter: |dr| {:.3} |db| {:.3}", absmean(&dr), absmean(&db));

    // strong pair at sim 0.5
    let train_images: Vec<Tensor> =
        train_idx.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
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
    let fr = mk(Attribute::Radius, 0.5, 5, 5);
    let fb = mk(Attribute::Brightness, 0.25, 7, 6);
    let mut r_pos = 0;
    let mut b_pos = 0;
    let mut both = 0;
    let mut fails = Vec::new();
    for (i, x0) in images.iter().enumerate() {
        let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
        let out = edit(&schedule, &model, x0, &[(&fr, 1.0), (&fb, 1.0)], &plan).unwrap();
        let r1 = measure_attribute(&out.image, Attribute::Radius).unwrap().value;
        let b1 = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
        if r1 > r0 { r_pos += 1; }
        if b1 > b0 { b_pos += 1; }
        if r1 > r0 && b1 > b0 { both += 1; } else { fails.push((i, r1 - r0, b1 - b0, r0, b0)); }
    }
    println!("strong pair: r {r_pos}/20 b {b_pos}/20 both {both}/20");
    for f in fails {
        println!("  fail idx {} dr {:+.3} db {:+.3} (r0 {:.2} b0 {:.2})", f.0, f.1, f.2, f.3, f.4);
    }
}
