//! Diagnose combined-direction editing.
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
    let plan = build_plan(&curve, &thresholds, 0.9, 25, 25, vec![1.0], 1234);
    println!("plan t_edit {} t_boost {}", plan.t_edit, plan.t_boost);

    let train_images: Vec<Tensor> =
        train_idx.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let store = precompute_latents(&schedule, &model, &train_images, 25, None).unwrap();
    let embedder = Embedder::calibrate(16, 2024).unwrap();
    let dcfg = DirectionTrainConfig { seed: 5, ..Default::default() };
    let pr = PromptSpec::new(Attribute::Radius, EditDirection::Increase)
        .with_strength(Strength::Similarity(0.9));
    let pb = PromptSpec::new(Attribute::Brightness, EditDirection::Increase)
        .with_strength(Strength::Similarity(0.9));
    let (fr, _) = train_direction(&schedule, &model, &embedder, &store, &pr, &plan, &dcfg).unwrap();
    let (fb, _) = train_direction(&schedule, &model, &embedder, &store, &pb, &plan, &dcfg).unwrap();

    // per-sample deltas for each editing mode
    for (name, dirs) in [
        ("radius only  ", vec![(&fr, 1.0)]),
        ("bright only  ", vec![(&fb, 1.0)]),
        ("combo (1,1)  ", vec![(&fr, 1.0), (&fb, 1.0)]),
        ("combo (1,.5) ", vec![(&fr, 1.0), (&fb, 0.5)]),
        ("combo (.5,.5)", vec![(&fr, 0.5), (&fb, 0.5)]),
    ] {
        let mut drs = Vec::new();
        let mut dbs = Vec::new();
        let mut res = Vec::new();
        for x0 in &images {
            let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
            let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
            let out = edit(&schedule, &model, x0, &dirs, &plan).unwrap();
            let m_r = measure_attribute(&out.image, Attribute::Radius).unwrap();
            let m_b = measure_attribute(&out.image, Attribute::Brightness).unwrap();
            drs.push(m_r.value - r0);
            dbs.push(m_b.value - b0);
            res.push(m_r.residual);
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let both = drs.iter().zip(dbs.iter()).filter(|(r, b)| **r > 0.0 && **b > 0.0).count();
        println!(
            "{name}: dr mean {:+.3} db mean {:+.3} both {both}/12 residual {:.4}",
            mean(&drs),
            mean(&dbs),
            mean(&res)
        );
    }

    // norms of the shifts at the top editing step
    let x0 = &images[0];
    let inv = asyrp::diffusion::invert(
        &schedule, &model, x0, &sub, asyrp::diffusion::InversionMode::OdeConsistent,
    )
    .unwrap();
    let (_, h) = model.predict_eps(&inv.latent, 200).unwrap();
    let dr = fr.delta(&h).unwrap().tensor;
    let db = fb.delta(&h).unwrap().tensor;
    let mut sum = dr.clone();
    sum.axpy(1.0, &db);
    let dot: f64 = dr.data().iter().zip(db.data()).map(|(a, b)| a * b).sum();
    println!(
        "|dh_r| {:.3} |dh_b| {:.3} |sum| {:.3} cos(r,b) {:.3} |h| {:.3}",
        dr.norm_l2(),
        db.norm_l2(),
        sum.norm_l2(),
        dot / (dr.norm_l2() * db.norm_l2()),
        h.tensor.norm_l2()
    );
}
