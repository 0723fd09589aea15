//! Combination pairing, linearity, and step transfer with tuned directions.
use asyrp::denoiser::DenoiserModel;
use asyrp::diffusion::NoiseSchedule;
use asyrp::glyphdata::{generate, Attribute, Split};
use asyrp::guidance::{measure_attribute, EditDirection, Embedder, PromptSpec, Strength};
use asyrp::numerics::Tensor;
use asyrp::pipeline::*;
use asyrp::scheduler::*;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let dataset = generate(2000, 1, 16).unwrap();
    let model = DenoiserModel::load_checkpoint("target/probe_model.ckpt").unwrap();
    let metric = PerceptualMetric::new(16, 99).unwrap();
    let held = dataset.indices(Split::HeldOut);
    let train_idx = dataset.indices(Split::Train);
    let images20: Vec<Tensor> =
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

    let train = |attr: Attribute, sim: f64, recon: Option<f64>, epochs: usize, seed: u64| {
        let prompt = PromptSpec::new(attr, EditDirection::Increase)
            .with_strength(Strength::Similarity(sim));
        let plan = build_plan(&curve, &thresholds, sim, 25, 25, vec![1.0], 1234);
        let dcfg = DirectionTrainConfig {
            seed,
            epochs,
            lambda_recon: recon,
            ..Default::default()
        };
        let (f, _) =
            train_direction(&schedule, &model, &embedder, &store, &prompt, &plan, &dcfg)
                .unwrap();
        (f, plan)
    };

    let (fr, plan_r) = train(Attribute::Radius, 0.67, Some(1.0), 3, 5);
    let (fb_soft, _) = train(Attribute::Brightness, 0.9, None, 1, 6);
    let (fb_mid, _) = train(Attribute::Brightness, 0.8, Some(1.5), 2, 6);

    for (name, fb) in [("soft bright", &fb_soft), ("mid bright", &fb_mid)] {
        let mut both = 0;
        let mut r_pos = 0;
        let mut b_pos = 0;
        for x0 in &images20 {
            let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
            let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
            let out = edit(&schedule, &model, x0, &[(&fr, 1.0), (fb, 1.0)], &plan_r).unwrap();
            let r1 = measure_attribute(&out.image, Attribute::Radius).unwrap().value;
            let b1 = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
            if r1 > r0 { r_pos += 1; }
            if b1 > b0 { b_pos += 1; }
            if r1 > r0 && b1 > b0 { both += 1; }
        }
        println!("combo {name}: r {r_pos}/20 b {b_pos}/20 both {both}/20");
    }

    // linearity over scales with the strong radius direction
    let scales = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
    let mut medians = Vec::new();
    for &c in &scales {
        let vals: Vec<f64> = images20
            .iter()
            .map(|x0| {
                let out = edit(&schedule, &model, x0, &[(&fr, c)], &plan_r).unwrap();
                measure_attribute(&out.image, Attribute::Radius).unwrap().value
            })
            .collect();
        medians.push(median(vals));
    }
    println!("linearity medians {medians:?}");

    // step transfer S=25 -> S=125
    let plan_5x = EditPlan { s_infer: 125, ..plan_r.clone() };
    let mut base_ch = Vec::new();
    let mut scaled_ch = Vec::new();
    for x0 in &images20 {
        let before = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let a = edit(&schedule, &model, x0, &[(&fr, 1.0)], &plan_r).unwrap();
        let b = edit(&schedule, &model, x0, &[(&fr, 1.0)], &plan_5x).unwrap();
        base_ch.push(measure_attribute(&a.image, Attribute::Radius).unwrap().value - before);
        scaled_ch.push(measure_attribute(&b.image, Attribute::Radius).unwrap().value - before);
    }
    let m_b = median(base_ch);
    let m_s = median(scaled_ch);
    println!(
        "step transfer: S25 median {m_b:+.3} S125 median {m_s:+.3} rel {:.2}",
        (m_s - m_b).abs() / m_b.abs().max(1e-9)
    );
}
