//! End-to-end build probe: trains the default model and reports every
//! quantity the acceptance thresholds depend on.

use asyrp::denoiser::DenoiserConfig;
use asyrp::diffusion::NoiseSchedule;
use asyrp::glyphdata::{generate, Attribute, Split};
use asyrp::guidance::{measure_attribute, EditDirection, Embedder, PromptSpec, Strength};
use asyrp::numerics::Tensor;
use asyrp::pipeline::*;
use asyrp::scheduler::*;
use std::time::Instant;

fn main() {
    let t_start = Instant::now();
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let dataset = generate(2000, 1, 16).unwrap();
    println!("[{:.0?}] dataset ready", t_start.elapsed());

    let cache = std::path::Path::new("target/probe_model.ckpt");
    let model_owned;
    if cache.exists() {
        model_owned = asyrp::denoiser::DenoiserModel::load_checkpoint(cache).unwrap();
        println!("[{:.0?}] base model loaded from cache", t_start.elapsed());
    } else {
        let cfg = BaseTrainConfig { seed: 7, ..Default::default() };
        let trained = train_base(&dataset, &schedule, DenoiserConfig::default(), &cfg).unwrap();
        println!(
            "[{:.0?}] base trained: mse {:.4} -> {:.4} (ratio {:.1}x), recon bound {:.5}",
            t_start.elapsed(),
            trained.initial_mse,
            trained.final_mse,
            trained.initial_mse / trained.final_mse,
            trained.reconstruction_bound
        );
        trained.model.save_checkpoint(cache).unwrap();
        model_owned = trained.model;
    }
    let model = &model_owned;

    let held: Vec<usize> = dataset.indices(Split::HeldOut);
    let held_images: Vec<Tensor> =
        held.iter().take(30).map(|&i| dataset.images[i].clone()).collect();
    for s in [10usize, 25, 50] {
        let mut errs = reconstruction_errors(&schedule, model, &held_images, s).unwrap();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "[{:.0?}] recon rel-mse S={s}: median {:.5} p90 {:.5}",
            t_start.elapsed(),
            errs[errs.len() / 2],
            errs[errs.len() * 9 / 10]
        );
    }

    let metric = PerceptualMetric::new(16, 99).unwrap();
    let thresholds = calibrate_thresholds(&metric, &held_images, 3).unwrap();
    println!(
        "thresholds: base {:.4} boost {:.4} flex {:.4} ceiling {:.4}",
        thresholds.base, thresholds.boost, thresholds.flex, thresholds.ceiling
    );

    let curve_images: Vec<Tensor> =
        held.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let sub25 = ::asyrp::diffusion::Subsequence::linear(200, 25).unwrap();
    let curve = perceptual_curve(&schedule, model, &metric, &curve_images, &sub25).unwrap();
    println!("[{:.0?}] curve:", t_start.elapsed());
    for i in 0..curve.timesteps.len() {
        println!(
            "  t {:3}  d_pred {:.4}  d_latent {:.4}",
            curve.timesteps[i], curve.d_pred[i], curve.d_latent[i]
        );
    }

    let prompt_radius = PromptSpec::new(Attribute::Radius, EditDirection::Increase)
        .with_strength(Strength::Similarity(0.9));
    let plan = build_plan(&curve, &thresholds, 0.9, 25, 25, vec![1.0], 1234);
    println!(
        "plan: t_edit {} t_boost {} delta {:.4} warnings {:?}",
        plan.t_edit, plan.t_boost, plan.delta, plan.warnings
    );
    println!(
        "editing strength of [t_boost, 0] = {:.4} vs flex {:.4}",
        editing_strength(&curve, plan.t_boost as f64),
        thresholds.flex
    );

    let train_idx = dataset.indices(Split::Train);
    let train_images: Vec<Tensor> =
        train_idx.iter().take(50).map(|&i| dataset.images[i].clone()).collect();
    let store = precompute_latents(&schedule, model, &train_images, 25, None).unwrap();
    println!("[{:.0?}] latents ready", t_start.elapsed());

    let embedder = Embedder::calibrate(16, 2024).unwrap();
    let dcfg = DirectionTrainConfig { seed: 5, ..Default::default() };
    let (f_radius, log) =
        train_direction(&schedule, model, &embedder, &store, &prompt_radius, &plan, &dcfg)
            .unwrap();
    let n = log.len();
    let head: f64 = log[..n / 5].iter().map(|r| r.l_dir).sum::<f64>() / (n / 5) as f64;
    let tail: f64 = log[n * 4 / 5..].iter().map(|r| r.l_dir).sum::<f64>()
        / (n - n * 4 / 5) as f64;
    println!(
        "[{:.0?}] radius+ trained: l_dir head {:.4} tail {:.4}, records {}",
        t_start.elapsed(),
        head,
        tail,
        n
    );

    // edit held-out samples, measure radius change at several scales
    for c in [-1.0, 0.5, 1.0, 1.5] {
        let mut deltas = Vec::new();
        for x0 in held_images.iter().take(12) {
            let before = measure_attribute(x0, Attribute::Radius).unwrap().value;
            let out = edit(&schedule, model, x0, &[(&f_radius, c)], &plan).unwrap();
            let after = measure_attribute(&out.image, Attribute::Radius).unwrap();
            deltas.push(after.value - before);
        }
        let pos = deltas.iter().filter(|&&d| d > 0.0).count();
        let median = {
            let mut d = deltas.clone();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d[d.len() / 2]
        };
        println!("radius edit c={c}: {}/12 positive, median delta {:.3}", pos, median);
    }

    // brightness direction
    let prompt_bright = PromptSpec::new(Attribute::Brightness, EditDirection::Increase)
        .with_strength(Strength::Similarity(0.9));
    let (f_bright, _) =
        train_direction(&schedule, model, &embedder, &store, &prompt_bright, &plan, &dcfg)
            .unwrap();
    let mut pos = 0;
    for x0 in held_images.iter().take(12) {
        let before = measure_attribute(x0, Attribute::Brightness).unwrap().value;
        let out = edit(&schedule, model, x0, &[(&f_bright, 1.0)], &plan).unwrap();
        let after = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
        if after > before {
            pos += 1;
        }
    }
    println!("[{:.0?}] brightness edit: {pos}/12 positive", t_start.elapsed());

    // combination
    let mut both = 0;
    for x0 in held_images.iter().take(12) {
        let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
        let out =
            edit(&schedule, model, x0, &[(&f_radius, 1.0), (&f_bright, 1.0)], &plan).unwrap();
        let r1 = measure_attribute(&out.image, Attribute::Radius).unwrap().value;
        let b1 = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
        if r1 > r0 && b1 > b0 {
            both += 1;
        }
    }
    println!("combination: {both}/12 both positive");

    // homogeneity probe
    let probe_x0 = &dataset.images[train_idx[60]];
    let dh = optimize_delta_h_single(
        &schedule, model, &embedder, probe_x0, &prompt_radius, &plan, 50, 0.05,
    )
    .unwrap();
    let de = optimize_delta_eps_single(
        &schedule, model, &embedder, probe_x0, &prompt_radius, &plan, 50, 0.05,
    )
    .unwrap();
    let mut h_pos = 0;
    let mut e_pos = 0;
    let mut h_dist = 0.0;
    let mut e_dist = 0.0;
    for x0 in held_images.iter().take(10) {
        let before = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let img_h = apply_delta_h(&schedule, model, x0, &dh, &plan).unwrap();
        let img_e = apply_delta_eps(&schedule, model, x0, &de, &plan).unwrap();
        let rec = reconstruct(&schedule, model, x0, &plan).unwrap();
        if measure_attribute(&img_h, Attribute::Radius).unwrap().value > before {
            h_pos += 1;
        }
        if measure_attribute(&img_e, Attribute::Radius).unwrap().value > before {
            e_pos += 1;
        }
        h_dist += metric.distance(&img_h, &rec.image).unwrap();
        e_dist += metric.distance(&img_e, &rec.image).unwrap();
    }
    println!(
        "[{:.0?}] homogeneity: h {}/10 eps {}/10, dist h {:.4} eps {:.4}",
        t_start.elapsed(),
        h_pos,
        e_pos,
        h_dist / 10.0,
        e_dist / 10.0
    );

    // conditional sampling
    let mut cond = Vec::new();
    let mut uncond = Vec::new();
    for seed in 0..10u64 {
        let xc = sample_random(&schedule, model, &[(&f_radius, 1.0)], &plan, seed).unwrap();
        let xu = sample_random(&schedule, model, &[], &plan, seed).unwrap();
        cond.push(measure_attribute(&xc, Attribute::Radius).unwrap().value);
        uncond.push(measure_attribute(&xu, Attribute::Radius).unwrap().value);
    }
    let mc: f64 = cond.iter().sum::<f64>() / 10.0;
    let mu: f64 = uncond.iter().sum::<f64>() / 10.0;
    println!("[{:.0?}] sampling: cond mean radius {mc:.3} vs uncond {mu:.3}", t_start.elapsed());

    // step-count transfer: S_infer = 5 x S_train
    let plan5 = EditPlan { s_infer: 125, ..plan.clone() };
    let mut d25 = Vec::new();
    let mut d125 = Vec::new();
    for x0 in held_images.iter().take(8) {
        let before = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let a = edit(&schedule, model, x0, &[(&f_radius, 1.0)], &plan).unwrap();
        let b = edit(&schedule, model, x0, &[(&f_radius, 1.0)], &plan5).unwrap();
        d25.push(measure_attribute(&a.image, Attribute::Radius).unwrap().value - before);
        d125.push(measure_attribute(&b.image, Attribute::Radius).unwrap().value - before);
    }
    let m25: f64 = d25.iter().sum::<f64>() / 8.0;
    let m125: f64 = d125.iter().sum::<f64>() / 8.0;
    println!(
        "[{:.0?}] step transfer: S=25 mean {:.3}, S=125 scaled mean {:.3}, rel diff {:.2}",
        t_start.elapsed(),
        m25,
        m125,
        (m125 - m25).abs() / m25.abs().max(1e-9)
    );
    println!("total {:.0?}", t_start.elapsed());
}
