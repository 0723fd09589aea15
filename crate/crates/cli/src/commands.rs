//! One function per subcommand. Each writes its artifacts plus the
//! effective config under the output directory and stays byte-stable
//! for a fixed config and seed.

use crate::config::RunConfig;
use asyrp::asyrp::DirectionFunction;
use asyrp::denoiser::DenoiserModel;
use asyrp::diffusion::{invert, trajectory_stats_csv, InversionMode, NoiseSchedule, Subsequence};
use asyrp::error::{Error, Result};
use asyrp::glyphdata::{generate, Attribute, Dataset, Split};
use asyrp::guidance::{measure_attribute, Embedder};
use asyrp::numerics::Tensor;
use asyrp::pgm::write_pgm;
use asyrp::pipeline::{
    edit, loss_log_csv, precompute_latents, sample_random, train_base, train_direction,
    LatentStore,
};
use asyrp::scheduler::{
    build_plan, calibrate_thresholds, perceptual_curve, EditPlan, PerceptualCurve,
    PerceptualMetric, Thresholds,
};
use std::fs;
use std::path::{Path, PathBuf};

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn prepare(config: RunConfig, out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        let ctx = Context { config, out: out.to_path_buf() };
        fs::write(ctx.out.join("config.json"), ctx.config.effective_json()?)?;
        Ok(ctx)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(
            self.config.schedule.t_count,
            self.config.schedule.beta_min,
            self.config.schedule.beta_max,
        )
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.config.data.path {
            Some(path) => Dataset::read(path),
            None => generate(self.config.data.count, self.config.seed, self.config.data.side),
        }
    }

    pub fn model(&self) -> Result<DenoiserModel> {
        let path = self.config.model.checkpoint.as_ref().ok_or_else(|| {
            Error::Config("model.checkpoint is required for this command".into())
        })?;
        DenoiserModel::load_checkpoint(path)
    }

    pub fn metric(&self) -> Result<PerceptualMetric> {
        PerceptualMetric::new(self.config.data.side, self.config.plan.metric_seed)
    }

    pub fn embedder(&self) -> Result<Embedder> {
        Embedder::calibrate(self.config.data.side, self.config.seed ^ 0xe0b)
    }

    fn held_out_images(&self, dataset: &Dataset, n: usize) -> Vec<Tensor> {
        dataset
            .indices(Split::HeldOut)
            .into_iter()
            .take(n)
            .map(|i| dataset.images[i].clone())
            .collect()
    }

    pub fn load_plan(&self) -> Result<EditPlan> {
        let path = self.config.plan.path.as_ref().ok_or_else(|| {
            Error::Config("plan.path is required for this command (run `plan` first)".into())
        })?;
        let text = fs::read_to_string(path)?;
        let mut plan: EditPlan =
            serde_json::from_str(&text).map_err(|e| Error::Plan(format!("plan JSON: {e}")))?;
        // raw overrides win over the stored plan
        if let Some(t) = self.config.plan.t_edit {
            plan.t_edit = t;
        }
        if let Some(t) = self.config.plan.t_boost {
            plan.t_boost = t;
        }
        plan.validate(self.config.schedule.t_count)?;
        Ok(plan)
    }
}

pub fn gen_data(ctx: &Context) -> Result<()> {
    let dataset = ctx.dataset()?;
    dataset.write(ctx.out.join("dataset.bin"))?;
    for i in 0..ctx.config.output.count.min(dataset.len()) {
        write_pgm(ctx.out.join(format!("glyph_{i:05}.pgm")), &dataset.images[i])?;
    }
    println!("dataset: {} glyphs written", dataset.len());
    Ok(())
}

pub fn train_base_cmd(ctx: &Context) -> Result<()> {
    let schedule = ctx.schedule()?;
    let dataset = ctx.dataset()?;
    let mut cfg = ctx.config.train.clone();
    if cfg.seed == 0 {
        cfg.seed = ctx.config.seed;
    }
    let trained = train_base(&dataset, &schedule, ctx.config.model.denoiser_config(), &cfg)?;
    trained.model.save_checkpoint(ctx.out.join("model.ckpt"))?;
    let report = serde_json::json!({
        "initial_mse": trained.initial_mse,
        "final_mse": trained.final_mse,
        "improvement": trained.initial_mse / trained.final_mse,
        "reconstruction_bound": trained.reconstruction_bound,
    });
    fs::write(ctx.out.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "trained: mse {:.4} -> {:.4}, reconstruction bound {:.5}",
        trained.initial_mse, trained.final_mse, trained.reconstruction_bound
    );
    Ok(())
}

pub fn invert_cmd(ctx: &Context) -> Result<()> {
    let schedule = ctx.schedule()?;
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let images: Vec<Tensor> = dataset
        .indices(Split::Train)
        .into_iter()
        .take(ctx.config.output.count.max(1))
        .map(|i| dataset.images[i].clone())
        .collect();
    let store = precompute_latents(&schedule, &model, &images, ctx.config.plan.s_train, None)?;
    store.write(ctx.out.join("latents.bin"))?;
    // trajectory statistics for the first few samples
    let sub = Subsequence::linear(schedule.len(), ctx.config.plan.s_train)?;
    let mut rows: Vec<(usize, usize, Tensor)> = Vec::new();
    for (i, x0) in images.iter().take(4).enumerate() {
        let inv = invert(&schedule, &model, x0, &sub, InversionMode::OdeConsistent)?;
        for (t, x) in inv.trajectory {
            rows.push((i, t, x));
        }
    }
    let borrowed: Vec<(usize, usize, &Tensor)> =
        rows.iter().map(|(i, t, x)| (*i, *t, x)).collect();
    fs::write(ctx.out.join("trajectories.csv"), trajectory_stats_csv(&borrowed))?;
    println!("inverted {} samples at S={}", store.len(), ctx.config.plan.s_train);
    Ok(())
}

pub fn curves_cmd(ctx: &Context) -> Result<()> {
    let schedule = ctx.schedule()?;
    let dataset = ctx.dataset()?;
    let model = ctx.model()?;
    let metric = ctx.metric()?;
    let images = ctx.held_out_images(&dataset, ctx.config.plan.curve_samples);
    let sub = Subsequence::linear(schedule.len(), ctx.config.plan.s_train)?;
    let curve = perceptual_curve(&schedule, &model, &metric, &images, &sub)?;
    let thresholds = thresholds_for(ctx, &metric, &images)?;
    fs::write(ctx.out.join("curves.json"), serde_json::to_string_pretty(&curve)?)?;
    fs::write(ctx.out.join("curves.csv"), curve.to_csv())?;
    fs::write(ctx.out.join("thresholds.json"), serde_json::to_string_pretty(&thresholds)?)?;
    println!(
        "curves over {} samples; ceiling {:.4}",
        curve.samples, thresholds.ceiling
    );
    Ok(())
}

fn thresholds_for(
    ctx: &Context,
    metric: &PerceptualMetric,
    images: &[Tensor],
) -> Result<Thresholds> {
    let mut th = calibrate_thresholds(metric, images, ctx.config.seed)?;
    if let Some(v) = ctx.config.plan.threshold_base {
        th.base = v;
    }
    if let Some(v) = ctx.config.plan.threshold_boost {
        th.boost = v;
    }
    if let Some(v) = ctx.config.plan.threshold_flex {
        th.flex = v;
    }
    Ok(th)
}

pub fn plan_cmd(ctx: &Context) -> Result<()> {
    let curve_path = ctx.config.plan.curve_path.as_ref().ok_or_else(|| {
        Error::Config("plan.curve_path is required (run `curves` first)".into())
    })?;
    let curve: PerceptualCurve = serde_json::from_str(&fs::read_to_string(curve_path)?)
        .map_err(|e| Error::Plan(format!("curve JSON: {e}")))?;
    curve.validate()?;
    let dataset = ctx.dataset()?;
    let metric = ctx.metric()?;
    let images = ctx.held_out_images(&dataset, ctx.config.plan.curve_samples);
    let thresholds = thresholds_for(ctx, &metric, &images)?;
    let embedder = ctx.embedder()?;
    let prompt = ctx.config.direction.prompt()?;
    let similarity = embedder.prompt_similarity(&prompt);
    let mut plan = build_plan(
        &curve,
        &thresholds,
        similarity,
        ctx.config.plan.s_train,
        ctx.config.plan.s_infer,
        ctx.config.plan.coefficients.clone(),
        ctx.config.seed,
    );
    if let Some(t) = ctx.config.plan.t_edit {
        plan.t_edit = t;
    }
    if let Some(t) = ctx.config.plan.t_boost {
        plan.t_boost = t;
    }
    plan.validate(ctx.config.schedule.t_count)?;
    fs::write(ctx.out.join("plan.json"), plan.to_json()?)?;
    for w in &plan.warnings {
        println!("warning: {w}");
    }
    println!("plan: t_edit {} t_boost {}", plan.t_edit, plan.t_boost);
    Ok(())
}

pub fn train_direction_cmd(ctx: &Context) -> Result<()> {
    let schedule = ctx.schedule()?;
    let model = ctx.model()?;
    let plan = ctx.load_plan()?;
    let embedder = ctx.embedder()?;
    let prompt = ctx.config.direction.prompt()?;
    let dataset = ctx.dataset()?;
    let train_images: Vec<Tensor> = dataset
        .indices(Split::Train)
        .into_iter()
        .take(ctx.config.output.count.max(1))
        .map(|i| dataset.images[i].clone())
        .collect();
    let store = precompute_latents(&schedule, &model, &train_images, plan.s_train, None)?;
    let mut dcfg = ctx.config.direction.train_config();
    if dcfg.seed == 0 {
        dcfg.seed = ctx.config.seed;
    }
    let (f, log) =
        train_direction(&schedule, &model, &embedder, &store, &prompt, &plan, &dcfg)?;
    f.save(ctx.out.join(format!("direction_{}.bin", prompt.attribute.name())))?;
    embedder.save(ctx.out.join("embedder.bin"))?;
    fs::write(ctx.out.join("loss_log.csv"), loss_log_csv(&log))?;
    println!("direction trained over {} records", log.len());
    Ok(())
}

fn load_directions(ctx: &Context) -> Result<Vec<DirectionFunction>> {
    let mut out = Vec::new();
    for path in &ctx.config.direction.checkpoints {
        out.push(DirectionFunction::load(path)?);
    }
    Ok(out)
}

fn sidecar(
    ctx: &Context,
    name: &str,
    plan: &EditPlan,
    measured: serde_json::Value,
) -> Result<()> {
    let doc = serde_json::json!({ "plan": plan, "measured": measured });
    fs::write(ctx.out.join(name), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn edit_cmd(ctx: &Context) -> Result<()> {
    let schedule = ctx.schedule()?;
    let model = ctx.model()?;
    let plan = ctx.load_plan()?;
    let dataset = ctx.dataset()?;
    let metric = ctx.metric()?;
    let directions = load_directions(ctx)?;
    let coeffs = &plan.coefficients;
    if directions.len() != coeffs.len() {
        return Err(Error::Plan(format!(
            "{} directions but {} coefficients",
            directions.len(),
            coeffs.len()
        )));
    }
    let pairs: Vec<(&DirectionFunction, f64)> =
        directions.iter().zip(coeffs.iter().copied()).collect();
    let indices = if ctx.config.output.indices.is_empty() {
        dataset.indices(Split::HeldOut).into_iter().take(ctx.config.output.count).collect()
    } else {
        ctx.config.output.indices.clone()
    };
    let mut rows = Vec::new();
    for idx in indices {
        if idx >= dataset.len() {
            return Err(Error::Config(format!("sample index {idx} out of range")));
        }
        let x0 = &dataset.images[idx];
        let outcome = edit(&schedule, &model, x0, &pairs, &plan)?;
        write_pgm(ctx.out.join(format!("edit_{idx:05}.pgm")), &outcome.image)?;
        write_pgm(ctx.out.join(format!("source_{idx:05}.pgm")), x0)?;
        let mut measures = serde_json::Map::new();
        for attr in Attribute::ALL {
            let before = measure_attribute(x0, attr)?;
            let after = measure_attribute(&outcome.image, attr)?;
            measures.insert(
                attr.name().to_string(),
                serde_json::json!({
                    "before": before.value,
                    "after": after.value,
                    "low_confidence": after.low_confidence,
                }),
            );
        }
        rows.push(serde_json::json!({
            "index": idx,
            "attributes": measures,
            "distance_to_source": metric.distance(&outcome.image, x0)?,
        }));
    }
    sidecar(ctx, "edits.json", &plan, serde_json::Value::Array(rows))?;
    println!("edited {} samples", ctx.config.output.count);
    Ok(())
}

pub fn sample_cmd(ctx: &Context) -> Result<()> {
    let schedule = ctx.schedule()?;
    let model = ctx.model()?;
    let plan = ctx.load_plan()?;
    let directions = load_directions(ctx)?;
    let pairs: Vec<(&DirectionFunction, f64)> = directions
        .iter()
        .zip(plan.coefficients.iter().copied())
        .collect();
    if directions.len() != plan.coefficients.len() {
        return Err(Error::Plan(format!(
            "{} directions but {} coefficients",
            directions.len(),
            plan.coefficients.len()
        )));
    }
    let mut rows = Vec::new();
    for k in 0..ctx.config.output.count {
        let seed = ctx.config.seed.wrapping_add(k as u64);
        let image = sample_random(&schedule, &model, &pairs, &plan, seed)?;
        write_pgm(ctx.out.join(format!("sample_{k:05}.pgm")), &image)?;
        let mut measures = serde_json::Map::new();
        for attr in Attribute::ALL {
            let m = measure_attribute(&image, attr)?;
            measures.insert(
                attr.name().to_string(),
                serde_json::json!({"value": m.value, "low_confidence": m.low_confidence}),
            );
        }
        rows.push(serde_json::json!({"seed": seed, "attributes": measures}));
    }
    sidecar(ctx, "samples.json", &plan, serde_json::Value::Array(rows))?;
    println!("sampled {} images", ctx.config.output.count);
    Ok(())
}

pub fn verify_cmd(ctx: &Context) -> Result<bool> {
    let results = crate::verify::run_verification(ctx.config.seed)?;
    let all_pass = results.iter().all(|r| r.pass);
    fs::write(ctx.out.join("verify_report.json"), crate::verify::report_json(&results))?;
    for r in &results {
        println!(
            "{} {}: {:.3e} ({} {:.3e})",
            if r.pass { "pass" } else { "FAIL" },
            r.name,
            r.value,
            r.relation,
            r.threshold
        );
    }
    Ok(all_pass)
}

pub fn export_curves_cmd(ctx: &Context) -> Result<()> {
    let curve_path = ctx.config.plan.curve_path.as_ref().ok_or_else(|| {
        Error::Config("plan.curve_path is required for export-curves".into())
    })?;
    let curve: PerceptualCurve = serde_json::from_str(&fs::read_to_string(curve_path)?)
        .map_err(|e| Error::Plan(format!("curve JSON: {e}")))?;
    curve.validate()?;
    fs::write(ctx.out.join("curves.csv"), curve.to_csv())?;
    println!("exported {} rows", curve.timesteps.len());
    Ok(())
}

// used by invert_cmd through the public API; quiet the unused warning
#[allow(dead_code)]
fn _latent_store_type(_: &LatentStore) {}
