//! The fast verification suite: every exactly-checkable invariant, run
//! on a fresh build with no trained artifacts, reported as JSON.

use asyrp::asyrp::{
    asymmetric_coefficient, eps_shift_step_symmetric, scale_delta, theorem1_coefficient,
    theorem1_delta, DeltaH,
};
use asyrp::container::{Container, MAGIC_CHECKPOINT};
use asyrp::diffusion::{
    ddim_step_from_eps, ddpm_step_from_eps, ddpm_step_posterior_from_eps, decompose,
    make_schedule, q_sample, sigma,
};
use asyrp::error::Result;
use asyrp::glyphdata::{render, Attribute, GlyphParams};
use asyrp::guidance::{cosine_distance_loss, Embedder};
use asyrp::numerics::{gradcheck, Tensor};
use asyrp::rng::Rng;
use serde::Serialize;

#[derive(Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// "lt": value must be below the threshold; "ge": at or above.
    pub relation: &'static str,
    pub pass: bool,
}

fn lt(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        threshold,
        relation: "lt",
        pass: value < threshold && value.is_finite(),
    }
}

fn ge(name: &str, value: f64, threshold: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        threshold,
        relation: "ge",
        pass: value >= threshold && value.is_finite(),
    }
}

pub fn run_verification(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = Rng::seed(seed);

    // Theorem 1 on the default schedule: exact residual identity and
    // bounded coefficient.
    let schedule = make_schedule(200, 1e-4, 0.02)?;
    let mut max_coeff = 0.0f64;
    let mut max_identity_err = 0.0f64;
    for t in 1..=200usize {
        max_coeff = max_coeff.max(theorem1_coefficient(&schedule, t).abs());
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let eps = Tensor::randn(&[1, 4, 4], &mut rng);
        let de = Tensor::randn(&[1, 4, 4], &mut rng);
        let base = ddim_step_from_eps(&schedule, &x, &eps, t, 0.0, None)?;
        let shifted = eps_shift_step_symmetric(&schedule, &x, &eps, &de, t)?;
        let predicted = theorem1_delta(&schedule, t, &de);
        for i in 0..x.numel() {
            let actual = shifted.data()[i] - base.data()[i];
            max_identity_err = max_identity_err.max((actual - predicted.data()[i]).abs());
        }
    }
    out.push(lt("theorem1.identity_max_abs_err", max_identity_err, 1e-12));
    out.push(lt("theorem1.default_max_coefficient", max_coeff, 0.02));

    // appendix-style schedule: beta_max 0.001, beta_min near zero, T=1000
    let appendix = make_schedule(1000, 1e-8, 1e-3)?;
    let mut max_coeff_apx = 0.0f64;
    for t in 1..=1000usize {
        max_coeff_apx = max_coeff_apx.max(theorem1_coefficient(&appendix, t).abs());
    }
    out.push(lt("theorem1.appendix_max_coefficient", max_coeff_apx, 1e-3));

    // asymmetric path dominates the symmetric one where alpha works
    let mut min_ratio = f64::INFINITY;
    for t in 1..=200usize {
        let a = schedule.alpha(t);
        if (0.05..=0.95).contains(&a) {
            let ratio =
                asymmetric_coefficient(&schedule, t) / theorem1_coefficient(&schedule, t).abs();
            min_ratio = min_ratio.min(ratio);
        }
    }
    out.push(ge("asymmetry.min_ratio", min_ratio, 10.0));

    // reassembly identity of the decomposed step
    let mut max_reassembly = 0.0f64;
    for _ in 0..50 {
        let t = 1 + rng.below(200);
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let eps = Tensor::randn(&[1, 4, 4], &mut rng);
        let dec = decompose(&schedule, &x, &eps, t, 0.0)?;
        let step = ddim_step_from_eps(&schedule, &x, &eps, t, 0.0, None)?;
        for i in 0..x.numel() {
            let manual =
                schedule.sqrt_alpha(t - 1) * dec.predicted_x0.data()[i] + dec.direction.data()[i];
            max_reassembly = max_reassembly.max((manual - step.data()[i]).abs());
        }
    }
    out.push(lt("decompose.reassembly_max_abs_err", max_reassembly, 1e-12));

    // eta = 1 equals the posterior-variance ancestral step
    let mut max_eta = 0.0f64;
    for _ in 0..20 {
        let t = 2 + rng.below(199);
        let x = Tensor::randn(&[1, 3, 3], &mut rng);
        let eps = Tensor::randn(&[1, 3, 3], &mut rng);
        let z = Tensor::randn(&[1, 3, 3], &mut rng);
        let a = ddim_step_from_eps(&schedule, &x, &eps, t, 1.0, Some(&z))?;
        let b = ddpm_step_posterior_from_eps(&schedule, &x, &eps, t, &z)?;
        for i in 0..x.numel() {
            max_eta = max_eta.max((a.data()[i] - b.data()[i]).abs());
        }
    }
    out.push(lt("eta_interpolation.max_abs_err", max_eta, 1e-10));

    // schedule cumulative product against a log-space oracle
    let mut max_alpha_err = 0.0f64;
    let mut log_sum = 0.0f64;
    for t in 1..=200usize {
        log_sum += (1.0 - schedule.betas(t)).ln();
        max_alpha_err = max_alpha_err.max((schedule.alpha(t) - log_sum.exp()).abs());
    }
    out.push(lt("schedule.alpha_vs_log_oracle", max_alpha_err, 1e-12));

    // spot values: q_sample, sigma, ddpm
    let s81 = make_schedule(2, 0.19, 0.19)?;
    let one = Tensor::scalar(1.0);
    let q = q_sample(&s81, &one, 1, &one)?.item();
    out.push(lt("q_sample.alpha_081_err", (q - (0.9 + 0.19f64.sqrt())).abs(), 1e-12));
    let s2 = make_schedule(2, 0.1, 0.3)?;
    let sg = sigma(&s2, 2, 1.0)?;
    let sg_expect = (0.1f64 / 0.37).sqrt() * (1.0f64 - 0.63 / 0.9).sqrt();
    out.push(lt("sigma.hand_value_err", (sg - sg_expect).abs(), 1e-12));
    let zero = Tensor::scalar(0.0);
    let dd = ddpm_step_from_eps(&s2, &one, &one, 2, &zero)?.item();
    let dd_expect = (1.0 - 0.3 / 0.37f64.sqrt()) / 0.7f64.sqrt();
    out.push(lt("ddpm.hand_value_err", (dd - dd_expect).abs(), 1e-12));

    // gradients against central finite differences
    let x = Tensor::randn(&[2, 4, 4], &mut rng);
    let k = Tensor::randn(&[2, 2, 3, 3], &mut rng);
    let err = gradcheck(
        |tape, vars| {
            let c = tape.conv3x3(vars[0], vars[1])?;
            let s = tape.swish(c)?;
            tape.mean(s)
        },
        &[x, k],
        1e-5,
    )?;
    out.push(lt("gradcheck.conv_swish_rel_err", err, 1e-4));

    // container roundtrip precision and error taxonomy
    let mut c = Container::new(serde_json::json!({"k": 1}));
    c.push("t", Tensor::randn(&[4, 4], &mut rng));
    let bytes = c.to_bytes(MAGIC_CHECKPOINT)?;
    let back = Container::from_bytes(MAGIC_CHECKPOINT, &bytes)?;
    let mut max_quant = 0.0f64;
    for (&a, &b) in c.get("t").unwrap().data().iter().zip(back.get("t").unwrap().data()) {
        max_quant = max_quant.max((a - b).abs() / a.abs().max(1.0));
    }
    out.push(lt("container.roundtrip_rel_err", max_quant, 2f64.powi(-23)));

    // directional loss geometry
    let t3 = Tensor::new(vec![3], vec![1.0, 2.0, -0.5])?;
    let mut anti = t3.clone();
    anti.scale_in_place(-1.0);
    let ortho = Tensor::new(vec![3], vec![2.0, -1.0, 0.0])?;
    let geo_err = (cosine_distance_loss(&t3, &t3) - 0.0)
        .abs()
        .max((cosine_distance_loss(&anti, &t3) - 2.0).abs())
        .max((cosine_distance_loss(&ortho, &t3) - 1.0).abs());
    out.push(lt("directional_loss.geometry_err", geo_err, 1e-12));

    // shift scaling preserves the summed shift
    let d = DeltaH { tensor: Tensor::filled(&[2, 2, 2], 1.0), t: 1, attribute: "x".into() };
    let scaled = scale_delta(&d, 40, 1000);
    out.push(lt(
        "scale_delta.forty_over_thousand_err",
        (scaled.tensor.data()[0] - 0.04).abs(),
        1e-15,
    ));

    // embedder attribute alignment on fresh calibration
    let embedder = Embedder::calibrate(16, seed ^ 0xa11)?;
    let mut min_margin = f64::INFINITY;
    for attr in Attribute::ALL {
        let (lo, hi) = attr.range();
        for _ in 0..30 {
            let mut p_lo = GlyphParams::sample(&mut rng);
            let mut p_hi = p_lo;
            attr.set(&mut p_lo, lo + 0.2 * (hi - lo));
            attr.set(&mut p_hi, lo + 0.8 * (hi - lo));
            let e_lo = embedder.embed_image(&render(&p_lo, 16)?)?;
            let e_hi = embedder.embed_image(&render(&p_hi, 16)?)?;
            let mut margin = 0.0;
            for ((h, l), b) in
                e_hi.data().iter().zip(e_lo.data()).zip(embedder.basis(attr).data())
            {
                margin += (h - l) * b;
            }
            min_margin = min_margin.min(margin);
        }
    }
    out.push(ge("embedder.alignment_min_margin", min_margin, 0.0));

    // glyph rendering determinism
    let p = GlyphParams { radius: 4.5, smile: 0.5, brightness: 0.8, jitter_x: 0.3, jitter_y: -0.2 };
    let img1 = render(&p, 16)?;
    let img2 = render(&p, 16)?;
    let det = img1
        .data()
        .iter()
        .zip(img2.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    out.push(lt("glyph.render_determinism", det, f64::MIN_POSITIVE));

    Ok(out)
}

pub fn report_json(results: &[CheckResult]) -> String {
    serde_json::to_string_pretty(&serde_json::json!({
        "passed": results.iter().filter(|r| r.pass).count(),
        "total": results.len(),
        "all_pass": results.iter().all(|r| r.pass),
        "checks": results,
    }))
    .expect("report serialization")
}
