//! Per-sample combination failure diagnosis on the fixture artifacts.
use asyrp::asyrp::DirectionFunction;
use asyrp::denoiser::DenoiserModel;
use asyrp::diffusion::NoiseSchedule;
use asyrp::glyphdata::{generate, Attribute, Split};
use asyrp::guidance::measure_attribute;
use asyrp::pipeline::edit;
use asyrp::scheduler::EditPlan;
use asyrp::scheduler::Thresholds;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cache = &args[1];
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
    let dataset = generate(2000, 1, 16).unwrap();
    let model =
        DenoiserModel::load_checkpoint(format!("{cache}/model.ckpt")).unwrap();
    let fr = DirectionFunction::load(format!("{cache}/dir_radius.bin")).unwrap();
    let fb = DirectionFunction::load(format!("{cache}/dir_bright.bin")).unwrap();
    let held = dataset.indices(Split::HeldOut);
    // fixture plan: t_edit 40, t_boost 24 (sim 0.5 on the default curve)
    let plan = EditPlan {
        t_edit: 40,
        t_boost: 24,
        eta_edit: 0.0,
        eta_mid: 0.0,
        eta_boost: 1.0,
        thresholds: Thresholds { base: 0.0815, boost: 0.0679, flex: 0.0611, ceiling: 0.6789 },
        delta: 0.0,
        s_train: 25,
        s_infer: 25,
        coefficients: vec![1.0, 1.0],
        noise_seed: 1234,
        warnings: vec![],
    };
    let mut both = 0;
    for (k, &idx) in held.iter().take(50).enumerate() {
        let x0 = &dataset.images[idx];
        let r0 = measure_attribute(x0, Attribute::Radius).unwrap().value;
        let b0 = measure_attribute(x0, Attribute::Brightness).unwrap().value;
        let out = edit(&schedule, &model, x0, &[(&fr, 1.0), (&fb, 1.0)], &plan).unwrap();
        let r1 = measure_attribute(&out.image, Attribute::Radius).unwrap().value;
        let b1 = measure_attribute(&out.image, Attribute::Brightness).unwrap().value;
        let ok = r1 > r0 && b1 > b0;
        if ok {
            both += 1;
        } else {
            println!(
                "fail {k}: dr {:+.3} db {:+.3} (r0 {:.2} b0 {:.2} smile {:+.2})",
                r1 - r0,
                b1 - b0,
                r0,
                b0,
                dataset.params[idx].smile
            );
        }
    }
    println!("both {both}/50");
}
