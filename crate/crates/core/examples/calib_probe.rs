//! Build-time calibration probe: embedder alignment and oracle accuracy.

use asyrp::glyphdata::{render, Attribute, GlyphParams, DEFAULT_SIDE};
use asyrp::guidance::{fit_glyph, Embedder};
use asyrp::rng::Rng;

fn main() {
    let emb = Embedder::calibrate(DEFAULT_SIDE, 2024).unwrap();

    // alignment flip rate per attribute
    for attr in Attribute::ALL {
        let mut rng = Rng::seed(65);
        let (lo, hi) = attr.range();
        let mut pos = 0usize;
        let mut neg = 0usize;
        let mut margins = Vec::new();
        for _ in 0..200 {
            let mut p_lo = GlyphParams::sample(&mut rng);
            let mut p_hi = p_lo;
            attr.set(&mut p_lo, lo + 0.2 * (hi - lo));
            attr.set(&mut p_hi, lo + 0.8 * (hi - lo));
            let e_lo = emb.embed_image(&render(&p_lo, DEFAULT_SIDE).unwrap()).unwrap();
            let e_hi = emb.embed_image(&render(&p_hi, DEFAULT_SIDE).unwrap()).unwrap();
            let d: f64 = e_hi
                .data()
                .iter()
                .zip(e_lo.data())
                .zip(emb.basis(attr).data())
                .map(|((h, l), b)| (h - l) * b)
                .sum();
            if d > 0.0 {
                pos += 1;
            } else {
                neg += 1;
            }
            margins.push(d);
        }
        margins.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "{:10} pos {pos} neg {neg} min {:.4} p5 {:.4} median {:.4}",
            attr.name(),
            margins[0],
            margins[10],
            margins[100]
        );
    }

    // oracle error distribution
    let mut rng = Rng::seed(67);
    let mut errs: Vec<[f64; 3]> = Vec::new();
    for _ in 0..60 {
        let p = GlyphParams::sample(&mut rng);
        let img = render(&p, DEFAULT_SIDE).unwrap();
        let (fit, res) = fit_glyph(&img).unwrap();
        errs.push([
            (fit.radius - p.radius).abs(),
            (fit.smile - p.smile).abs(),
            (fit.brightness - p.brightness).abs(),
        ]);
        let _ = res;
    }
    for (i, name) in ["radius", "smile", "brightness"].iter().enumerate() {
        let mut v: Vec<f64> = errs.iter().map(|e| e[i]).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!(
            "{name:10} median {:.4} p90 {:.4} max {:.4}",
            v[v.len() / 2],
            v[v.len() * 9 / 10],
            v[v.len() - 1]
        );
    }
}
