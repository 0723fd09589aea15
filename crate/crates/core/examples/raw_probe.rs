//! Raw-feature-space margin probe (no projection).
use asyrp::glyphdata::{render, Attribute, GlyphParams, DEFAULT_SIDE};
use asyrp::rng::Rng;
use asyrp::numerics::Tensor;

fn feat(img: &Tensor) -> Vec<f64> {
    let s = DEFAULT_SIDE;
    let mut f: Vec<f64> = img.data().to_vec();
    let p = |y: usize, x: usize| img.data()[y * s + x];
    for y in 0..s / 2 {
        for x in 0..s / 2 {
            f.push(0.25 * (p(2*y,2*x)+p(2*y,2*x+1)+p(2*y+1,2*x)+p(2*y+1,2*x+1)));
        }
    }
    f
}

fn main() {
    for attr in Attribute::ALL {
        let (lo, hi) = attr.range();
        // mean delta over calibration draws
        let mut rng = Rng::seed(777);
        let dim = feat(&render(&GlyphParams::sample(&mut rng), DEFAULT_SIDE).unwrap()).len();
        let mut mean = vec![0.0; dim];
        for _ in 0..200 {
            let mut a = GlyphParams::sample(&mut rng); let mut b = a;
            attr.set(&mut a, lo + 0.25*(hi-lo));
            attr.set(&mut b, lo + 0.75*(hi-lo));
            let fa = feat(&render(&a, DEFAULT_SIDE).unwrap());
            let fb = feat(&render(&b, DEFAULT_SIDE).unwrap());
            for i in 0..dim { mean[i] += (fb[i]-fa[i]) / 200.0; }
        }
        // test pairs
        let mut rng = Rng::seed(65);
        let mut neg = 0; let mut minm = f64::INFINITY;
        for _ in 0..200 {
            let mut a = GlyphParams::sample(&mut rng); let mut b = a;
            attr.set(&mut a, lo + 0.2*(hi-lo));
            attr.set(&mut b, lo + 0.8*(hi-lo));
            let fa = feat(&render(&a, DEFAULT_SIDE).unwrap());
            let fb = feat(&render(&b, DEFAULT_SIDE).unwrap());
            let m: f64 = (0..dim).map(|i| (fb[i]-fa[i])*mean[i]).sum();
            if m <= 0.0 { neg += 1; }
            minm = minm.min(m);
        }
        println!("{:10} neg {} min {:.5}", attr.name(), neg, minm);
    }
}
