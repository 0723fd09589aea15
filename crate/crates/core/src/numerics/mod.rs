//! Tensor arithmetic and reverse-mode differentiation.
//!
//! Everything runs in f64 with fixed left-to-right reduction order and
//! explicit per-primitive shape rules; there is no broadcasting.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, gradcheck_sampled};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod primitive_gradcheck_tests {
    //! Every differentiable primitive against central finite differences,
    //! at randomized points, in f64, per the module contract (< 1e-4).

    use super::*;
    use crate::error::Result;
    use crate::rng::Rng;

    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-5;

    fn check<F>(name: &str, rng: &mut Rng, rounds: usize, shapes: &[&[usize]], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        for round in 0..rounds {
            let points: Vec<Tensor> =
                shapes.iter().map(|s| Tensor::randn(s, rng)).collect();
            let err = gradcheck(&f, &points, STEP).unwrap();
            assert!(err < TOL, "{name} round {round}: relative error {err}");
        }
    }

    // 13 rounds x >=8 coordinates >= 100 random points per primitive.
    const ROUNDS: usize = 13;

    #[test]
    fn add_sub_mul_div() {
        let mut rng = Rng::seed(101);
        check("add", &mut rng, ROUNDS, &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            t.sum(y)
        });
        check("sub", &mut rng, ROUNDS, &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            t.sum(y)
        });
        check("mul", &mut rng, ROUNDS, &[&[3, 4], &[3, 4]], |t, v| {
            let y = t.mul(v[0], v[1])?;
            t.sum(y)
        });
        // keep the denominator away from zero
        check("div", &mut rng, ROUNDS, &[&[12], &[12]], |t, v| {
            let sq = t.mul(v[1], v[1])?;
            let denom = t.add_const(sq, 1.0)?;
            let y = t.div(v[0], denom)?;
            t.sum(y)
        });
    }

    #[test]
    fn scale_abs_sqrt_swish() {
        let mut rng = Rng::seed(102);
        check("scale", &mut rng, ROUNDS, &[&[10]], |t, v| {
            let y = t.scale(v[0], -2.25)?;
            t.sum(y)
        });
        check("abs", &mut rng, ROUNDS, &[&[10]], |t, v| {
            let y = t.abs(v[0])?;
            t.sum(y)
        });
        check("sqrt", &mut rng, ROUNDS, &[&[10]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let pos = t.add_const(sq, 0.5)?;
            let y = t.sqrt(pos)?;
            t.sum(y)
        });
        check("swish", &mut rng, ROUNDS, &[&[10]], |t, v| {
            let y = t.swish(v[0])?;
            t.sum(y)
        });
    }

    #[test]
    fn affine_and_convs() {
        let mut rng = Rng::seed(103);
        check("affine", &mut rng, ROUNDS, &[&[4], &[3, 4], &[3]], |t, v| {
            let y = t.affine(v[0], v[1], v[2])?;
            let s = t.swish(y)?;
            t.sum(s)
        });
        check("conv3x3", &mut rng, 5, &[&[2, 4, 4], &[3, 2, 3, 3]], |t, v| {
            let y = t.conv3x3(v[0], v[1])?;
            t.sum(y)
        });
        check("conv1x1", &mut rng, 5, &[&[3, 4, 4], &[2, 3]], |t, v| {
            let y = t.conv1x1(v[0], v[1])?;
            t.sum(y)
        });
        check("add_channel_bias", &mut rng, ROUNDS, &[&[3, 2, 2], &[3]], |t, v| {
            let y = t.add_channel_bias(v[0], v[1])?;
            t.sum(y)
        });
    }

    #[test]
    fn group_norm_pool_resample_concat() {
        let mut rng = Rng::seed(104);
        check("group_norm", &mut rng, 5, &[&[4, 3, 3], &[4], &[4]], |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2)?;
            let s = t.swish(y)?;
            t.sum(s)
        });
        check("avgpool2", &mut rng, ROUNDS, &[&[2, 4, 4]], |t, v| {
            let y = t.avgpool2(v[0])?;
            let s = t.swish(y)?;
            t.sum(s)
        });
        check("upsample2", &mut rng, ROUNDS, &[&[2, 2, 2]], |t, v| {
            let y = t.upsample2(v[0])?;
            let s = t.swish(y)?;
            t.sum(s)
        });
        check("concat_channels", &mut rng, ROUNDS, &[&[2, 2, 2], &[3, 2, 2]], |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            let s = t.swish(y)?;
            t.sum(s)
        });
        check("mean", &mut rng, ROUNDS, &[&[9]], |t, v| {
            let s = t.swish(v[0])?;
            t.mean(s)
        });
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = Rng::seed(105);
        let x = Tensor::randn(&[3, 8, 8], &mut rng);
        let k = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let run = || {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let kv = t.constant(k.clone());
            let c = t.conv3x3(xv, kv).unwrap();
            let s = t.swish(c).unwrap();
            let m = t.mean(s).unwrap();
            t.value(m).item()
        };
        let a = run();
        let b = run();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
