//! Forward kernels for the primitive set.
//!
//! Every kernel is a pure function with an explicit shape rule and a
//! fixed iteration order, so forward passes are bit-deterministic.
//! The tape calls these same functions when recording; inference and
//! training therefore share one numeric path.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

fn expect_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn expect_chw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(op, format!("expected [C,H,W], got {:?}", x.shape()))),
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape("div", a, b)?;
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "div" });
    }
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x * s).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add_const(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x + c).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn abs(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|x| x.abs()).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sqrt(a: &Tensor) -> Result<Tensor> {
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::NonFinite { op: "sqrt" });
    }
    let data = a.data().iter().map(|x| x.sqrt()).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// swish(x) = x * sigmoid(x)
pub fn swish(a: &Tensor) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| x * sigmoid_scalar(x)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Dense layer: y = W x + b with x: [n_in], W: [n_out, n_in], b: [n_out].
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n_in = match *x.shape() {
        [n] => n,
        _ => return Err(Error::shape("affine", format!("x must be [n], got {:?}", x.shape()))),
    };
    let (n_out, w_in) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::shape("affine", format!("w must be [o,i], got {:?}", w.shape()))),
    };
    if w_in != n_in || b.shape() != [n_out] {
        return Err(Error::shape(
            "affine",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let xv = x.data();
    let wv = w.data();
    let bv = b.data();
    let mut out = vec![0.0; n_out];
    for o in 0..n_out {
        let row = &wv[o * n_in..(o + 1) * n_in];
        let mut acc = 0.0;
        for i in 0..n_in {
            acc += row[i] * xv[i];
        }
        out[o] = acc + bv[o];
    }
    Tensor::new(vec![n_out], out)
}

/// 3x3 convolution, stride 1, zero padding 1: [C,H,W] * [Co,C,3,3] -> [Co,H,W].
pub fn conv3x3(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (c_in, h, w) = expect_chw("conv3x3", x)?;
    let (c_out, kc) = match *k.shape() {
        [co, ci, 3, 3] => (co, ci),
        _ => {
            return Err(Error::shape(
                "conv3x3",
                format!("kernel must be [Co,C,3,3], got {:?}", k.shape()),
            ))
        }
    };
    if kc != c_in {
        return Err(Error::shape("conv3x3", format!("x has {c_in} channels, kernel {kc}")));
    }
    let xv = x.data();
    let kv = k.data();
    let mut out = vec![0.0; c_out * h * w];
    for co in 0..c_out {
        let o_base = co * h * w;
        for ci in 0..c_in {
            let kbase = (co * c_in + ci) * 9;
            let kw = &kv[kbase..kbase + 9];
            let i_base = ci * h * w;
            // interior: all nine taps in bounds, three row slices per y
            if h > 2 && w > 2 {
                for y in 1..h - 1 {
                    let r0 = &xv[i_base + (y - 1) * w..i_base + y * w];
                    let r1 = &xv[i_base + y * w..i_base + (y + 1) * w];
                    let r2 = &xv[i_base + (y + 1) * w..i_base + (y + 2) * w];
                    let orow = o_base + y * w;
                    let dst = &mut out[orow..orow + w];
                    for x_ in 1..w - 1 {
                        let acc = kw[0] * r0[x_ - 1]
                            + kw[1] * r0[x_]
                            + kw[2] * r0[x_ + 1]
                            + kw[3] * r1[x_ - 1]
                            + kw[4] * r1[x_]
                            + kw[5] * r1[x_ + 1]
                            + kw[6] * r2[x_ - 1]
                            + kw[7] * r2[x_]
                            + kw[8] * r2[x_ + 1];
                        dst[x_] += acc;
                    }
                }
            }
            // border cells with zero padding
            let conv_at = |y: usize, x_: usize| -> f64 {
                let mut acc = 0.0;
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = i_base + sy as usize * w;
                    for dx in 0..3usize {
                        let sx = x_ as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += kw[dy * 3 + dx] * xv[row + sx as usize];
                    }
                }
                acc
            };
            for x_ in 0..w {
                out[o_base + x_] += conv_at(0, x_);
                if h > 1 {
                    out[o_base + (h - 1) * w + x_] += conv_at(h - 1, x_);
                }
            }
            for y in 1..h.saturating_sub(1) {
                out[o_base + y * w] += conv_at(y, 0);
                if w > 1 {
                    out[o_base + y * w + w - 1] += conv_at(y, w - 1);
                }
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)
}

/// 1x1 convolution: [C,H,W] * [Co,C] -> [Co,H,W].
pub fn conv1x1(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (c_in, h, w) = expect_chw("conv1x1", x)?;
    let (c_out, kc) = match *k.shape() {
        [co, ci] => (co, ci),
        _ => {
            return Err(Error::shape(
                "conv1x1",
                format!("kernel must be [Co,C], got {:?}", k.shape()),
            ))
        }
    };
    if kc != c_in {
        return Err(Error::shape("conv1x1", format!("x has {c_in} channels, kernel {kc}")));
    }
    let hw = h * w;
    let xv = x.data();
    let kv = k.data();
    let mut out = vec![0.0; c_out * hw];
    for co in 0..c_out {
        let o_base = co * hw;
        for ci in 0..c_in {
            let kwt = kv[co * c_in + ci];
            let i_base = ci * hw;
            for p in 0..hw {
                out[o_base + p] += kwt * xv[i_base + p];
            }
        }
    }
    Tensor::new(vec![c_out, h, w], out)
}

/// Per-channel bias broadcast over spatial dims: [C,H,W] + [C].
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_chw("add_channel_bias", x)?;
    if b.shape() != [c] {
        return Err(Error::shape(
            "add_channel_bias",
            format!("x {:?}, bias {:?}", x.shape(), b.shape()),
        ));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for ch in 0..c {
        let bias = b.data()[ch];
        for v in &mut out[ch * hw..(ch + 1) * hw] {
            *v += bias;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization over channel groups: y = gamma * (x-mu)/sqrt(var+eps) + beta.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    let (c, h, w) = expect_chw("group_norm", x)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape("group_norm", format!("{c} channels not divisible by {groups} groups")));
    }
    let per = c / groups;
    let hw = h * w;
    let m = (per * hw) as f64;
    let xv = x.data();
    let mut out = vec![0.0; c * hw];
    for g in 0..groups {
        let base = g * per * hw;
        let slice = &xv[base..base + per * hw];
        let mut mean = 0.0;
        for &v in slice {
            mean += v;
        }
        mean /= m;
        let mut var = 0.0;
        for &v in slice {
            let d = v - mean;
            var += d * d;
        }
        var /= m;
        let inv_std = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        for cc in 0..per {
            let ch = g * per + cc;
            let ga = gamma.data()[ch];
            let be = beta.data()[ch];
            for p in 0..hw {
                let idx = ch * hw + p;
                out[idx] = ga * (xv[idx] - mean) * inv_std + be;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// 2x average-pool downsample: [C,H,W] -> [C,H/2,W/2], H and W even.
pub fn avgpool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_chw("avgpool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avgpool2", format!("odd spatial dims {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xv = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let ib = ch * h * w;
        let ob = ch * oh * ow;
        for y in 0..oh {
            for x_ in 0..ow {
                let r0 = ib + (2 * y) * w + 2 * x_;
                let r1 = r0 + w;
                out[ob + y * ow + x_] = 0.25 * (xv[r0] + xv[r0 + 1] + xv[r1] + xv[r1 + 1]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// 2x nearest-neighbor upsample: [C,H,W] -> [C,2H,2W].
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = expect_chw("upsample2", x)?;
    let (oh, ow) = (2 * h, 2 * w);
    let xv = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let ib = ch * h * w;
        let ob = ch * oh * ow;
        for y in 0..h {
            for x_ in 0..w {
                let v = xv[ib + y * w + x_];
                let r0 = ob + (2 * y) * ow + 2 * x_;
                let r1 = r0 + ow;
                out[r0] = v;
                out[r0 + 1] = v;
                out[r1] = v;
                out[r1 + 1] = v;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Channel concatenation: [Ca,H,W] ++ [Cb,H,W] -> [Ca+Cb,H,W].
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = expect_chw("concat_channels", a)?;
    let (cb, hb, wb) = expect_chw("concat_channels", b)?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial dims {ha}x{wa} vs {hb}x{wb}"),
        ));
    }
    let mut data = Vec::with_capacity((ca + cb) * ha * wa);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

/// Flat concatenation of two vectors: [n] ++ [m] -> [n+m].
pub fn concat_flat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.numel() + b.numel()], data)
}

/// Same data, new shape; element count must match.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} has {} elements, target {shape:?} has {numel}", a.shape(), a.numel()),
        ));
    }
    Tensor::new(shape.to_vec(), a.data().to_vec())
}

/// Full reduction to a scalar tensor, left-to-right order.
pub fn sum(a: &Tensor) -> Result<Tensor> {
    Ok(Tensor::scalar(a.sum()))
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    Ok(Tensor::scalar(a.mean()))
}

/// Sinusoidal timestep embedding of even dimension `dim`:
/// [sin(t*w_0), cos(t*w_0), ...] with w_i = 10000^(-2i/dim).
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Tensor::new(vec![dim], out).expect("time embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swish_at_zero_is_zero() {
        let x = Tensor::scalar(0.0);
        assert_eq!(swish(&x).unwrap().item(), 0.0);
    }

    #[test]
    fn affine_identity_passes_input_through() {
        let x = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = affine(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3x3_ones_on_ones_4x4() {
        // Hand convolution on the 4x4 grid of ones with an all-ones kernel:
        // corners see 4 taps, edges 6, the four center cells 9.
        let x = Tensor::filled(&[1, 4, 4], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv3x3(&x, &k).unwrap();
        let expected = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn conv_shape_mismatch_reports_op_and_dims() {
        let x = Tensor::filled(&[2, 4, 4], 1.0);
        let k = Tensor::filled(&[1, 3, 3, 3], 1.0);
        let err = conv3x3(&x, &k).unwrap_err().to_string();
        assert!(err.contains("conv3x3"), "{err}");
        assert!(err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn avgpool_then_upsample_shapes() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = avgpool2(&x).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1]);
        assert_eq!(p.item(), 2.5);
        let u = upsample2(&p).unwrap();
        assert_eq!(u.data(), &[2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, -5.0, 5.0]).unwrap();
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let y = group_norm(&x, &gamma, &beta, 2).unwrap();
        // each group has mean 0 afterwards
        let g0: f64 = y.data()[..2].iter().sum();
        let g1: f64 = y.data()[2..].iter().sum();
        assert!(g0.abs() < 1e-12 && g1.abs() < 1e-12);
    }

    #[test]
    fn time_embedding_is_deterministic_and_bounded() {
        let a = time_embedding(17, 32);
        let b = time_embedding(17, 32);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
