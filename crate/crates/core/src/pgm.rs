//! PGM (P5, 8-bit) image reading and writing.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use std::fs;
use std::path::Path;

/// Quantize a [1,H,W] or [H,W] tensor in [0,1] to 8-bit P5 bytes.
pub fn to_pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [1, h, w] => (h, w),
        [h, w] => (h, w),
        _ => {
            return Err(Error::shape(
                "pgm",
                format!("expected [1,H,W] or [H,W], got {:?}", image.shape()),
            ))
        }
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, to_pgm_bytes(image)?)?;
    Ok(())
}

/// Read a P5 file back into a [1,H,W] tensor with values in [0,1].
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Header(format!("pgm: {m}"));
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad("not a P5 file"));
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(Error::Truncated("pgm payload".into()));
    }
    let data = bytes[pos..pos + w * h].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_roundtrip() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let bytes = to_pgm_bytes(&img).unwrap();
        let back = parse_pgm(&bytes).unwrap();
        for (&a, &b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}
