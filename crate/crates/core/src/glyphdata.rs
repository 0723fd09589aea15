//! Synthetic face-like glyphs with known attribute parameters.
//!
//! Every image is rendered from four continuous parameters (face
//! radius, mouth curvature, brightness, center jitter), so the exact
//! attribute values behind any rendered or edited image can be
//! recovered by fitting against the renderer. The rendered population
//! is the training corpus for the denoiser and the measurement ground
//! truth for every editing experiment.

use crate::container::{Container, MAGIC_DATASET};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const RADIUS_RANGE: (f64, f64) = (3.0, 6.0);
pub const SMILE_RANGE: (f64, f64) = (-1.0, 1.0);
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.4, 1.0);
pub const JITTER_RANGE: (f64, f64) = (-1.0, 1.0);

pub const DEFAULT_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphParams {
    pub radius: f64,
    pub smile: f64,
    pub brightness: f64,
    pub jitter_x: f64,
    pub jitter_y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Radius,
    Smile,
    Brightness,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Radius, Attribute::Smile, Attribute::Brightness];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Radius => "radius",
            Attribute::Smile => "smile",
            Attribute::Brightness => "brightness",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "radius" => Ok(Attribute::Radius),
            "smile" => Ok(Attribute::Smile),
            "brightness" => Ok(Attribute::Brightness),
            other => Err(Error::Config(format!("unknown attribute {other:?}"))),
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            Attribute::Radius => RADIUS_RANGE,
            Attribute::Smile => SMILE_RANGE,
            Attribute::Brightness => BRIGHTNESS_RANGE,
        }
    }

    pub fn of(self, p: &GlyphParams) -> f64 {
        match self {
            Attribute::Radius => p.radius,
            Attribute::Smile => p.smile,
            Attribute::Brightness => p.brightness,
        }
    }

    pub fn set(self, p: &mut GlyphParams, value: f64) {
        match self {
            Attribute::Radius => p.radius = value,
            Attribute::Smile => p.smile = value,
            Attribute::Brightness => p.brightness = value,
        }
    }
}

impl GlyphParams {
    /// True when every parameter lies inside the generator's ranges.
    pub fn in_generator_range(&self) -> bool {
        (RADIUS_RANGE.0..=RADIUS_RANGE.1).contains(&self.radius)
            && (SMILE_RANGE.0..=SMILE_RANGE.1).contains(&self.smile)
            && (BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1).contains(&self.brightness)
            && (JITTER_RANGE.0..=JITTER_RANGE.1).contains(&self.jitter_x)
            && (JITTER_RANGE.0..=JITTER_RANGE.1).contains(&self.jitter_y)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("radius", self.radius, RADIUS_RANGE),
            ("smile", self.smile, SMILE_RANGE),
            // brightness 0 is permitted for the all-dark test variant
            ("brightness", self.brightness, (0.0, BRIGHTNESS_RANGE.1)),
            ("jitter_x", self.jitter_x, JITTER_RANGE),
            ("jitter_y", self.jitter_y, JITTER_RANGE),
        ];
        for (name, v, (lo, hi)) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Config(format!(
                    "glyph parameter {name}={v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn sample(rng: &mut Rng) -> Self {
        GlyphParams {
            radius: rng.uniform_in(RADIUS_RANGE.0, RADIUS_RANGE.1),
            smile: rng.uniform_in(SMILE_RANGE.0, SMILE_RANGE.1),
            brightness: rng.uniform_in(BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1),
            jitter_x: rng.uniform_in(JITTER_RANGE.0, JITTER_RANGE.1),
            jitter_y: rng.uniform_in(JITTER_RANGE.0, JITTER_RANGE.1),
        }
    }
}

const MOUTH_SAMPLES: usize = 24;
const FEATURE_DARKNESS: f64 = 0.85;

/// Render a glyph to a [1,side,side] tensor in [0,1]. Antialiased disc,
/// two eye dots, and a quadratic mouth whose curvature is the smile
/// parameter; the whole foreground scales with brightness.
pub fn render(params: &GlyphParams, side: usize) -> Result<Tensor> {
    params.validate()?;
    Ok(render_raw(params, side))
}

/// Renderer without range validation; the fitting oracle probes
/// parameters slightly outside the generator's ranges.
pub(crate) fn render_raw(params: &GlyphParams, side: usize) -> Tensor {
    let r = params.radius;
    let cx = (side as f64 - 1.0) / 2.0 + params.jitter_x;
    let cy = (side as f64 - 1.0) / 2.0 + params.jitter_y;

    // features have fixed absolute geometry so each attribute moves its
    // own pixels: radius the disc edge, smile the mouth arc only
    let eye_r = 0.55;
    let eyes = [(cx - 1.5, cy - 1.5), (cx + 1.5, cy - 1.5)];

    // mouth polyline: px(u) = cx + 2.2 u, py(u) = cy + 1.45 - 2 s (u^2 - 0.5);
    // the 2 px arc swing keeps smile differences correlated across the
    // +-1 px center jitter
    let mut mouth = [(0.0f64, 0.0f64); MOUTH_SAMPLES];
    for (k, point) in mouth.iter_mut().enumerate() {
        let u = -1.0 + 2.0 * k as f64 / (MOUTH_SAMPLES - 1) as f64;
        let px = cx + 2.2 * u;
        let py = cy + 1.45 - 2.0 * params.smile * (u * u - 0.5);
        *point = (px, py);
    }
    let mouth_thick = 0.45;
    // pixels farther than this from the curve band cannot be covered
    let reach = mouth_thick + 0.5;
    let mouth_y_lo = mouth.iter().map(|p| p.1).fold(f64::INFINITY, f64::min) - reach;
    let mouth_y_hi = mouth.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max) + reach;

    let mut data = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let d_face = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let cov_face = (r + 0.5 - d_face).clamp(0.0, 1.0);
            if cov_face == 0.0 {
                continue;
            }
            let mut cov_feat = 0.0f64;
            for &(ex, ey) in &eyes {
                let d = ((fx - ex).powi(2) + (fy - ey).powi(2)).sqrt();
                cov_feat = cov_feat.max((eye_r + 0.5 - d).clamp(0.0, 1.0));
            }
            if fy >= mouth_y_lo && fy <= mouth_y_hi {
                let mut d_mouth = f64::INFINITY;
                for &(mx, my) in &mouth {
                    let d = ((fx - mx).powi(2) + (fy - my).powi(2)).sqrt();
                    d_mouth = d_mouth.min(d);
                }
                cov_feat = cov_feat.max((mouth_thick + 0.5 - d_mouth).clamp(0.0, 1.0));
            }
            data[y * side + x] =
                params.brightness * cov_face * (1.0 - FEATURE_DARKNESS * cov_feat);
        }
    }
    Tensor::new(vec![1, side, side], data).expect("render shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

/// Seeded glyph corpus; every 10th sample is tagged held-out.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub side: usize,
    pub seed: u64,
    pub images: Vec<Tensor>,
    pub params: Vec<GlyphParams>,
    pub split: Vec<Split>,
}

pub fn generate(n: usize, seed: u64, side: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    let mut rng = Rng::seed(seed);
    let mut images = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for i in 0..n {
        let p = GlyphParams::sample(&mut rng);
        images.push(render(&p, side)?);
        params.push(p);
        split.push(if i % 10 == 9 { Split::HeldOut } else { Split::Train });
    }
    Ok(Dataset { side, seed, images, params, split })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "glyph-dataset",
            "side": self.side,
            "seed": self.seed,
            "count": self.len(),
        }));
        let mut packed = Vec::with_capacity(self.len() * 5);
        for p in &self.params {
            packed.extend_from_slice(&[p.radius, p.smile, p.brightness, p.jitter_x, p.jitter_y]);
        }
        c.push("params", Tensor::new(vec![self.len(), 5], packed).expect("params pack"));
        let split: Vec<f64> = self
            .split
            .iter()
            .map(|s| if *s == Split::HeldOut { 1.0 } else { 0.0 })
            .collect();
        c.push("split", Tensor::new(vec![self.len()], split).expect("split pack"));
        for (i, img) in self.images.iter().enumerate() {
            c.push(format!("img/{i:05}"), img.clone());
        }
        c
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().write(MAGIC_DATASET, path)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let c = Container::read(MAGIC_DATASET, path)?;
        Self::from_container(&c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let side = c.config["side"]
            .as_u64()
            .ok_or_else(|| Error::Header("dataset config missing side".into()))?
            as usize;
        let seed = c.config["seed"]
            .as_u64()
            .ok_or_else(|| Error::Header("dataset config missing seed".into()))?;
        let count = c.config["count"]
            .as_u64()
            .ok_or_else(|| Error::Header("dataset config missing count".into()))?
            as usize;
        let packed = c
            .get("params")
            .ok_or_else(|| Error::Header("dataset missing params tensor".into()))?;
        let split_t = c
            .get("split")
            .ok_or_else(|| Error::Header("dataset missing split tensor".into()))?;
        let mut params = Vec::with_capacity(count);
        for i in 0..count {
            let row = &packed.data()[i * 5..(i + 1) * 5];
            params.push(GlyphParams {
                radius: row[0],
                smile: row[1],
                brightness: row[2],
                jitter_x: row[3],
                jitter_y: row[4],
            });
        }
        let split = split_t
            .data()
            .iter()
            .map(|&v| if v > 0.5 { Split::HeldOut } else { Split::Train })
            .collect();
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            let img = c
                .get(&format!("img/{i:05}"))
                .ok_or_else(|| Error::Header(format!("dataset missing image {i}")))?;
            images.push(img.clone());
        }
        Ok(Dataset { side, seed, images, params, split })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_range_and_determinism() {
        let p = GlyphParams {
            radius: 4.5,
            smile: 0.7,
            brightness: 0.9,
            jitter_x: 0.3,
            jitter_y: -0.4,
        };
        let a = render(&p, DEFAULT_SIDE).unwrap();
        let b = render(&p, DEFAULT_SIDE).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_brightness_renders_all_zero() {
        let p = GlyphParams {
            radius: 5.0,
            smile: 0.0,
            brightness: 0.0,
            jitter_x: 0.0,
            jitter_y: 0.0,
        };
        let img = render(&p, DEFAULT_SIDE).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radius_increases_foreground_area() {
        let base = GlyphParams {
            radius: 3.0,
            smile: 0.0,
            brightness: 1.0,
            jitter_x: 0.0,
            jitter_y: 0.0,
        };
        let small = render(&base, DEFAULT_SIDE).unwrap();
        let big = render(&GlyphParams { radius: 6.0, ..base }, DEFAULT_SIDE).unwrap();
        let count = |t: &Tensor| t.data().iter().filter(|&&v| v > 0.05).count();
        assert!(count(&big) > count(&small));
    }

    #[test]
    fn out_of_range_params_rejected() {
        let p = GlyphParams {
            radius: 9.0,
            smile: 0.0,
            brightness: 1.0,
            jitter_x: 0.0,
            jitter_y: 0.0,
        };
        assert!(render(&p, DEFAULT_SIDE).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic_and_splits_disjoint() {
        let a = generate(50, 77, DEFAULT_SIDE).unwrap();
        let b = generate(50, 77, DEFAULT_SIDE).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.data(), y.data());
        }
        let train = a.indices(Split::Train);
        let held = a.indices(Split::HeldOut);
        assert_eq!(train.len() + held.len(), a.len());
        assert!(train.iter().all(|i| !held.contains(i)));
        assert!(!held.is_empty());
    }

    #[test]
    fn archive_roundtrip_is_identical() {
        let d = generate(12, 5, DEFAULT_SIDE).unwrap();
        let bytes = d.to_container().to_bytes(MAGIC_DATASET).unwrap();
        let back = Dataset::from_container(
            &Container::from_bytes(MAGIC_DATASET, &bytes).unwrap(),
        )
        .unwrap();
        let bytes2 = back.to_container().to_bytes(MAGIC_DATASET).unwrap();
        assert_eq!(bytes, bytes2);
    }

    fn ks_uniform(mut values: Vec<f64>, lo: f64, hi: f64) -> f64 {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = values.len() as f64;
        let mut worst = 0.0f64;
        for (i, v) in values.iter().enumerate() {
            let cdf = (v - lo) / (hi - lo);
            let lo_e = i as f64 / n;
            let hi_e = (i + 1) as f64 / n;
            worst = worst.max((cdf - lo_e).abs()).max((cdf - hi_e).abs());
        }
        worst
    }

    #[test]
    fn attribute_marginals_approximately_uniform() {
        let d = generate(2000, 123, DEFAULT_SIDE).unwrap();
        for attr in Attribute::ALL {
            let (lo, hi) = attr.range();
            let vals: Vec<f64> = d.params.iter().map(|p| attr.of(p)).collect();
            let ks = ks_uniform(vals, lo, hi);
            assert!(ks < 0.1, "{} KS {ks}", attr.name());
        }
    }
}
