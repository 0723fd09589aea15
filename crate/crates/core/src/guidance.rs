//! Surrogate embedder, directional loss, and the attribute oracle.
//!
//! The embedder stands in for a pretrained image/text encoder pair: the
//! image side is a fixed seeded random projection over multi-scale
//! pixel statistics; the text side maps a prompt onto a calibrated,
//! orthogonalized attribute basis in the same 32-dimensional space. The
//! basis directions are obtained once by averaging image-embedding
//! differences over rendered glyph pairs, which is exactly what makes
//! the directional loss optimizable against rendered data.
//!
//! The attribute oracle inverts the glyph renderer by brute-force grid
//! search, so edited images get measured attribute values with no
//! learned component in the loop.

use crate::container::{Container, MAGIC_EMBEDDER};
use crate::error::{Error, Result};
use crate::glyphdata::{render, Attribute, GlyphParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const EMBED_DIM: usize = 32;
pub const CALIBRATION_PAIRS: usize = 200;
/// |delta-I| below this is treated as "no visual change": the loss is
/// pinned to 1 (orthogonal convention) and the event is flagged.
pub const DEGENERATE_DELTA_I: f64 = 1e-12;
/// Norm stabilizer of the tape-side cosine.
const NORM_STABILIZER: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditDirection {
    Increase,
    Decrease,
}

impl EditDirection {
    pub fn signum(self) -> f64 {
        match self {
            EditDirection::Increase => 1.0,
            EditDirection::Decrease => -1.0,
        }
    }
}

/// How far the target description sits from the neutral source, stated
/// as the cosine similarity between their embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Slight,
    Moderate,
    Strong,
    Similarity(f64),
}

impl Strength {
    pub fn similarity(self) -> f64 {
        match self {
            Strength::Slight => 0.95,
            Strength::Moderate => 0.90,
            Strength::Strong => 0.67,
            Strength::Similarity(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub attribute: Attribute,
    pub direction: EditDirection,
    pub strength: Strength,
    pub source: String,
    pub target: String,
}

impl PromptSpec {
    pub fn new(attribute: Attribute, direction: EditDirection) -> Self {
        let verb = match direction {
            EditDirection::Increase => "more",
            EditDirection::Decrease => "less",
        };
        PromptSpec {
            attribute,
            direction,
            strength: Strength::Moderate,
            source: "glyph".to_string(),
            target: format!("glyph with {verb} {}", attribute.name()),
        }
    }

    pub fn with_strength(mut self, strength: Strength) -> Self {
        self.strength = strength;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strength.similarity();
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Config(format!("prompt similarity {s} outside [0, 1]")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Embedder
// ---------------------------------------------------------------------------

/// Frozen two-sided embedder. Never trained; fully determined by
/// (side, seed) and the calibration renders.
#[derive(Clone, Debug)]
pub struct Embedder {
    side: usize,
    seed: u64,
    /// [EMBED_DIM, n_features] projection over multi-scale statistics.
    projection: Tensor,
    /// Orthonormal attribute directions, one per attribute, in the
    /// fixed order of [`Attribute::ALL`].
    basis: Vec<Tensor>,
    /// Unit vector orthogonal to every basis direction: the embedding
    /// of the neutral source description.
    neutral: Tensor,
}

fn feature_len(side: usize) -> usize {
    side * side + (side / 2) * (side / 2) + (side / 4) * (side / 4) + 2 * side + 2
}

/// Constant [2*side, side*side] matrix computing row and column means.
fn profile_matrix(side: usize) -> Tensor {
    let mut m = Tensor::zeros(&[2 * side, side * side]);
    let w = 1.0 / side as f64;
    for y in 0..side {
        for x in 0..side {
            m.data_mut()[y * side * side + y * side + x] = w;
            m.data_mut()[(side + x) * side * side + y * side + x] = w;
        }
    }
    m
}

/// The raw multi-scale statistics every embedding projects from:
/// pixels, 2x and 4x pooled pixels, row/column profiles, mean, and
/// second moment.
fn features_on_tape(tape: &mut Tape, image: Var, side: usize) -> Result<Var> {
    let flat = tape.flatten(image)?;
    let pooled2 = tape.avgpool2(image)?;
    let pooled4 = tape.avgpool2(pooled2)?;
    let pooled2_flat = tape.flatten(pooled2)?;
    let pooled4_flat = tape.flatten(pooled4)?;
    let prof_m = tape.constant(profile_matrix(side));
    let prof_b = tape.constant(Tensor::zeros(&[2 * side]));
    let profiles = tape.affine(flat, prof_m, prof_b)?;
    let mean = tape.mean(flat)?;
    let sq = tape.mul(flat, flat)?;
    let mean_sq = tape.mean(sq)?;
    let mut feat = tape.concat_flat(flat, pooled2_flat)?;
    feat = tape.concat_flat(feat, pooled4_flat)?;
    feat = tape.concat_flat(feat, profiles)?;
    feat = tape.concat_flat(feat, mean)?;
    feat = tape.concat_flat(feat, mean_sq)?;
    Ok(feat)
}

fn features_plain(image: &Tensor, side: usize) -> Result<Tensor> {
    let mut tape = Tape::with_capacity(16);
    let iv = tape.constant(image.clone());
    let out = features_on_tape(&mut tape, iv, side)?;
    Ok(tape.value(out).clone())
}

impl Embedder {
    /// Build the projection and calibrate the attribute basis from
    /// rendered glyph pairs.
    ///
    /// The mean feature-space difference per attribute is measured
    /// first; the projection's leading rows are then chosen to span
    /// those directions (remaining rows are random, the whole matrix
    /// orthonormal). A plain random projection loses the smile margin
    /// in its distortion, which breaks the sign-consistency the
    /// directional loss needs.
    pub fn calibrate(side: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::seed(seed ^ 0xe1b3);
        let n_feat = feature_len(side);

        // mean raw-feature difference per attribute over rendered pairs
        let mut raw_dirs: Vec<Tensor> = Vec::with_capacity(Attribute::ALL.len());
        for attr in Attribute::ALL {
            let (lo, hi) = attr.range();
            let (v_lo, v_hi) = (lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo));
            let mut acc = Tensor::zeros(&[n_feat]);
            for _ in 0..CALIBRATION_PAIRS {
                let mut p_lo = GlyphParams::sample(&mut rng);
                let mut p_hi = p_lo;
                attr.set(&mut p_lo, v_lo);
                attr.set(&mut p_hi, v_hi);
                let f_lo = features_plain(&render(&p_lo, side)?, side)?;
                let f_hi = features_plain(&render(&p_hi, side)?, side)?;
                let mut d = f_hi;
                d.axpy(-1.0, &f_lo);
                acc.axpy(1.0, &d);
            }
            acc.scale_in_place(1.0 / CALIBRATION_PAIRS as f64);
            raw_dirs.push(acc);
        }

        // Projection rows 1..3 are the dual basis of the raw attribute
        // directions, so each direction maps onto its own embedding
        // axis: the projected directions come out mutually orthogonal
        // while still pointing at the natural image change of exactly
        // one attribute. Sequentially orthogonalizing correlated raw
        // directions instead would leave later prompts aiming at
        // "attribute up minus earlier attributes", and trained edits
        // would actively undo each other. Remaining rows are random,
        // orthogonal to the attribute span.
        let k = raw_dirs.len();
        let mut gram = vec![0.0f64; k * k];
        for i in 0..k {
            for j in 0..k {
                gram[i * k + j] = dot(&raw_dirs[i], &raw_dirs[j]);
            }
        }
        let gram_inv = invert_3x3(&gram).ok_or_else(|| {
            Error::Config("attribute directions degenerate during calibration".into())
        })?;
        let mut rows: Vec<Tensor> = Vec::with_capacity(EMBED_DIM);
        for i in 0..k {
            let mut dual = Tensor::zeros(&[n_feat]);
            for j in 0..k {
                dual.axpy(gram_inv[i * k + j], &raw_dirs[j]);
            }
            let n = dual.norm_l2();
            if n < 1e-9 {
                return Err(Error::Config(
                    "attribute directions degenerate during calibration".into(),
                ));
            }
            dual.scale_in_place(1.0 / n);
            rows.push(dual);
        }
        // complete with random rows orthogonal to the attribute span
        // and to each other
        while rows.len() < EMBED_DIM {
            let mut v = Tensor::randn(&[n_feat], &mut rng);
            for d in &raw_dirs {
                let p = dot(&v, d) / dot(d, d);
                v.axpy(-p, d);
            }
            for r in rows.iter().skip(k) {
                let p = dot(&v, r);
                v.axpy(-p, r);
            }
            let n = v.norm_l2();
            if n < 1e-9 {
                continue;
            }
            v.scale_in_place(1.0 / n);
            rows.push(v);
        }
        let mut projection = Tensor::zeros(&[EMBED_DIM, n_feat]);
        for (i, r) in rows.iter().enumerate() {
            projection.data_mut()[i * n_feat..(i + 1) * n_feat].copy_from_slice(r.data());
        }

        let mut emb = Embedder {
            side,
            seed,
            projection,
            basis: Vec::new(),
            neutral: Tensor::zeros(&[EMBED_DIM]),
        };

        // embedding-space mean delta-I per attribute is the projected
        // raw mean (the embedder is linear); orthogonalize in order
        let mut basis: Vec<Tensor> = Vec::with_capacity(raw_dirs.len());
        for d in &raw_dirs {
            let mut v = Tensor::zeros(&[EMBED_DIM]);
            for o in 0..EMBED_DIM {
                let row = &emb.projection.data()[o * n_feat..(o + 1) * n_feat];
                let mut acc = 0.0;
                for i in 0..n_feat {
                    acc += row[i] * d.data()[i];
                }
                v.data_mut()[o] = acc;
            }
            for b in &basis {
                let p = dot(&v, b);
                v.axpy(-p, b);
            }
            let n = v.norm_l2();
            if n < 1e-9 {
                return Err(Error::Config(
                    "attribute basis degenerate during calibration".into(),
                ));
            }
            v.scale_in_place(1.0 / n);
            basis.push(v);
        }

        // neutral direction: random vector orthogonalized against the basis
        let mut neutral = Tensor::randn(&[EMBED_DIM], &mut rng);
        for b in &basis {
            let p = dot(&neutral, b);
            neutral.axpy(-p, b);
        }
        neutral.scale_in_place(1.0 / neutral.norm_l2());

        emb.basis = basis;
        emb.neutral = neutral;
        Ok(emb)
    }


    pub fn side(&self) -> usize {
        self.side
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn basis(&self, attr: Attribute) -> &Tensor {
        let idx = Attribute::ALL.iter().position(|a| *a == attr).expect("known attribute");
        &self.basis[idx]
    }

    /// Multi-scale feature embedding of an image, on a tape.
    pub fn embed_on_tape(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        if tape.shape(image) != [1, self.side, self.side] {
            return Err(Error::shape(
                "embed",
                format!("image {:?}, embedder side {}", tape.shape(image), self.side),
            ));
        }
        let feat = features_on_tape(tape, image, self.side)?;
        let w = tape.constant(self.projection.clone());
        let zero_bias = tape.constant(Tensor::zeros(&[EMBED_DIM]));
        tape.affine(feat, w, zero_bias)
    }

    /// Plain-tensor embedding; same numeric path as the tape version.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::with_capacity(16);
        let iv = tape.constant(image.clone());
        let out = self.embed_on_tape(&mut tape, iv)?;
        Ok(tape.value(out).clone())
    }

    /// Embedding of the neutral source description (unit norm).
    pub fn embed_source(&self, _prompt: &PromptSpec) -> Tensor {
        self.neutral.clone()
    }

    /// Embedding of the target description: cos(theta) neutral +
    /// sin(theta) sign * basis(attribute), unit norm by construction.
    pub fn embed_target(&self, prompt: &PromptSpec) -> Tensor {
        let sim = prompt.strength.similarity().clamp(0.0, 1.0);
        let ortho = (1.0 - sim * sim).sqrt();
        let mut out = self.neutral.clone();
        out.scale_in_place(sim);
        out.axpy(ortho * prompt.direction.signum(), self.basis(prompt.attribute));
        out
    }

    /// cos(E_T(source), E_T(target)); both are unit vectors.
    pub fn prompt_similarity(&self, prompt: &PromptSpec) -> f64 {
        dot(&self.embed_source(prompt), &self.embed_target(prompt))
    }

    /// Delta-T for the directional loss.
    pub fn delta_text(&self, prompt: &PromptSpec) -> Tensor {
        let mut d = self.embed_target(prompt);
        d.axpy(-1.0, &self.embed_source(prompt));
        d
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "kind": "embedder",
            "side": self.side,
            "seed": self.seed,
            "dim": EMBED_DIM,
        }));
        c.push("projection", self.projection.clone());
        for (i, attr) in Attribute::ALL.iter().enumerate() {
            c.push(format!("basis/{}", attr.name()), self.basis[i].clone());
        }
        c.push("neutral", self.neutral.clone());
        c.write(MAGIC_EMBEDDER, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::read(MAGIC_EMBEDDER, path)?;
        let side = c.config["side"].as_u64().ok_or_else(|| Error::Header("embedder side".into()))? as usize;
        let seed = c.config["seed"].as_u64().ok_or_else(|| Error::Header("embedder seed".into()))?;
        let projection = c
            .get("projection")
            .ok_or_else(|| Error::Header("embedder projection".into()))?
            .clone();
        let mut basis = Vec::with_capacity(Attribute::ALL.len());
        for attr in Attribute::ALL {
            basis.push(
                c.get(&format!("basis/{}", attr.name()))
                    .ok_or_else(|| Error::Header(format!("embedder basis {}", attr.name())))?
                    .clone(),
            );
        }
        let neutral =
            c.get("neutral").ok_or_else(|| Error::Header("embedder neutral".into()))?.clone();
        Ok(Embedder { side, seed, projection, basis, neutral })
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let mut acc = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        acc += x * y;
    }
    acc
}

/// Inverse of a 3x3 matrix in row-major order; None when singular.
fn invert_3x3(m: &[f64]) -> Option<Vec<f64>> {
    debug_assert_eq!(m.len(), 9);
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if det.abs() < 1e-18 {
        return None;
    }
    let inv_det = 1.0 / det;
    Some(vec![
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ])
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// 1 - cos(delta_i, delta_t), pinned to 1 when delta_i is degenerate.
pub fn cosine_distance_loss(delta_i: &Tensor, delta_t: &Tensor) -> f64 {
    let ni = delta_i.norm_l2();
    if ni < DEGENERATE_DELTA_I {
        return 1.0;
    }
    1.0 - dot(delta_i, delta_t) / (ni * delta_t.norm_l2())
}

/// 1 - cos(delta-I, delta-T). Degenerate delta-I pins the loss to 1.
pub fn directional_loss(
    embedder: &Embedder,
    x_edit: &Tensor,
    x_source: &Tensor,
    prompt: &PromptSpec,
) -> Result<f64> {
    prompt.validate()?;
    let e_edit = embedder.embed_image(x_edit)?;
    let e_src = embedder.embed_image(x_source)?;
    let mut delta_i = e_edit;
    delta_i.axpy(-1.0, &e_src);
    Ok(cosine_distance_loss(&delta_i, &embedder.delta_text(prompt)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_clip: f64,
    pub lambda_recon: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_clip < 0.0 || self.lambda_recon < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got ({}, {})",
                self.lambda_clip, self.lambda_recon
            )));
        }
        Ok(())
    }
}

/// lambda_clip * directional + lambda_recon * mean |P_edit - P_source|.
pub fn total_loss(
    embedder: &Embedder,
    p_edit: &Tensor,
    p_source: &Tensor,
    prompt: &PromptSpec,
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    if !p_edit.same_shape(p_source) {
        return Err(Error::shape(
            "total_loss",
            format!("{:?} vs {:?}", p_edit.shape(), p_source.shape()),
        ));
    }
    let dir = directional_loss(embedder, p_edit, p_source, prompt)?;
    let mut recon = 0.0;
    for (&a, &b) in p_edit.data().iter().zip(p_source.data()) {
        recon += (a - b).abs();
    }
    recon /= p_edit.numel() as f64;
    Ok(weights.lambda_clip * dir + weights.lambda_recon * recon)
}

/// Reconstruction weight: 3 x prompt similarity, clamped at zero.
pub fn recon_weight(embedder: &Embedder, prompt: &PromptSpec) -> f64 {
    (3.0 * embedder.prompt_similarity(prompt)).max(0.0)
}

/// Tape-side total loss for direction training. `p_source` is a
/// constant; gradients flow through `p_edit` only. Returns the loss
/// var plus the two unweighted components and a degeneracy flag.
pub struct LossParts {
    pub total: Var,
    pub directional: f64,
    pub recon: f64,
    pub degenerate_delta_i: bool,
}

pub fn total_loss_on_tape(
    embedder: &Embedder,
    tape: &mut Tape,
    p_edit: Var,
    p_source: Var,
    prompt: &PromptSpec,
    weights: &LossWeights,
) -> Result<LossParts> {
    weights.validate()?;
    prompt.validate()?;
    let e_edit = embedder.embed_on_tape(tape, p_edit)?;
    let e_src = embedder.embed_on_tape(tape, p_source)?;
    let delta_i = tape.sub(e_edit, e_src)?;

    let ni_now = tape.value(delta_i).norm_l2();
    let degenerate = ni_now < DEGENERATE_DELTA_I;
    // |delta_i| is stabilized as sqrt(|delta_i|^2 + eps^2): at the
    // zero-shift starting point the loss still evaluates to 1 but keeps
    // a finite gradient along delta-T, which is what lets training
    // escape the zero-initialized direction network.
    let dir_term = {
        let dt = embedder.delta_text(prompt);
        let nt = dt.norm_l2();
        let dt_var = tape.constant(dt);
        let num = tape.dot(delta_i, dt_var)?;
        let sq = tape.mul(delta_i, delta_i)?;
        let sumsq = tape.sum(sq)?;
        let stabilized = tape.add_const(sumsq, NORM_STABILIZER * NORM_STABILIZER)?;
        let ni = tape.sqrt(stabilized)?;
        let denom = tape.scale(ni, nt)?;
        let cos = tape.div(num, denom)?;
        let neg = tape.scale(cos, -1.0)?;
        tape.add_const(neg, 1.0)?
    };

    let diff = tape.sub(p_edit, p_source)?;
    let absdiff = tape.abs(diff)?;
    let recon_term = tape.mean(absdiff)?;

    let w_dir = tape.scale(dir_term, weights.lambda_clip)?;
    let w_rec = tape.scale(recon_term, weights.lambda_recon)?;
    let total = tape.add(w_dir, w_rec)?;
    Ok(LossParts {
        total,
        directional: tape.value(dir_term).item(),
        recon: tape.value(recon_term).item(),
        degenerate_delta_i: degenerate,
    })
}

// ---------------------------------------------------------------------------
// Attribute oracle
// ---------------------------------------------------------------------------

/// Steps of the generator's parameter grid ("one grid cell"). The fine
/// round refines below these; recoverability is guaranteed at this
/// resolution.
const COARSE_RADIUS: f64 = 0.5;
const COARSE_SMILE: f64 = 0.25;
const COARSE_BRIGHT: f64 = 0.1;
const COARSE_JITTER: f64 = 1.0;

pub fn grid_resolution(attr: Attribute) -> f64 {
    match attr {
        Attribute::Radius => COARSE_RADIUS,
        Attribute::Smile => COARSE_SMILE,
        Attribute::Brightness => COARSE_BRIGHT,
    }
}

/// Mean-squared-error threshold above which a fit is flagged.
pub const LOW_CONFIDENCE_RESIDUAL: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
pub struct AttributeMeasurement {
    pub value: f64,
    /// Pixel MSE between the image and the best-fitting render.
    pub residual: f64,
    pub low_confidence: bool,
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut v = lo;
    while v <= hi + 1e-9 {
        out.push(v.min(hi));
        v += step;
    }
    out
}

/// The render is linear in brightness, so for a fixed shape the optimal
/// brightness has the closed form <image, shape> / <shape, shape>.
/// Returns (brightness, mse at that brightness).
fn solve_brightness(image: &Tensor, unit_shape: &Tensor) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&img, &sh) in image.data().iter().zip(unit_shape.data()) {
        num += img * sh;
        den += sh * sh;
    }
    let b = if den > 0.0 { (num / den).clamp(0.0, 1.6) } else { 0.0 };
    let mut err = 0.0;
    for (&img, &sh) in image.data().iter().zip(unit_shape.data()) {
        let d = img - b * sh;
        err += d * d;
    }
    (b, err / image.numel() as f64)
}

fn search(
    image: &Tensor,
    side: usize,
    radii: &[f64],
    smiles: &[f64],
    jx_axis: &[f64],
    jy_axis: &[f64],
) -> (GlyphParams, f64) {
    let mut best = (
        GlyphParams {
            radius: radii[0],
            smile: smiles[0],
            brightness: 1.0,
            jitter_x: jx_axis[0],
            jitter_y: jy_axis[0],
        },
        f64::INFINITY,
    );
    for &r in radii {
        for &s in smiles {
            for &jx in jx_axis {
                for &jy in jy_axis {
                    let mut p = GlyphParams {
                        radius: r,
                        smile: s,
                        brightness: 1.0,
                        jitter_x: jx,
                        jitter_y: jy,
                    };
                    let shape = crate::glyphdata::render_raw(&p, side);
                    let (b, err) = solve_brightness(image, &shape);
                    if err < best.1 {
                        p.brightness = b;
                        best = (p, err);
                    }
                }
            }
        }
    }
    best
}

/// Two-round coarse-to-fine brute-force fit of glyph parameters.
///
/// Round one pins the coarse geometry (radius, jitter) with a neutral
/// mouth: the mouth's few pixels barely move that ranking. Round two
/// refines the geometry jointly while sweeping the smile across its
/// whole range, because the smile's pixel signal only becomes readable
/// once the geometry is nearly right. Brightness is solved in closed
/// form per candidate. Grids extend slightly past the generator's
/// ranges so edited images measure without saturating.
pub fn fit_glyph(image: &Tensor) -> Result<(GlyphParams, f64)> {
    let side = match *image.shape() {
        [1, h, w] if h == w => h,
        _ => {
            return Err(Error::shape(
                "fit_glyph",
                format!("expected square [1,S,S], got {:?}", image.shape()),
            ))
        }
    };
    let (r_lo, r_hi) = (2.25, 6.75);
    let (s_lo, s_hi) = (-1.25, 1.25);
    let (j_lo, j_hi) = (-1.25, 1.25);
    let coarse = search(
        image,
        side,
        &grid(r_lo, r_hi, COARSE_RADIUS),
        &[0.0],
        &grid(j_lo, j_hi, COARSE_JITTER / 2.0),
        &grid(j_lo, j_hi, COARSE_JITTER / 2.0),
    )
    .0;
    let refine = |center: f64, coarse_step: f64, lo: f64, hi: f64| -> Vec<f64> {
        let step = coarse_step / 4.0;
        grid((center - coarse_step / 2.0).max(lo), (center + coarse_step / 2.0).min(hi), step)
    };
    let (best, residual) = search(
        image,
        side,
        &refine(coarse.radius, COARSE_RADIUS, r_lo, r_hi),
        &grid(s_lo, s_hi, COARSE_SMILE / 2.0),
        &refine(coarse.jitter_x, COARSE_JITTER / 2.0, j_lo, j_hi),
        &refine(coarse.jitter_y, COARSE_JITTER / 2.0, j_lo, j_hi),
    );
    // Sub-cell refinement: fit a parabola through the error at the best
    // grid value and its neighbors, per shape dimension. Brightness is
    // already continuous through the closed-form solve; without this,
    // radius and smile quantize to the grid and sub-cell edits read as
    // exactly zero change.
    let parabolic = |p: &GlyphParams, pick: fn(&mut GlyphParams, f64), center: f64, step: f64| {
        let eval = |v: f64| -> f64 {
            let mut q = *p;
            q.brightness = 1.0; // unit shape; brightness is solved per candidate
            pick(&mut q, v);
            let shape = crate::glyphdata::render_raw(&q, side);
            solve_brightness(image, &shape).1
        };
        let (e_lo, e_mid, e_hi) = (eval(center - step), eval(center), eval(center + step));
        let denom = e_lo - 2.0 * e_mid + e_hi;
        if denom <= 0.0 {
            return center;
        }
        center + (step * 0.5 * (e_lo - e_hi) / denom).clamp(-step, step)
    };
    let mut best = best;
    best.radius = parabolic(&best, |p, v| p.radius = v, best.radius, COARSE_RADIUS / 4.0);
    best.smile = parabolic(&best, |p, v| p.smile = v, best.smile, COARSE_SMILE / 2.0);
    // re-solve brightness and the residual at the refined shape
    let mut unit = best;
    unit.brightness = 1.0;
    let shape = crate::glyphdata::render_raw(&unit, side);
    let (b, err) = solve_brightness(image, &shape);
    best.brightness = b;
    Ok((best, err.min(residual)))
}

/// Fit the glyph parameters and report the requested attribute. Images
/// that do not resemble any glyph, or whose best fit falls outside the
/// generator's parameter ranges, come back flagged low-confidence.
pub fn measure_attribute(image: &Tensor, attribute: Attribute) -> Result<AttributeMeasurement> {
    let (params, residual) = fit_glyph(image)?;
    Ok(AttributeMeasurement {
        value: attribute.of(&params),
        residual,
        low_confidence: residual > LOW_CONFIDENCE_RESIDUAL || !params.in_generator_range(),
    })
}
