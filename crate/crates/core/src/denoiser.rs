//! The noise-prediction network.
//!
//! A symmetric conv encoder/decoder with additive skip connections and
//! a sinusoidal timestep embedding added per level. The deepest feature
//! map (the bottleneck) is exposed as the semantic activation space:
//! callers can read it and add a shift to it before the decoder half
//! runs. The skips connect encoder levels to decoder levels directly,
//! so the bottleneck is the one place no skip bypasses.
//!
//! Injection sites are indexed 0..2L-2: encoder level outputs, then the
//! bottleneck (index L-1, the default), then decoder level outputs.

use crate::container::{Container, MAGIC_CHECKPOINT};
use crate::error::{Error, Result};
use crate::numerics::kernels::time_embedding;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParamSet;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub side: usize,
    pub widths: Vec<usize>,
    pub levels: usize,
    pub time_dim: usize,
    pub groups: usize,
    /// Which activation receives the additive shift; L-1 is the bottleneck.
    pub injection_layer: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            side: 16,
            widths: vec![16, 32, 64],
            levels: 3,
            time_dim: 32,
            groups: 8,
            injection_layer: 2,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.widths.len() != self.levels {
            return Err(Error::Config(format!(
                "widths {:?} must have one entry per level ({})",
                self.widths, self.levels
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        let down = 1usize << (self.levels - 1);
        if self.side % down != 0 {
            return Err(Error::Config(format!(
                "side {} not divisible by 2^(levels-1) = {down}",
                self.side
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be positive and even".into()));
        }
        if self.injection_layer >= 2 * self.levels - 1 {
            return Err(Error::Config(format!(
                "injection layer {} out of range (sites 0..{})",
                self.injection_layer,
                2 * self.levels - 2
            )));
        }
        for &w in &self.widths {
            if w % self.groups_for(w) != 0 {
                return Err(Error::Config(format!("width {w} not divisible by groups")));
            }
        }
        Ok(())
    }

    fn groups_for(&self, channels: usize) -> usize {
        self.groups.min(channels)
    }

    pub fn bottleneck_channels(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Spatial side and channels at a given injection site.
    pub fn site_shape(&self, site: usize) -> Vec<usize> {
        let level = if site < self.levels { site } else { 2 * (self.levels - 1) - site };
        let spatial = self.side >> level;
        vec![self.widths[level], spatial, spatial]
    }

    /// Shape of the bottleneck activation: [C_last, side/2^(L-1), ...].
    pub fn bottleneck_shape(&self) -> Vec<usize> {
        self.site_shape(self.levels - 1)
    }

    pub fn injection_shape(&self) -> Vec<usize> {
        self.site_shape(self.injection_layer)
    }
}

/// The deepest feature map captured during a forward pass.
#[derive(Clone, Debug)]
pub struct BottleneckActivation {
    pub tensor: Tensor,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamSet,
    frozen: bool,
}

/// Parameter vars bound on a tape, addressable by name.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    pub fn new(set: &'a ParamSet, vars: Vec<Var>) -> Self {
        debug_assert_eq!(set.len(), vars.len());
        BoundParams { set, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let idx = self
            .set
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let mut params = ParamSet::new();
        let widths = &config.widths;
        let levels = config.levels;

        let conv = |params: &mut ParamSet, name: String, c_out: usize, c_in: usize, rng: &mut Rng| {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            let mut w = Tensor::randn(&[c_out, c_in, 3, 3], rng);
            w.scale_in_place(std);
            params.push(format!("{name}.w"), w);
            params.push(format!("{name}.b"), Tensor::zeros(&[c_out]));
        };

        conv(&mut params, "stem".into(), widths[0], 1, &mut rng);
        for l in 0..levels {
            let c_in = if l == 0 { widths[0] } else { widths[l - 1] };
            let c = widths[l];
            conv(&mut params, format!("enc{l}.conv1"), c, c_in, &mut rng);
            let mut tw = Tensor::randn(&[c, config.time_dim], &mut rng);
            tw.scale_in_place(1.0 / (config.time_dim as f64).sqrt());
            params.push(format!("enc{l}.temb.w"), tw);
            params.push(format!("enc{l}.temb.b"), Tensor::zeros(&[c]));
            params.push(format!("enc{l}.gn1.g"), Tensor::filled(&[c], 1.0));
            params.push(format!("enc{l}.gn1.b"), Tensor::zeros(&[c]));
            conv(&mut params, format!("enc{l}.conv2"), c, c, &mut rng);
            params.push(format!("enc{l}.gn2.g"), Tensor::filled(&[c], 1.0));
            params.push(format!("enc{l}.gn2.b"), Tensor::zeros(&[c]));
        }
        for l in (0..levels - 1).rev() {
            let c = widths[l];
            conv(&mut params, format!("dec{l}.conv1"), c, widths[l + 1], &mut rng);
            let mut tw = Tensor::randn(&[c, config.time_dim], &mut rng);
            tw.scale_in_place(1.0 / (config.time_dim as f64).sqrt());
            params.push(format!("dec{l}.temb.w"), tw);
            params.push(format!("dec{l}.temb.b"), Tensor::zeros(&[c]));
            params.push(format!("dec{l}.gn1.g"), Tensor::filled(&[c], 1.0));
            params.push(format!("dec{l}.gn1.b"), Tensor::zeros(&[c]));
            conv(&mut params, format!("dec{l}.conv2"), c, c, &mut rng);
            params.push(format!("dec{l}.gn2.g"), Tensor::filled(&[c], 1.0));
            params.push(format!("dec{l}.gn2.b"), Tensor::zeros(&[c]));
        }
        // zero-init output head: a fresh model predicts exactly zero noise
        params.push("head.w", Tensor::zeros(&[1, widths[0], 3, 3]));
        params.push("head.b", Tensor::zeros(&[1]));

        Ok(DenoiserModel { config, params, frozen: false })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Replace parameters after an optimizer step; rejected once frozen.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if self.frozen {
            return Err(Error::Config("model is frozen; parameters are immutable".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn bind_constants<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        BoundParams { set: &self.params, vars: self.params.constants(tape) }
    }

    pub fn bind_leaves<'a>(&'a self, tape: &mut Tape) -> BoundParams<'a> {
        BoundParams { set: &self.params, vars: self.params.leaves(tape) }
    }

    /// One full forward pass on the given tape. Returns the predicted
    /// noise and the pre-shift activation at the configured injection
    /// site. When `injection` is provided it is added at that site
    /// before the remaining layers run.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams<'_>,
        x: Var,
        t: usize,
        injection: Option<Var>,
    ) -> Result<(Var, Var)> {
        if t < 1 {
            return Err(Error::Config(format!("timestep {t} out of range (t >= 1)")));
        }
        if tape.shape(x) != [1, self.config.side, self.config.side] {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "input {:?}, expected [1,{},{}]",
                    tape.shape(x),
                    self.config.side,
                    self.config.side
                ),
            ));
        }
        if let Some(dh) = injection {
            let want = self.config.injection_shape();
            if tape.shape(dh) != want.as_slice() {
                return Err(Error::shape(
                    "inject",
                    format!("delta {:?}, site needs {:?}", tape.shape(dh), want),
                ));
            }
        }
        let cfg = &self.config;
        let levels = cfg.levels;
        let temb = tape.constant(time_embedding(t, cfg.time_dim));

        let mut site = 0usize;
        let mut captured: Option<Var> = None;
        let mut inject_at = |tape: &mut Tape, s: usize, h: Var| -> Result<Var> {
            if s != cfg.injection_layer {
                return Ok(h);
            }
            captured = Some(h);
            match injection {
                Some(dh) => tape.add(h, dh),
                None => Ok(h),
            }
        };

        let block = |tape: &mut Tape, prefix: &str, mut h: Var, channels: usize| -> Result<Var> {
            let b1 = bound.var(&format!("{prefix}.conv1.b"));
            h = tape.conv3x3(h, bound.var(&format!("{prefix}.conv1.w")))?;
            h = tape.add_channel_bias(h, b1)?;
            let tb = tape.affine(
                temb,
                bound.var(&format!("{prefix}.temb.w")),
                bound.var(&format!("{prefix}.temb.b")),
            )?;
            h = tape.add_channel_bias(h, tb)?;
            h = tape.group_norm(
                h,
                bound.var(&format!("{prefix}.gn1.g")),
                bound.var(&format!("{prefix}.gn1.b")),
                cfg.groups_for(channels),
            )?;
            h = tape.swish(h)?;
            h = tape.conv3x3(h, bound.var(&format!("{prefix}.conv2.w")))?;
            h = tape.add_channel_bias(h, bound.var(&format!("{prefix}.conv2.b")))?;
            h = tape.group_norm(
                h,
                bound.var(&format!("{prefix}.gn2.g")),
                bound.var(&format!("{prefix}.gn2.b")),
                cfg.groups_for(channels),
            )?;
            tape.swish(h)
        };

        let mut h = tape.conv3x3(x, bound.var("stem.w"))?;
        h = tape.add_channel_bias(h, bound.var("stem.b"))?;

        let mut skips: Vec<Var> = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            h = block(tape, &format!("enc{l}"), h, cfg.widths[l])?;
            h = inject_at(tape, site, h)?;
            site += 1;
            if l < levels - 1 {
                skips.push(h);
                h = tape.avgpool2(h)?;
            }
        }

        for l in (0..levels - 1).rev() {
            h = tape.upsample2(h)?;
            h = tape.conv3x3(h, bound.var(&format!("dec{l}.conv1.w")))?;
            h = tape.add_channel_bias(h, bound.var(&format!("dec{l}.conv1.b")))?;
            h = tape.add(h, skips[l])?;
            let tb = tape.affine(
                temb,
                bound.var(&format!("dec{l}.temb.w")),
                bound.var(&format!("dec{l}.temb.b")),
            )?;
            h = tape.add_channel_bias(h, tb)?;
            h = tape.group_norm(
                h,
                bound.var(&format!("dec{l}.gn1.g")),
                bound.var(&format!("dec{l}.gn1.b")),
                cfg.groups_for(cfg.widths[l]),
            )?;
            h = tape.swish(h)?;
            h = tape.conv3x3(h, bound.var(&format!("dec{l}.conv2.w")))?;
            h = tape.add_channel_bias(h, bound.var(&format!("dec{l}.conv2.b")))?;
            h = tape.group_norm(
                h,
                bound.var(&format!("dec{l}.gn2.g")),
                bound.var(&format!("dec{l}.gn2.b")),
                cfg.groups_for(cfg.widths[l]),
            )?;
            h = tape.swish(h)?;
            h = inject_at(tape, site, h)?;
            site += 1;
        }

        let mut eps = tape.conv3x3(h, bound.var("head.w"))?;
        eps = tape.add_channel_bias(eps, bound.var("head.b"))?;
        let h_site = captured.expect("injection site visited during forward");
        Ok((eps, h_site))
    }

    /// Evaluate the frozen network: predicted noise plus the bottleneck
    /// (injection-site) activation.
    pub fn predict_eps(&self, x: &Tensor, t: usize) -> Result<(Tensor, BottleneckActivation)> {
        let mut tape = Tape::with_capacity(256);
        let bound = self.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let (eps, h) = self.forward(&mut tape, &bound, xv, t, None)?;
        Ok((
            tape.value(eps).clone(),
            BottleneckActivation { tensor: tape.value(h).clone(), t },
        ))
    }

    /// Same forward pass with `delta_h` added at the injection site.
    pub fn predict_eps_injected(&self, x: &Tensor, t: usize, delta_h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::with_capacity(256);
        let bound = self.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        let dh = tape.constant(delta_h.clone());
        let (eps, _) = self.forward(&mut tape, &bound, xv, t, Some(dh))?;
        Ok(tape.value(eps).clone())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::json!({
            "model": serde_json::to_value(&self.config)?,
            "frozen": self.frozen,
        });
        self.params.to_container(config).to_bytes(MAGIC_CHECKPOINT)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(MAGIC_CHECKPOINT, bytes)?;
        let config: DenoiserConfig = serde_json::from_value(c.config["model"].clone())
            .map_err(|e| Error::Header(format!("model config: {e}")))?;
        config.validate()?;
        let frozen = c.config["frozen"].as_bool().unwrap_or(false);
        let params = ParamSet::from_container(&c)?;
        Ok(DenoiserModel { config, params, frozen })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            side: 8,
            widths: vec![4, 8],
            levels: 2,
            time_dim: 8,
            groups: 4,
            injection_layer: 1,
        }
    }

    #[test]
    fn fresh_model_predicts_zero_noise() {
        let model = DenoiserModel::new(small_config(), 1).unwrap();
        let mut rng = Rng::seed(2);
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let (eps, h) = model.predict_eps(&x, 3).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
        assert_eq!(h.tensor.shape(), &[8, 4, 4]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DenoiserModel::new(small_config(), 1).unwrap();
        let mut rng = Rng::seed(3);
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let (e1, h1) = model.predict_eps(&x, 5).unwrap();
        let (e2, h2) = model.predict_eps(&x, 5).unwrap();
        assert_eq!(e1.data(), e2.data());
        assert_eq!(h1.tensor.data(), h2.tensor.data());
    }

    #[test]
    fn zero_injection_is_bitwise_noop() {
        let mut model = DenoiserModel::new(small_config(), 4).unwrap();
        // give the head nonzero weights so eps is nontrivial
        let mut params = model.params().clone();
        let mut rng = Rng::seed(5);
        for (name, t) in params.iter_mut() {
            if name.starts_with("head.") {
                let mut w = Tensor::randn(t.shape(), &mut rng);
                w.scale_in_place(0.1);
                *t = w;
            }
        }
        model.set_params(params).unwrap();
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let (eps, h) = model.predict_eps(&x, 2).unwrap();
        let zero = Tensor::zeros(h.tensor.shape());
        let eps_inj = model.predict_eps_injected(&x, 2, &zero).unwrap();
        let bits_equal = eps
            .data()
            .iter()
            .zip(eps_inj.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(bits_equal);
    }

    #[test]
    fn injection_shape_mismatch_rejected() {
        let model = DenoiserModel::new(small_config(), 4).unwrap();
        let mut rng = Rng::seed(6);
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let bad = Tensor::zeros(&[8, 2, 2]);
        assert!(model.predict_eps_injected(&x, 2, &bad).is_err());
    }

    #[test]
    fn timestep_zero_rejected() {
        let model = DenoiserModel::new(small_config(), 4).unwrap();
        let x = Tensor::zeros(&[1, 8, 8]);
        assert!(model.predict_eps(&x, 0).is_err());
    }

    #[test]
    fn non_bottleneck_injection_site_runs_finite() {
        let mut cfg = small_config();
        cfg.injection_layer = 0; // first encoder output instead of bottleneck
        let model = DenoiserModel::new(cfg.clone(), 7).unwrap();
        let mut rng = Rng::seed(8);
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let dh = Tensor::randn(&cfg.injection_shape(), &mut rng);
        let eps = model.predict_eps_injected(&x, 2, &dh).unwrap();
        assert!(eps.is_finite());
    }

    #[test]
    fn zeroed_bottleneck_still_finite_via_skips() {
        let model = DenoiserModel::new(small_config(), 9).unwrap();
        let mut rng = Rng::seed(10);
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let (_, h) = model.predict_eps(&x, 2).unwrap();
        let mut killer = h.tensor.clone();
        killer.scale_in_place(-1.0); // h + (-h) = 0 at the bottleneck
        let eps = model.predict_eps_injected(&x, 2, &killer).unwrap();
        assert!(eps.is_finite());
    }

    #[test]
    fn checkpoint_roundtrip_to_f32_precision() {
        let model = DenoiserModel::new(small_config(), 11).unwrap();
        let bytes = model.checkpoint_bytes().unwrap();
        let back = DenoiserModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.config(), model.config());
        let quant = 2f64.powi(-23);
        let diff = model.params().max_abs_diff(back.params());
        assert!(diff <= quant, "max diff {diff}");
    }

    #[test]
    fn gradients_flow_to_parameters() {
        // denoiser loss vs finite differences on a tiny model, at a
        // randomized (non-zero-head) point so every path is active
        use crate::numerics::gradcheck_sampled;
        let model = DenoiserModel::new(small_config(), 12).unwrap();
        let mut rng = Rng::seed(13);
        let x = Tensor::randn(&[1, 8, 8], &mut rng);
        let target = Tensor::randn(&[1, 8, 8], &mut rng);
        let points: Vec<Tensor> = model
            .params()
            .tensors()
            .map(|t| {
                let mut r = Tensor::randn(t.shape(), &mut rng);
                r.scale_in_place(0.3);
                r
            })
            .collect();
        let mut check_rng = Rng::seed(14);
        let err = gradcheck_sampled(
            |tape, vars| {
                let bound = BoundParams { set: model.params(), vars: vars.to_vec() };
                let xv = tape.constant(x.clone());
                let (eps, _) = model.forward(tape, &bound, xv, 3, None)?;
                let tv = tape.constant(target.clone());
                let d = tape.sub(eps, tv)?;
                let sq = tape.mul(d, d)?;
                tape.mean(sq)
            },
            &points,
            1e-5,
            40,
            &mut check_rng,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
