//! Run configuration: one JSON document with per-stage sections.
//!
//! Every field except the seed has a default; unknown keys anywhere are
//! rejected, and the fully-defaulted effective config is echoed into
//! each output directory so runs stay reproducible from their artifacts
//! alone.

use asyrp::denoiser::DenoiserConfig;
use asyrp::error::{Error, Result};
use asyrp::glyphdata::Attribute;
use asyrp::guidance::{EditDirection, PromptSpec, Strength};
use asyrp::pipeline::{BaseTrainConfig, DirectionTrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub side: usize,
    /// Existing dataset archive; generated from the seed when absent.
    pub path: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { count: 2000, side: 16, path: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_count: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { t_count: 200, beta_min: 1e-4, beta_max: 0.02 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub side: usize,
    pub widths: Vec<usize>,
    pub levels: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub injection_layer: usize,
    /// Existing checkpoint; commands that need a trained model require it.
    pub checkpoint: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = DenoiserConfig::default();
        ModelSection {
            side: c.side,
            widths: c.widths,
            levels: c.levels,
            time_dim: c.time_dim,
            groups: c.groups,
            injection_layer: c.injection_layer,
            checkpoint: None,
        }
    }
}

impl ModelSection {
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            side: self.side,
            widths: self.widths.clone(),
            levels: self.levels,
            time_dim: self.time_dim,
            groups: self.groups,
            injection_layer: self.injection_layer,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectionSection {
    pub attribute: String,
    pub direction: String,
    /// Prompt similarity in [0, 1].
    pub similarity: f64,
    pub epochs: usize,
    pub lr: f64,
    pub train_seed: u64,
    pub lambda_clip: f64,
    pub lambda_recon: Option<f64>,
    pub hidden: usize,
    /// Existing direction checkpoints for edit/sample.
    pub checkpoints: Vec<String>,
}

impl Default for DirectionSection {
    fn default() -> Self {
        let t = DirectionTrainConfig::default();
        DirectionSection {
            attribute: "radius".to_string(),
            direction: "increase".to_string(),
            similarity: 0.9,
            epochs: t.epochs,
            lr: t.lr,
            train_seed: t.seed,
            lambda_clip: t.lambda_clip,
            lambda_recon: t.lambda_recon,
            hidden: t.hidden,
            checkpoints: Vec::new(),
        }
    }
}

impl DirectionSection {
    pub fn train_config(&self) -> DirectionTrainConfig {
        DirectionTrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            seed: self.train_seed,
            lambda_clip: self.lambda_clip,
            lambda_recon: self.lambda_recon,
            hidden: self.hidden,
        }
    }

    pub fn prompt(&self) -> Result<PromptSpec> {
        let attribute = Attribute::parse(&self.attribute)?;
        let direction = match self.direction.as_str() {
            "increase" => EditDirection::Increase,
            "decrease" => EditDirection::Decrease,
            other => {
                return Err(Error::Config(format!(
                    "direction must be increase or decrease, got {other:?}"
                )))
            }
        };
        let p = PromptSpec::new(attribute, direction)
            .with_strength(Strength::Similarity(self.similarity));
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub s_train: usize,
    pub s_infer: usize,
    pub coefficients: Vec<f64>,
    /// Curve samples used when solving the intervals.
    pub curve_samples: usize,
    pub metric_seed: u64,
    /// Raw overrides; when set they bypass the calibrated analogs.
    pub threshold_base: Option<f64>,
    pub threshold_boost: Option<f64>,
    pub threshold_flex: Option<f64>,
    pub t_edit: Option<usize>,
    pub t_boost: Option<usize>,
    /// Existing plan document for commands that consume one.
    pub path: Option<String>,
    /// Existing curve document (from the curves command).
    pub curve_path: Option<String>,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            s_train: 25,
            s_infer: 100,
            coefficients: vec![1.0],
            curve_samples: 50,
            metric_seed: 99,
            threshold_base: None,
            threshold_boost: None,
            threshold_flex: None,
            t_edit: None,
            t_boost: None,
            path: None,
            curve_path: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// How many samples the edit/sample commands process.
    pub count: usize,
    /// Dataset indices to edit; defaults to the first held-out samples.
    pub indices: Vec<usize>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { count: 4, indices: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: BaseTrainConfig,
    #[serde(default)]
    pub direction: DirectionSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// Parse the JSON document, apply --set overrides, and deserialize
/// strictly. Overrides use dotted paths; values parse as JSON first and
/// fall back to strings.
pub fn load_config(json: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value: serde_json::Value =
        serde_json::from_str(json).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
    if !value.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    for (path, raw) in overrides {
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        let parts: Vec<&str> = path.split('.').collect();
        let (last, walk) = parts.split_last().expect("split produced parts");
        let mut node = &mut value;
        for part in walk {
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::Config(format!("--set {path}: {part} is not an object"))
            })?;
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set {path}: target is not an object")))?;
        obj.insert(last.to_string(), parsed);
    }
    let config: RunConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.denoiser_config().validate()?;
        if self.model.side != self.data.side {
            return Err(Error::Config(format!(
                "model.side {} must match data.side {}",
                self.model.side, self.data.side
            )));
        }
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.direction.similarity) {
            return Err(Error::Config("direction.similarity must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn effective_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in_and_seed_is_mandatory() {
        let c = load_config(r#"{"seed": 5}"#, &[]).unwrap();
        assert_eq!(c.schedule.t_count, 200);
        assert_eq!(c.plan.s_train, 25);
        assert!(load_config(r#"{}"#, &[]).is_err());
    }

    #[test]
    fn unknown_keys_rejected_at_any_level() {
        assert!(load_config(r#"{"seed": 1, "bogus": 2}"#, &[]).is_err());
        assert!(load_config(r#"{"seed": 1, "schedule": {"t_count": 100, "oops": 3}}"#, &[])
            .is_err());
    }

    #[test]
    fn set_overrides_apply_dotted_paths() {
        let c = load_config(
            r#"{"seed": 2}"#,
            &[
                ("schedule.t_count".to_string(), "100".to_string()),
                ("direction.attribute".to_string(), "brightness".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(c.schedule.t_count, 100);
        assert_eq!(c.direction.attribute, "brightness");
        // a typo in an override is also a config error
        assert!(load_config(r#"{"seed": 2}"#, &[("schedule.bogus".into(), "1".into())]).is_err());
    }
}
