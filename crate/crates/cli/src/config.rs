use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use skysplat_core::aggregation::GridSpec;
use skysplat_core::features::FeatureKind;
use skysplat_core::pipeline::PipelineParams;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPaths {
    pub image: PathBuf,
    pub rpc: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_height: Option<PathBuf>,
}

/// Everything `reconstruct` needs. Pipeline knobs sit at the top level next
/// to the paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default)]
    pub views: Vec<ViewPaths>,
    #[serde(flatten)]
    pub params: PipelineParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_dsm: Option<PathBuf>,
    /// Cells excluded from scoring (water etc.), PNG or SKYR on the GT grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_mask: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_true")]
    pub deterministic: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

/// Per-field overrides. Flag names match config keys; the dashed spelling
/// is accepted too.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    /// Views as a JSON array of {image, rpc, features?, rel_height?}.
    #[arg(long = "views", value_parser = parse_json::<Vec<ViewPaths>>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub views: Option<Vec<ViewPaths>>,
    #[arg(long = "h_min", visible_alias = "h-min", allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_min: Option<f64>,
    #[arg(long = "h_max", visible_alias = "h-max", allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h_max: Option<f64>,
    #[arg(long = "m")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[arg(long = "feature_kind", visible_alias = "feature-kind")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_kind: Option<FeatureKind>,
    #[arg(long = "cscm_enabled", visible_alias = "cscm-enabled")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cscm_enabled: Option<bool>,
    #[arg(long = "cscm_feature_kind", visible_alias = "cscm-feature-kind")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cscm_feature_kind: Option<FeatureKind>,
    #[arg(long = "cscm_smoothing", visible_alias = "cscm-smoothing")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cscm_smoothing: Option<usize>,
    #[arg(long = "tau")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f32>,
    #[arg(long = "temperature")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long = "cost_radius", visible_alias = "cost-radius")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_radius: Option<usize>,
    #[arg(long = "dp_max", visible_alias = "dp-max")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dp_max: Option<f64>,
    #[arg(long = "dh_max", visible_alias = "dh-max")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dh_max: Option<f64>,
    #[arg(long = "min_agree", visible_alias = "min-agree")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_agree: Option<usize>,
    /// Skip consistency aggregation and fuse every lifted point.
    #[arg(long = "no_aggregation", visible_alias = "no-aggregation", num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub no_aggregation: Option<bool>,
    #[arg(long = "dsm_cell_size", visible_alias = "dsm-cell-size")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsm_cell_size: Option<f64>,
    /// DSM grid as JSON {origin, west, north, cell_size, rows, cols}.
    #[arg(long = "dsm_grid", visible_alias = "dsm-grid", value_parser = parse_json::<GridSpec>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsm_grid: Option<GridSpec>,
    #[arg(long = "hei_weight", visible_alias = "hei-weight")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hei_weight: Option<f64>,
    #[arg(long = "gt_dsm", visible_alias = "gt-dsm")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_dsm: Option<PathBuf>,
    #[arg(long = "exclude_mask", visible_alias = "exclude-mask")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exclude_mask: Option<PathBuf>,
    #[arg(long = "output_dir", visible_alias = "output-dir")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[arg(long = "deterministic", num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<bool>,
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_str(s).map_err(|e| e.to_string())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Reads `path` (if any), resolves its relative paths against the file's
    /// directory and applies `over` on top. Returns the config and whether
    /// the height range was given explicitly.
    pub fn load(path: Option<&Path>, over: &Overrides) -> Result<(Self, bool), CliError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let file: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                if !file.is_object() {
                    return Err(CliError::Config(format!("{}: expected a JSON object", p.display())));
                }
                let mut cfg: PipelineConfig = serde_json::from_value(file.clone())
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.resolve_paths(base);
                let mut v = serde_json::to_value(&cfg).expect("config serializes");
                // Keep "range given" information: drop defaulted keys.
                for key in ["h_min", "h_max"] {
                    if file.get(key).is_none() {
                        v.as_object_mut().unwrap().remove(key);
                    }
                }
                v
            }
            None => Value::Object(Map::new()),
        };
        let over = serde_json::to_value(over).expect("overrides serialize");
        let obj = value.as_object_mut().unwrap();
        for (k, v) in over.as_object().unwrap() {
            obj.insert(k.clone(), v.clone());
        }
        let explicit_range = obj.contains_key("h_min") && obj.contains_key("h_max");
        if obj.contains_key("h_min") != obj.contains_key("h_max") {
            return Err(CliError::Config("h_min and h_max must be given together".into()));
        }
        let cfg: PipelineConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok((cfg, explicit_range))
    }

    fn resolve_paths(&mut self, base: &Path) {
        for v in &mut self.views {
            resolve(base, &mut v.image);
            resolve(base, &mut v.rpc);
            if let Some(p) = &mut v.features {
                resolve(base, p);
            }
            if let Some(p) = &mut v.rel_height {
                resolve(base, p);
            }
        }
        for p in [&mut self.gt_dsm, &mut self.exclude_mask].into_iter().flatten() {
            resolve(base, p);
        }
        resolve(base, &mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.views.len() < 2 {
            return Err(CliError::Config(format!(
                "views: need at least 2, got {}",
                self.views.len()
            )));
        }
        let p = &self.params;
        if p.m < 2 {
            return Err(CliError::Config(format!("m: need at least 2 hypotheses, got {}", p.m)));
        }
        if !(0.0..=1.0).contains(&p.tau) {
            return Err(CliError::Config(format!("tau: {} outside [0, 1]", p.tau)));
        }
        for (name, v) in [
            ("temperature", p.temperature),
            ("dp_max", p.dp_max),
            ("dh_max", p.dh_max),
            ("dsm_cell_size", p.dsm_cell_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{name}: must be positive, got {v}")));
            }
        }
        if !(p.hei_weight >= 0.0 && p.hei_weight.is_finite()) {
            return Err(CliError::Config(format!("hei_weight: {}", p.hei_weight)));
        }
        Ok(())
    }
}
