use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use region_cam_core::occlude::{DEFAULT_OCCLUSION_FRAC, MEAN_RGB};
use region_cam_core::seeds::DEFAULT_IGNORE_LABEL;
use region_cam_core::sip::{LayerSelection, SipConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    RegionCam,
    Cam,
    Gradcam,
    SimOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::RegionCam => "region_cam",
            Method::Cam => "cam",
            Method::Gradcam => "gradcam",
            Method::SimOnly => "sim_only",
        }
    }
}

/// Everything a run can be configured with. Loaded from `--config` and
/// then overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub method: Method,
    #[serde(flatten)]
    pub sip: SipConfig,
    /// Background threshold for `seed`.
    pub bg_threshold: f32,
    /// Threshold grid for `sweep` and `ablate`.
    pub bg_grid: String,
    /// Localization fraction or grid.
    pub loc_frac: String,
    pub occlusion_frac: f32,
    pub fill: [f32; 3],
    /// Label count including background.
    pub num_classes: usize,
    pub ignore_label: i32,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            method: Method::RegionCam,
            sip: SipConfig::default(),
            bg_threshold: 0.5,
            bg_grid: "0:0.01:1".into(),
            loc_frac: "0.35".into(),
            occlusion_frac: DEFAULT_OCCLUSION_FRAC,
            fill: MEAN_RGB,
            num_classes: 21,
            ignore_label: DEFAULT_IGNORE_LABEL,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// `all`, `none`, `all_but_deepest`, `all_but_shallowest` or a comma list
/// of layer names, deepest first.
pub fn parse_layers(spec: &str) -> Result<LayerSelection> {
    let spec = spec.trim();
    Ok(match spec {
        "all" => LayerSelection::All,
        "none" | "" => LayerSelection::None,
        "all_but_deepest" => LayerSelection::AllButDeepest,
        "all_but_shallowest" => LayerSelection::AllButShallowest,
        _ => {
            let names: Vec<String> = spec.split(',').map(|s| s.trim().to_string()).collect();
            if names.iter().any(String::is_empty) {
                bail!("empty layer name in {spec:?}");
            }
            LayerSelection::Named(names)
        }
    })
}

pub fn describe_layers(sel: &LayerSelection) -> String {
    match sel {
        LayerSelection::All => "all".into(),
        LayerSelection::None => "none".into(),
        LayerSelection::AllButDeepest => "all_but_deepest".into(),
        LayerSelection::AllButShallowest => "all_but_shallowest".into(),
        LayerSelection::Named(names) => names.join(","),
    }
}

pub fn parse_list<T: std::str::FromStr>(spec: &str, what: &str) -> Result<Vec<T>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("bad {what} {s:?} in {spec:?}"))
        })
        .collect()
}

pub fn parse_fill(spec: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = parse_list(spec, "fill component")?;
    match v.as_slice() {
        [r, g, b] => Ok([*r, *g, *b]),
        _ => bail!("fill needs three comma-separated values, got {spec:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_specs() {
        assert_eq!(parse_layers("none").unwrap(), LayerSelection::None);
        assert_eq!(
            parse_layers("block_4, block_3").unwrap(),
            LayerSelection::Named(vec!["block_4".into(), "block_3".into()])
        );
        assert!(parse_layers("a,,b").is_err());
    }

    #[test]
    fn config_file_merges_with_defaults() {
        let c: Config =
            serde_json::from_str(r#"{"centroids": 4, "method": "gradcam", "bg_threshold": 0.3}"#)
                .unwrap();
        assert_eq!(c.sip.centroids, 4);
        assert_eq!(c.method, Method::Gradcam);
        assert_eq!(c.bg_threshold, 0.3);
        assert_eq!(c.num_classes, 21);
        assert_eq!(c.sip.layer_subset, LayerSelection::AllButDeepest);
    }

    #[test]
    fn fill_needs_three() {
        assert_eq!(parse_fill("0,0.5,1").unwrap(), [0.0, 0.5, 1.0]);
        assert!(parse_fill("0,1").is_err());
    }
}
