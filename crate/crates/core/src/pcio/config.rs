//! ConfigFile: flat `key = value` lines, `#` comments, unknown keys rejected.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::number::format_sig9;
use crate::clustering::Setting;
use crate::error::{Error, Result};

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits config text into entries. Duplicate keys are rejected.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            });
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::config(key, format!("set twice (line {})", i + 1)));
        }
        out.push(Entry {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

/// Dataset profile supplying default parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// Urban mobile mapping scenes.
    #[default]
    Npm3d,
    /// Dense forest plots.
    Forest,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "npm3d" => Ok(Profile::Npm3d),
            "forest" => Ok(Profile::Forest),
            other => Err(Error::invalid(format!("unknown profile `{other}` (npm3d|forest)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Npm3d => "npm3d",
            Profile::Forest => "forest",
        })
    }
}

/// Every tunable of the pipeline. Unset keys take the profile defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub voxel_size: f64,
    pub cylinder_radius: f64,
    /// Test-time grid spacing; `None` means equal to `cylinder_radius`.
    pub grid_step: Option<f64>,
    pub region_growing_radius: f64,
    pub meanshift_bandwidth: f64,
    pub meanshift_max_iter: usize,
    pub meanshift_tol: f64,
    pub min_cluster_size: usize,
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub merge_iou_threshold: f64,
    /// IoU a prediction must exceed to count as a match in evaluation.
    pub match_iou_threshold: f64,
    pub seed: u64,
    pub setting: Setting,
    pub jitter_sigma: f64,
    pub sem_flip_prob: f64,
    pub offset_sigma: f64,
    pub embedding_sigma: f64,
    pub offset_l1_weight: f64,
    pub offset_cosine_weight: f64,
    pub disc_delta_v: f64,
    pub disc_delta_d: f64,
    pub disc_var_weight: f64,
    pub disc_dist_weight: f64,
    pub disc_reg_weight: f64,
}

impl PipelineConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (voxel_size, cylinder_radius, score_threshold) = match profile {
            Profile::Npm3d => (0.12, 16.0, 0.6),
            Profile::Forest => (0.2, 4.0, 0.5),
        };
        Self {
            voxel_size,
            cylinder_radius,
            grid_step: None,
            region_growing_radius: 0.03,
            meanshift_bandwidth: 0.6,
            meanshift_max_iter: 300,
            meanshift_tol: 1e-4,
            min_cluster_size: 10,
            score_threshold,
            nms_iou_threshold: 0.3,
            merge_iou_threshold: 0.01,
            match_iou_threshold: 0.5,
            seed: 0,
            setting: Setting::IV,
            jitter_sigma: 0.01,
            sem_flip_prob: 0.0,
            offset_sigma: 0.0,
            embedding_sigma: 0.0,
            offset_l1_weight: 1.0,
            offset_cosine_weight: 1.0,
            disc_delta_v: 0.5,
            disc_delta_d: 1.5,
            disc_var_weight: 1.0,
            disc_dist_weight: 1.0,
            disc_reg_weight: 0.001,
        }
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step.unwrap_or(self.cylinder_radius)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "voxel_size" => self.voxel_size = parse_value(key, value)?,
            "cylinder_radius" => self.cylinder_radius = parse_value(key, value)?,
            "grid_step" => self.grid_step = Some(parse_value(key, value)?),
            "region_growing_radius" => self.region_growing_radius = parse_value(key, value)?,
            "meanshift_bandwidth" => self.meanshift_bandwidth = parse_value(key, value)?,
            "meanshift_max_iter" => self.meanshift_max_iter = parse_value(key, value)?,
            "meanshift_tol" => self.meanshift_tol = parse_value(key, value)?,
            "min_cluster_size" => self.min_cluster_size = parse_value(key, value)?,
            "score_threshold" => self.score_threshold = parse_value(key, value)?,
            "nms_iou_threshold" => self.nms_iou_threshold = parse_value(key, value)?,
            "merge_iou_threshold" => self.merge_iou_threshold = parse_value(key, value)?,
            "match_iou_threshold" => self.match_iou_threshold = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "setting" => self.setting = parse_value(key, value)?,
            "jitter_sigma" => self.jitter_sigma = parse_value(key, value)?,
            "sem_flip_prob" => self.sem_flip_prob = parse_value(key, value)?,
            "offset_sigma" => self.offset_sigma = parse_value(key, value)?,
            "embedding_sigma" => self.embedding_sigma = parse_value(key, value)?,
            "offset_l1_weight" => self.offset_l1_weight = parse_value(key, value)?,
            "offset_cosine_weight" => self.offset_cosine_weight = parse_value(key, value)?,
            "disc_delta_v" => self.disc_delta_v = parse_value(key, value)?,
            "disc_delta_d" => self.disc_delta_d = parse_value(key, value)?,
            "disc_var_weight" => self.disc_var_weight = parse_value(key, value)?,
            "disc_dist_weight" => self.disc_dist_weight = parse_value(key, value)?,
            "disc_reg_weight" => self.disc_reg_weight = parse_value(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("voxel_size", self.voxel_size),
            ("cylinder_radius", self.cylinder_radius),
            ("grid_step", self.grid_step()),
            ("region_growing_radius", self.region_growing_radius),
            ("meanshift_bandwidth", self.meanshift_bandwidth),
            ("meanshift_tol", self.meanshift_tol),
            ("disc_delta_v", self.disc_delta_v),
            ("disc_delta_d", self.disc_delta_d),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(k, format!("must be > 0, got {v}")));
            }
        }
        let unit = [
            ("score_threshold", self.score_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("merge_iou_threshold", self.merge_iou_threshold),
            ("match_iou_threshold", self.match_iou_threshold),
            ("sem_flip_prob", self.sem_flip_prob),
        ];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(k, format!("must lie in [0, 1], got {v}")));
            }
        }
        let non_negative = [
            ("jitter_sigma", self.jitter_sigma),
            ("offset_sigma", self.offset_sigma),
            ("embedding_sigma", self.embedding_sigma),
            ("offset_l1_weight", self.offset_l1_weight),
            ("offset_cosine_weight", self.offset_cosine_weight),
            ("disc_var_weight", self.disc_var_weight),
            ("disc_dist_weight", self.disc_dist_weight),
            ("disc_reg_weight", self.disc_reg_weight),
        ];
        for (k, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(k, format!("must be >= 0, got {v}")));
            }
        }
        if self.meanshift_max_iter == 0 {
            return Err(Error::config("meanshift_max_iter", "must be >= 1"));
        }
        if self.grid_step() > self.cylinder_radius * std::f64::consts::SQRT_2 {
            return Err(Error::config(
                "grid_step",
                "must not exceed cylinder_radius * sqrt(2), otherwise blocks leave gaps",
            ));
        }
        Ok(())
    }

    /// Renders every key in ConfigFile grammar.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("voxel_size", format_sig9(self.voxel_size));
        put("cylinder_radius", format_sig9(self.cylinder_radius));
        put("grid_step", format_sig9(self.grid_step()));
        put("region_growing_radius", format_sig9(self.region_growing_radius));
        put("meanshift_bandwidth", format_sig9(self.meanshift_bandwidth));
        put("meanshift_max_iter", self.meanshift_max_iter.to_string());
        put("meanshift_tol", format_sig9(self.meanshift_tol));
        put("min_cluster_size", self.min_cluster_size.to_string());
        put("score_threshold", format_sig9(self.score_threshold));
        put("nms_iou_threshold", format_sig9(self.nms_iou_threshold));
        put("merge_iou_threshold", format_sig9(self.merge_iou_threshold));
        put("match_iou_threshold", format_sig9(self.match_iou_threshold));
        put("seed", self.seed.to_string());
        put("setting", self.setting.to_string());
        put("jitter_sigma", format_sig9(self.jitter_sigma));
        put("sem_flip_prob", format_sig9(self.sem_flip_prob));
        put("offset_sigma", format_sig9(self.offset_sigma));
        put("embedding_sigma", format_sig9(self.embedding_sigma));
        put("offset_l1_weight", format_sig9(self.offset_l1_weight));
        put("offset_cosine_weight", format_sig9(self.offset_cosine_weight));
        put("disc_delta_v", format_sig9(self.disc_delta_v));
        put("disc_delta_d", format_sig9(self.disc_delta_d));
        put("disc_var_weight", format_sig9(self.disc_var_weight));
        put("disc_dist_weight", format_sig9(self.disc_dist_weight));
        put("disc_reg_weight", format_sig9(self.disc_reg_weight));
        s
    }
}

pub fn parse_config(text: &str, profile: Profile) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::defaults(profile);
    for e in parse_entries(text)? {
        cfg.set(&e.key, &e.value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file over the profile defaults; `None` yields pure defaults.
pub fn read_config(path: Option<&Path>, profile: Profile) -> Result<PipelineConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_config(&text, profile)
}
