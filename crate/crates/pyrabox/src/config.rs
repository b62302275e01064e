//! JSON experiment configuration.

use std::fs;
use std::path::Path;

use pyrabox_core::anchors::PyramidAnchorConfig;
use pyrabox_core::graph::UpsampleMode;
use pyrabox_core::network::{LfpnStart, MergeOp, NetworkConfig};
use pyrabox_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LfpnStartKey {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub input_size: usize,
    pub width_factor: f64,
    pub lfpn_start: LfpnStartKey,
    pub lfpn_merge: String,
    pub upsample: String,
    pub cpm_width: usize,
    pub s_pa: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub threshold: f64,
    pub lambda: f64,
    pub lambda_k: Vec<f64>,
    pub variance: [f64; 2],
    pub neg_pos_ratio: Option<f64>,
    pub min_face_side: f64,
    pub lr_schedule: Vec<(u64, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub das_prob: f64,
    pub seed: u64,
    /// 0 uses every core; results are identical for any value.
    pub threads: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self::from_parts(&NetworkConfig::full_scale(), &TrainConfig::full_scale())
    }
}

impl CliConfig {
    pub fn from_parts(net: &NetworkConfig, train: &TrainConfig) -> Self {
        let p = &net.pyramid;
        CliConfig {
            input_size: net.input_size,
            width_factor: net.width_factor,
            lfpn_start: match net.lfpn_start {
                LfpnStart::Auto => LfpnStartKey::Name("auto".into()),
                LfpnStart::Tap(t) => LfpnStartKey::Index(t),
            },
            lfpn_merge: match net.lfpn_merge {
                MergeOp::Add => "add",
                MergeOp::Mul => "mul",
            }
            .into(),
            upsample: match net.upsample {
                UpsampleMode::Nearest => "nearest",
                UpsampleMode::Bilinear => "bilinear",
            }
            .into(),
            cpm_width: net.cpm_width,
            s_pa: p.s_pa,
            k: p.k_max,
            threshold: p.threshold,
            lambda: p.lambda,
            lambda_k: p.lambda_k.clone(),
            variance: p.variance,
            neg_pos_ratio: p.neg_pos_ratio,
            min_face_side: p.min_face_side,
            lr_schedule: train.lr_schedule.clone(),
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            das_prob: train.das_prob,
            seed: train.seed,
            threads: train.threads,
        }
    }

    /// The desk-scale configuration used for CPU training.
    pub fn toy() -> Self {
        Self::from_parts(&NetworkConfig::toy(), &TrainConfig::toy())
    }

    /// Parses a JSON object; missing keys take the full-scale defaults.
    pub fn parse(text: &str) -> AppResult<Self> {
        Self::parse_over(&CliConfig::default(), text)
    }

    /// Parses a JSON object whose keys override `base`.
    pub fn parse_over(base: &CliConfig, text: &str) -> AppResult<Self> {
        let usage = |e: serde_json::Error| AppError::Usage(format!("config: {e}"));
        let user: serde_json::Value = serde_json::from_str(text).map_err(usage)?;
        let serde_json::Value::Object(user) = user else {
            return Err(AppError::Usage("config: expected a JSON object".into()));
        };
        let mut merged = serde_json::to_value(base).expect("config serializes");
        let obj = merged.as_object_mut().expect("config is an object");
        for (k, v) in user {
            obj.insert(k, v);
        }
        serde_json::from_value(merged).map_err(usage)
    }

    pub fn load_over(base: &CliConfig, path: &Path) -> AppResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::parse_over(base, &text).map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn network(&self) -> AppResult<NetworkConfig> {
        let lfpn_start = match &self.lfpn_start {
            LfpnStartKey::Name(n) if n == "auto" => LfpnStart::Auto,
            LfpnStartKey::Index(i) => LfpnStart::Tap(*i),
            LfpnStartKey::Name(n) => return Err(AppError::Usage(format!("config: lfpn_start {n:?} is neither \"auto\" nor a tap index"))),
        };
        let lfpn_merge = match self.lfpn_merge.as_str() {
            "add" => MergeOp::Add,
            "mul" => MergeOp::Mul,
            other => return Err(AppError::Usage(format!("config: lfpn_merge {other:?} is not \"add\" or \"mul\""))),
        };
        let upsample = match self.upsample.as_str() {
            "nearest" => UpsampleMode::Nearest,
            "bilinear" => UpsampleMode::Bilinear,
            other => return Err(AppError::Usage(format!("config: upsample {other:?} is not \"nearest\" or \"bilinear\""))),
        };
        let pyramid = PyramidAnchorConfig {
            s_pa: self.s_pa,
            k_max: self.k,
            threshold: self.threshold,
            lambda: self.lambda,
            lambda_k: self.lambda_k.clone(),
            variance: self.variance,
            neg_pos_ratio: self.neg_pos_ratio,
            min_face_side: self.min_face_side,
            transforms: (0..=self.k).map(pyrabox_core::anchors::ContextTransformParams::for_level).collect(),
        };
        let cfg = NetworkConfig {
            input_size: self.input_size,
            width_factor: self.width_factor,
            lfpn_start,
            lfpn_merge,
            upsample,
            cpm_width: self.cpm_width,
            pyramid,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> AppResult<TrainConfig> {
        let cfg = TrainConfig {
            lr_schedule: self.lr_schedule.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            das_prob: self.das_prob,
            seed: self.seed,
            threads: self.threads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key  default` table for `--help`.
    pub fn defaults_table() -> String {
        let full = serde_json::to_value(CliConfig::default()).expect("serializes");
        let toy = serde_json::to_value(CliConfig::toy()).expect("serializes");
        let mut out = String::from("Config keys (JSON), full-scale default / toy default:\n");
        if let (Some(f), Some(t)) = (full.as_object(), toy.as_object()) {
            for (k, v) in f {
                out.push_str(&format!("  {k:<14} {v}  /  {}\n", t[k]));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = CliConfig::parse(r#"{"input_size": 160, "widht_factor": 0.5}"#).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("widht_factor"), "{err}");
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c = CliConfig::parse(r#"{"input_size": 160, "lfpn_start": 2, "lambda_k": [1, 0, 0]}"#).unwrap();
        let n = c.network().unwrap();
        assert_eq!(n.input_size, 160);
        assert_eq!(n.lfpn_start, LfpnStart::Tap(2));
        assert_eq!(n.pyramid.lambda_k, vec![1.0, 0.0, 0.0]);
        assert_eq!(c.train().unwrap().lr_schedule.len(), 3);
    }

    #[test]
    fn json_round_trip() {
        let c = CliConfig::toy();
        assert_eq!(CliConfig::parse(&c.to_json()).unwrap(), c);
        assert_eq!(c.network().unwrap(), NetworkConfig::toy());
        let table = CliConfig::defaults_table();
        for key in ["input_size", "lfpn_start", "K", "lr_schedule", "das_prob"] {
            assert!(table.contains(key));
        }
    }
}
