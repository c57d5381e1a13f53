//! Experiment configuration: one JSON file with data, diffusion, train,
//! forecast and evaluate sections. Unknown keys are rejected everywhere,
//! and a content digest of the raw file bytes travels into every output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use cef_core::edm::NoiseSchedule;
use cef_core::grid::AlgorithmId;
use cef_core::noise::Rho;
use cef_core::rng::mix64;
use cef_core::sampler::InitialScaleRule;
use cef_core::train::LeadTimeScaleKind;

use crate::error::{HarnessError, Result};
use crate::toy::ToySystemSpec;

fn default_levels() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho_sched: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

impl ScheduleConfig {
    pub fn to_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sigma_max, self.sigma_min, self.rho_sched, self.levels)
            .map_err(HarnessError::from)
    }
}

/// Table-4 defaults: sampling (80, 0.03, 7, 20), training (88, 0.02, 7).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub sampling: ScheduleConfig,
    pub training: ScheduleConfig,
    pub sigma_data: f64,
    pub initial_scale_rule: InitialScaleRule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            sampling: ScheduleConfig {
                sigma_max: 80.0,
                sigma_min: 0.03,
                rho_sched: 7.0,
                levels: 20,
            },
            training: ScheduleConfig {
                sigma_max: 88.0,
                sigma_min: 0.02,
                rho_sched: 7.0,
                levels: 20,
            },
            sigma_data: 1.0,
            initial_scale_rule: InitialScaleRule::Sigma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub system: ToySystemSpec,
    pub length_hours: usize,
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64, f64),
    /// Margin for split usability: at least max(window depth, horizon).
    pub margin_hours: usize,
}

fn default_fractions() -> (f64, f64, f64) {
    (0.7, 0.15, 0.15)
}

/// Table-5 defaults for the optimizer; architecture knobs for the desk-scale
/// backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Lead times the model trains on (hours).
    pub lead_times: Vec<f64>,
    /// Conditioning window offsets, e.g. [0, -24].
    pub window_offsets: Vec<f64>,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    /// Lead-time normalization divisor fed to the embedding.
    pub t_max_hours: f64,
    #[serde(default)]
    pub scale_kind: LeadTimeScaleKind,
    /// Pairs sampled per lead time when tabulating loss scales.
    #[serde(default = "default_scale_pairs")]
    pub scale_pairs: usize,
}

fn default_peak_lr() -> f64 {
    5e-4
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_warmup() -> usize {
    1000
}
fn default_batch() -> usize {
    256
}
fn default_dropout() -> f64 {
    0.1
}
fn default_channels() -> usize {
    32
}
fn default_blocks() -> usize {
    3
}
fn default_scale_pairs() -> usize {
    2000
}

/// Which denoiser drives sampling: a trained checkpoint or the exact
/// linear-Gauss oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Checkpoint,
    AnalyticLinearGauss,
}

/// Serialized rho: a nonnegative number or the literal string "inf".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoConfig {
    Number(f64),
    Marker(RhoMarker),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RhoMarker {
    #[serde(rename = "inf")]
    Inf,
}

impl RhoConfig {
    pub fn to_rho(self) -> Result<Rho> {
        match self {
            RhoConfig::Number(v) => Rho::finite(v).map_err(HarnessError::from),
            RhoConfig::Marker(_) => Ok(Rho::Infinite),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSection {
    pub algorithm: AlgorithmId,
    /// Interpolation times within a block (hours).
    pub times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_times: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_one")]
    pub ar_steps: usize,
    pub n_ens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<RhoConfig>,
    pub backend: BackendKind,
    /// Window offsets used to condition (must match training).
    pub window_offsets: Vec<f64>,
    /// Case selection on the source split.
    #[serde(default = "default_one")]
    pub case_stride_hours: usize,
    pub n_cases: usize,
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub fair_crps: bool,
    pub derived_wind: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub master: u64,
    pub train: u64,
    pub init: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            master: 2024,
            train: 2025,
            init: 2026,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<ForecastSection>,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub seeds: Seeds,
}

/// A configuration plus the content digest of the bytes it was parsed from.
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

/// 64-bit content digest of the raw bytes, hex-encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = mix64(0xc0ffee ^ bytes.len() as u64);
    for chunk in bytes.chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(word));
    }
    format!("{h:016x}")
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)?;
    let config: ExperimentConfig = serde_json::from_slice(&bytes)?;
    config.data.system.validate()?;
    Ok(LoadedConfig {
        hash: content_hash(&bytes),
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{LinearGaussParams, ToySystemKind};
    use tempfile::TempDir;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "data": {
                "system": {
                    "kind": "linear_gauss",
                    "advection": 0.5, "diffusion": 0.08, "damping": 0.03, "forcing": 0.2,
                    "height": 2, "width": 16, "n_vars": 1, "base_seed": 7,
                    "with_static_field": false, "uv_pair": false
                },
                "length_hours": 500,
                "margin_hours": 30
            }
        })
    }

    #[test]
    fn minimal_config_parses_with_table_defaults() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, serde_json::to_vec(&minimal_json()).unwrap()).unwrap();
        let loaded = load_config(&path).unwrap();
        let d = &loaded.config.diffusion;
        assert_eq!(d.sampling.sigma_max, 80.0);
        assert_eq!(d.sampling.sigma_min, 0.03);
        assert_eq!(d.training.sigma_max, 88.0);
        assert_eq!(d.training.sigma_min, 0.02);
        assert_eq!(d.sampling.rho_sched, 7.0);
        assert_eq!(d.sampling.levels, 20);
        assert_eq!(d.sigma_data, 1.0);
        assert_eq!(loaded.hash.len(), 16);
        match loaded.config.data.system.kind {
            ToySystemKind::LinearGauss(p) => {
                assert_eq!(p, LinearGaussParams::default())
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("c.json");
        let mut v = minimal_json();
        v["data"]["unexpected_knob"] = serde_json::json!(3);
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(load_config(&path).is_err());
        let mut v = minimal_json();
        v["mystery_section"] = serde_json::json!({});
        std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn rho_accepts_numbers_and_inf_token() {
        let num: RhoConfig = serde_json::from_str("2.302585").unwrap();
        assert_eq!(num.to_rho().unwrap().as_f64(), 2.302585);
        let inf: RhoConfig = serde_json::from_str("\"inf\"").unwrap();
        assert!(matches!(inf.to_rho().unwrap(), Rho::Infinite));
        let zero: RhoConfig = serde_json::from_str("0.0").unwrap();
        assert!(zero.to_rho().unwrap().is_zero());
        assert!(serde_json::from_str::<RhoConfig>("\"lots\"").is_err());
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let a = content_hash(b"hello");
        assert_eq!(a, content_hash(b"hello"));
        assert_ne!(a, content_hash(b"hellp"));
        assert_ne!(a, content_hash(b"hello "));
    }
}
