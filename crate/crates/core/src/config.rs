//! Experiment configuration, validation, and the named presets.

use crate::error::{DeconError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    None,
    Fcn,
    Fpn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    DensePair,
    Prototype,
}

/// All hyperparameters of a run. Serialized as a single JSON document;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Encoder-loss weight in the combined objective.
    pub alpha: f64,
    /// Channel-dropout probability on the skip path.
    pub dropout_p: f64,
    pub decoder_kind: DecoderKind,
    /// Number of supervised decoder levels, bottleneck first.
    pub decoder_levels: u32,
    pub objective_kind: ObjectiveKind,
    pub prototypes_enc: u32,
    pub prototypes_dec: u32,
    pub temp_student: f64,
    pub temp_teacher: f64,
    pub proj_hidden: u32,
    pub proj_out: u32,
    /// Initial teacher momentum; ramps to 1 over the run.
    pub ema_m0: f64,
    /// EMA factor for the prototype-center update.
    pub center_momentum: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub image_size: u32,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha: 0.25,
            dropout_p: 0.0,
            decoder_kind: DecoderKind::Fcn,
            decoder_levels: 1,
            objective_kind: ObjectiveKind::Prototype,
            prototypes_enc: 64,
            prototypes_dec: 64,
            temp_student: 0.1,
            temp_teacher: 0.07,
            proj_hidden: 128,
            proj_out: 32,
            ema_m0: 0.99,
            center_momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            image_size: 64,
            lr: 0.3,
            weight_decay: 1e-5,
            seed: 42,
        }
    }
}

/// A config that passed [`validate_config`]. Immutable afterwards.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidatedConfig(ExperimentConfig);

impl std::ops::Deref for ValidatedConfig {
    type Target = ExperimentConfig;
    fn deref(&self) -> &ExperimentConfig {
        &self.0
    }
}

impl ValidatedConfig {
    pub fn as_config(&self) -> &ExperimentConfig {
        &self.0
    }
}

fn reject(field: &str, detail: String) -> DeconError {
    DeconError::Config(format!("invalid field `{field}`: {detail}"))
}

/// Checks all range invariants and normalizes `decoder_levels` to 1 for the
/// FCN decoder. Returns the config otherwise unchanged.
pub fn validate_config(cfg: ExperimentConfig) -> Result<ValidatedConfig> {
    let mut cfg = cfg;
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(reject("alpha", format!("{} not in [0, 1]", cfg.alpha)));
    }
    if !(0.0..1.0).contains(&cfg.dropout_p) {
        return Err(reject("dropout_p", format!("{} not in [0, 1)", cfg.dropout_p)));
    }
    if !(1..=4).contains(&cfg.decoder_levels) {
        return Err(reject(
            "decoder_levels",
            format!("{} not in 1..=4", cfg.decoder_levels),
        ));
    }
    if cfg.decoder_kind == DecoderKind::None && cfg.alpha != 1.0 {
        return Err(reject(
            "alpha",
            format!("must be 1 when decoder_kind is none, got {}", cfg.alpha),
        ));
    }
    if !(cfg.temp_student > 0.0) {
        return Err(reject("temp_student", format!("{} not > 0", cfg.temp_student)));
    }
    if !(cfg.temp_teacher > 0.0) {
        return Err(reject("temp_teacher", format!("{} not > 0", cfg.temp_teacher)));
    }
    if cfg.proj_out < 1 {
        return Err(reject("proj_out", "must be >= 1".into()));
    }
    if cfg.proj_hidden < cfg.proj_out {
        return Err(reject(
            "proj_hidden",
            format!("{} smaller than proj_out {}", cfg.proj_hidden, cfg.proj_out),
        ));
    }
    if cfg.prototypes_enc < 1 {
        return Err(reject("prototypes_enc", "must be positive".into()));
    }
    if cfg.prototypes_dec < 1 {
        return Err(reject("prototypes_dec", "must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.ema_m0) {
        return Err(reject("ema_m0", format!("{} not in [0, 1)", cfg.ema_m0)));
    }
    if !(0.0..1.0).contains(&cfg.center_momentum) {
        return Err(reject(
            "center_momentum",
            format!("{} not in [0, 1)", cfg.center_momentum),
        ));
    }
    for (name, v) in [
        ("epochs", cfg.epochs),
        ("batch_size", cfg.batch_size),
        ("image_size", cfg.image_size),
    ] {
        if v < 1 {
            return Err(reject(name, "must be positive".into()));
        }
    }
    if cfg.image_size % 16 != 0 {
        return Err(reject(
            "image_size",
            format!("{} not divisible by 16", cfg.image_size),
        ));
    }
    if !(cfg.lr >= 0.0) {
        return Err(reject("lr", format!("{} negative or NaN", cfg.lr)));
    }
    if !(cfg.weight_decay >= 0.0) {
        return Err(reject(
            "weight_decay",
            format!("{} negative or NaN", cfg.weight_decay),
        ));
    }
    if cfg.decoder_kind == DecoderKind::Fcn {
        cfg.decoder_levels = 1;
    }
    Ok(ValidatedConfig(cfg))
}

pub const PRESET_NAMES: [&str; 4] = ["baseline", "decon-sl", "decon-ml-s", "decon-ml-l"];

/// Named configurations for the pre-training variants.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::default();
    let cfg = match name {
        "baseline" => ExperimentConfig {
            alpha: 1.0,
            dropout_p: 0.0,
            decoder_kind: DecoderKind::None,
            decoder_levels: 1,
            ..base
        },
        "decon-sl" => ExperimentConfig {
            alpha: 0.25,
            dropout_p: 0.0,
            decoder_kind: DecoderKind::Fcn,
            decoder_levels: 1,
            ..base
        },
        "decon-ml-l" => ExperimentConfig {
            alpha: 0.0,
            dropout_p: 0.5,
            decoder_kind: DecoderKind::Fpn,
            decoder_levels: 4,
            proj_hidden: 128,
            ..base
        },
        "decon-ml-s" => ExperimentConfig {
            alpha: 0.0,
            dropout_p: 0.5,
            decoder_kind: DecoderKind::Fpn,
            decoder_levels: 2,
            proj_hidden: 64,
            ..base
        },
        other => {
            return Err(DeconError::Config(format!(
                "unknown preset `{other}`; valid presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

/// Renders a config as pretty JSON.
pub fn render(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

/// Parses a config from JSON, rejecting unknown keys.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    serde_json::from_str(text).map_err(|e| DeconError::Config(format!("config JSON: {e}")))
}

/// Stable 64-bit FNV-1a hash of the canonical JSON rendering, used to tie
/// checkpoints to the config that produced them.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
