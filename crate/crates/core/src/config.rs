//! Run configuration. Files and overrides use flat dotted keys such as
//! `model.width` or `pretrain.mask_ratio`; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::codebook::{TauSchedule, TAU_END, TAU_START};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Random,
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width `c`; codebook entries share it.
    pub width: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Patches per cloud `G`.
    pub groups: usize,
    /// Points per patch `S` (center included).
    pub group_size: usize,
    /// Codebook entries `T`.
    pub codebook_size: usize,
    /// Points per cloud fed to the model.
    pub points: usize,
    /// Share one decoder between both reconstruction branches.
    pub siamese: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 96,
            heads: 4,
            encoder_depth: 6,
            decoder_depth: 4,
            groups: 32,
            group_size: 16,
            codebook_size: 64,
            points: 512,
            siamese: true,
        }
    }
}

impl ModelConfig {
    /// Full-size shape: 12 encoder blocks of width 384, 64 patches of 32
    /// points from 1024-point clouds.
    pub fn full_shape() -> Self {
        Self {
            width: 384,
            heads: 6,
            encoder_depth: 12,
            decoder_depth: 4,
            groups: 64,
            group_size: 32,
            codebook_size: 256,
            points: 1024,
            siamese: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad("model.width must be divisible by model.heads");
        }
        if self.encoder_depth == 0 {
            return bad("model.encoder_depth must be positive");
        }
        if self.groups < 2 || self.groups > self.points {
            return bad("model.groups must be in [2, model.points]");
        }
        if self.group_size == 0 || self.group_size > self.points {
            return bad("model.group_size must be in [1, model.points]");
        }
        if self.codebook_size < 2 {
            return bad("model.codebook_size must be at least 2");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub mask_ratio: f64,
    pub mask_kind: MaskKind,
    /// Weight of the point reconstruction loss.
    pub eta: f64,
    pub smooth_l1_beta: f64,
    /// Teacher blocks averaged into the target, counted from the last.
    pub target_layers: usize,
    /// Normalize each channel across tokens before the per-token norm.
    pub target_instance_norm: bool,
    pub ema_start: f64,
    pub ema_end: f64,
    pub tau_schedule: TauSchedule,
    pub tau_start: f64,
    pub tau_end: f64,
    pub augment: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_steps: 25,
            mask_ratio: 0.65,
            mask_kind: MaskKind::Random,
            eta: 1.0,
            smooth_l1_beta: 1.0,
            target_layers: 1,
            target_instance_norm: false,
            ema_start: 0.996,
            ema_end: 1.0,
            tau_schedule: TauSchedule::Cosine,
            tau_start: TAU_START,
            tau_end: TAU_END,
            augment: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("pretrain.mask_ratio must be in (0, 1)");
        }
        if !(self.eta >= 0.0) {
            return bad("pretrain.eta must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("pretrain.batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_start) || !(0.0..=1.0).contains(&self.ema_end) {
            return bad("pretrain.ema_start/ema_end must be in [0, 1]");
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return bad("pretrain.tau_start/tau_end must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Encoder blocks (0-based) whose outputs are aggregated; empty means the
    /// last block.
    pub layers: Vec<usize>,
    pub hidden: usize,
    pub dropout: f64,
    pub freeze_codebook: bool,
    pub from_scratch: bool,
    pub augment: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 0.05,
            warmup_steps: 10,
            layers: Vec::new(),
            hidden: 256,
            dropout: 0.5,
            freeze_codebook: false,
            from_scratch: false,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub runs: usize,
    pub steps: usize,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            ways: 2,
            shots: 5,
            queries: 20,
            runs: 10,
            steps: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `manifest.csv`; synthetic data is generated when unset.
    pub dir: Option<String>,
    pub test_dir: Option<String>,
    pub families: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points_per_cloud: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            test_dir: None,
            families: ["sphere", "cube", "torus", "cylinder"].map(String::from).to_vec(),
            train_per_class: 128,
            test_per_class: 32,
            points_per_cloud: 1024,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    /// Checkpoint consumed by finetune / eval / inspect-codebook.
    pub checkpoint: Option<String>,
    /// Single `.xyz` cloud for inspect-codebook.
    pub input: Option<String>,
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub fewshot: FewShotConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        if let Some(&bad) = self.finetune.layers.iter().find(|&&l| l >= self.model.encoder_depth) {
            return Err(Error::Config(format!("finetune.layers: {bad} exceeds encoder depth")));
        }
        Ok(())
    }

    /// Builds a config from flat dotted keys (nested objects are accepted
    /// too). A `preset` key of `"full"` swaps in the full-size model before
    /// explicit `model.*` keys apply.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut flat = flat.clone();
        for (alias, key) in KEY_ALIASES {
            if let Some(v) = flat.remove(*alias) {
                if flat.contains_key(*key) {
                    return Err(Error::Config(format!("both {alias:?} and {key:?} given")));
                }
                flat.insert(key.to_string(), v);
            }
        }
        let nested = nest(&flat)?;
        let preset = nested.get("preset").and_then(Value::as_str).map(str::to_string);
        let mut base = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = &preset {
            match p.as_str() {
                "full" => base["model"] = serde_json::to_value(ModelConfig::full_shape())?,
                "desk" => {}
                other => return Err(Error::Config(format!("unknown preset {other:?}"))),
            }
        }
        merge(&mut base, Value::Object(nested));
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match v {
            Value::Object(m) => Self::from_flat(&m),
            _ => Err(Error::Config("top level must be an object".into())),
        }
    }

    /// Fully resolved config as flat dotted keys.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten_into("", &serde_json::to_value(self).expect("serializable"), &mut out);
        out
    }

    pub fn known_keys() -> Vec<String> {
        RunConfig::default().to_flat().keys().cloned().collect()
    }
}

/// Alternative spellings accepted in flat configs.
pub const KEY_ALIASES: &[(&str, &str)] = &[("model.c", "model.width")];

fn nest(flat: &Map<String, Value>) -> Result<Map<String, Value>> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut cur = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
            cur = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("key {key:?} conflicts with a scalar value")))?;
        }
        let leaf = parts[parts.len() - 1].to_string();
        match (cur.get_mut(&leaf), value) {
            (Some(Value::Object(existing)), Value::Object(new)) => {
                for (k, v) in new {
                    existing.insert(k.clone(), v.clone());
                }
            }
            _ => {
                cur.insert(leaf, value.clone());
            }
        }
    }
    Ok(root)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn flat(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn dotted_keys_apply() {
        let cfg = RunConfig::from_flat(&flat(json!({"model.width": 32, "pretrain.mask_kind": "block"}))).unwrap();
        assert_eq!(cfg.model.width, 32);
        assert_eq!(cfg.pretrain.mask_kind, MaskKind::Block);
        assert_eq!(cfg.model.heads, 4);
    }

    #[test]
    fn width_alias() {
        let cfg = RunConfig::from_flat(&flat(json!({"model.c": 48}))).unwrap();
        assert_eq!(cfg.model.width, 48);
        assert!(RunConfig::from_flat(&flat(json!({"model.c": 48, "model.width": 48}))).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_flat(&flat(json!({"model.widht": 32}))).is_err());
        assert!(RunConfig::from_flat(&flat(json!({"bogus": 1}))).is_err());
    }

    #[test]
    fn full_preset() {
        let cfg = RunConfig::from_flat(&flat(json!({"preset": "full"}))).unwrap();
        assert_eq!(cfg.model, ModelConfig::full_shape());
        let cfg = RunConfig::from_flat(&flat(json!({"preset": "full", "model.encoder_depth": 2}))).unwrap();
        assert_eq!(cfg.model.encoder_depth, 2);
        assert_eq!(cfg.model.width, 384);
    }

    #[test]
    fn flat_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.pretrain.steps = 7;
        cfg.finetune.layers = vec![1, 3];
        let back = RunConfig::from_flat(&cfg.to_flat()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_flat(&flat(json!({"pretrain.mask_ratio": 1.0}))).is_err());
        assert!(RunConfig::from_flat(&flat(json!({"model.heads": 5}))).is_err());
    }
}
