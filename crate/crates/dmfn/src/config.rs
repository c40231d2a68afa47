//! Run configuration: one JSON document merging every module's settings,
//! with dotted-path CLI overrides and a platform-stable content hash that is
//! stamped into every checkpoint and report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{CropPolicy, DatasetSpec, Split};
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::{AblationVariant, GeneratorConfig};
use crate::losses::DistanceMetric;
use crate::masking::MaskProtocol;
use crate::types::{LossWeights, TrainConfig};
use crate::vgg::VggSource;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub metric: DistanceMetric,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            metric: DistanceMetric::L2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    /// Separate evaluation root; defaults to `root` (with the val split).
    pub val_root: Option<PathBuf>,
    pub policy: CropPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            val_root: None,
            policy: CropPolicy::Generic,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Manifest path or `synthetic:<seed>`; `DMFN_VGG_WEIGHTS` overrides.
    pub vgg_weights: String,
    pub irregular_mask_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            vgg_weights: String::new(),
            irregular_mask_dir: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    pub log_every: u64,
    pub sample_every: u64,
    pub checkpoint_every: u64,
    /// Emit guidance / average-feature debug maps alongside sample grids.
    pub debug_maps: bool,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self {
            log_every: 50,
            sample_every: 500,
            checkpoint_every: 1000,
            debug_maps: false,
        }
    }
}

/// Optional schedule knobs; both off by default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub grad_clip: Option<f64>,
    pub lr_decay_every: Option<u64>,
    pub lr_decay_factor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettingsConfig {
    /// Compute PSNR/SSIM on the hole region only instead of the full frame.
    pub hole_only: bool,
    /// External LPIPS backend: a command receiving two PNG paths, printing a
    /// float. `DMFN_LPIPS_CMD` overrides.
    pub lpips_cmd: Option<String>,
    /// Evaluate at most this many images.
    pub num_images: Option<usize>,
    pub protocol: MaskProtocol,
}

impl Default for EvalSettingsConfig {
    fn default() -> Self {
        Self {
            hole_only: false,
            lpips_cmd: None,
            num_images: None,
            protocol: MaskProtocol::Center,
        }
    }
}

/// The merged run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub ablation: AblationVariant,
    pub mask_protocol: MaskProtocol,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub logging: LoggingConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalSettingsConfig,
}

impl RunConfig {
    /// Load from a JSON file (or defaults when `path` is None) and apply
    /// dotted-path overrides like `loss.metric.kind=gaussian`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: Value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Error::config(format!("cannot read config '{}': {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::config(format!("config '{}': {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.weights.validate()?;
        self.loss.metric.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        if matches!(self.mask_protocol, MaskProtocol::Irregular)
            && self.paths.irregular_mask_dir.is_none()
        {
            return Err(Error::config(
                "mask_protocol = irregular requires paths.irregular_mask_dir",
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical (sorted-key) JSON encoding.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canon = value.to_string(); // serde_json maps are BTree-ordered
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Resolve the VGG weights source, honoring `DMFN_VGG_WEIGHTS`.
    pub fn vgg_source(&self) -> Result<VggSource> {
        let from_env = std::env::var("DMFN_VGG_WEIGHTS").ok();
        let s = from_env.as_deref().unwrap_or(&self.paths.vgg_weights);
        VggSource::parse(s)
    }

    /// External LPIPS command, honoring `DMFN_LPIPS_CMD`.
    pub fn lpips_cmd(&self) -> Option<String> {
        std::env::var("DMFN_LPIPS_CMD")
            .ok()
            .or_else(|| self.eval.lpips_cmd.clone())
    }

    pub fn train_dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            root: self.data.root.clone(),
            policy: self.data.policy,
            split: Split::Train,
            target_size: self.train.image_size,
        }
    }

    pub fn val_dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            root: self
                .data
                .val_root
                .clone()
                .unwrap_or_else(|| self.data.root.clone()),
            policy: self.data.policy,
            split: Split::Val,
            target_size: self.train.image_size,
        }
    }
}

/// Apply one `a.b.c=value` override onto a JSON tree. The value is parsed as
/// JSON when possible, else taken as a string.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{spec}' must be key=value")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::config(format!(
                "override path '{path}' crosses a non-object at '{part}'"
            )));
        }
        let map = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty override path")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_hashes_stably() {
        let cfg = RunConfig::default();
        let h1 = cfg.config_hash();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.config_hash(), h1);
        assert_eq!(cfg.train.learning_rate, 2e-4);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.loss.weights.lambda, 25.0);
    }

    #[test]
    fn overrides_reach_nested_fields_and_change_the_hash() {
        let base = RunConfig::load(None, &[]).unwrap();
        let cfg = RunConfig::load(
            None,
            &[
                "loss.metric.kind=gaussian".into(),
                "loss.metric.sigma=1.0".into(),
                "train.batch_size=4".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.metric, DistanceMetric::Gaussian { sigma: 1.0 });
        assert_eq!(cfg.train.batch_size, 4);
        assert_ne!(cfg.config_hash(), base.config_hash());
    }

    #[test]
    fn bad_override_and_bad_field_are_config_errors() {
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
        assert!(RunConfig::load(None, &["train.no_such_field=3".into()]).is_err());
        assert!(RunConfig::load(None, &["train.batch_size=0".into()]).is_err());
    }

    #[test]
    fn ablation_override_parses() {
        let cfg = RunConfig::load(
            None,
            &[r#"ablation={"kind":"rate_k","rate":8,"wide":true}"#.into()],
        )
        .unwrap();
        assert_eq!(
            cfg.ablation,
            AblationVariant::RateK {
                rate: 8,
                wide: true
            }
        );
    }
}
