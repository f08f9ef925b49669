use std::path::{Path, PathBuf};

use anyhow::Context;
use laxcat::dataset::SynthParams;
use laxcat::model::{Ablation, LaxcatConfig};
use laxcat::numerics::Activation;
use laxcat::trainer::TrainProtocol;
use serde::{Deserialize, Serialize};

use crate::Usage;

/// Model hyperparameters; the data shape comes from the dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOptions {
    pub kernel_len: usize,
    pub stride: Option<usize>,
    pub filters: usize,
    pub hidden: usize,
    pub reg_alpha: f64,
    pub conv_activation: Activation,
    pub sigma1: Activation,
    pub sigma2: Activation,
    pub ablation: Ablation,
    pub seed: u64,
    pub conv_bias: bool,
    pub reg_biases: bool,
    pub reg_conv: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let c = LaxcatConfig::new(1, 1, 1);
        Self {
            kernel_len: c.kernel_len,
            stride: c.stride,
            filters: c.filters,
            hidden: c.hidden,
            reg_alpha: c.reg_alpha,
            conv_activation: c.conv_activation,
            sigma1: c.sigma1,
            sigma2: c.sigma2,
            ablation: c.ablation,
            seed: c.seed,
            conv_bias: c.conv_bias,
            reg_biases: c.reg_biases,
            reg_conv: c.reg_conv,
        }
    }
}

impl ModelOptions {
    pub fn for_shape(&self, variables: usize, t_len: usize, classes: usize) -> LaxcatConfig {
        LaxcatConfig {
            variables,
            t_len,
            classes,
            kernel_len: self.kernel_len,
            stride: self.stride,
            filters: self.filters,
            hidden: self.hidden,
            reg_alpha: self.reg_alpha,
            conv_activation: self.conv_activation,
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            ablation: self.ablation,
            seed: self.seed,
            conv_bias: self.conv_bias,
            reg_biases: self.reg_biases,
            reg_conv: self.reg_conv,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Everything one experiment needs, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelOptions,
    pub protocol: TrainProtocol,
    pub synth: SynthParams,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| Usage(format!("invalid config {}: {e}", path.display())).into())
    }

    /// `--seed` replaces both the protocol seed and the model seed.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.protocol.seed = s;
            self.model.seed = s;
            self.synth.seed = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_library() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.for_shape(3, 50, 2), LaxcatConfig::new(3, 50, 2));
        assert_eq!(cfg.protocol, TrainProtocol::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"filterz": 8}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
        let cfg: RunConfig =
            serde_json::from_str(r#"{"model": {"filters": 8}, "protocol": {"repeats": 2}}"#).unwrap();
        assert_eq!(cfg.model.filters, 8);
        assert_eq!(cfg.protocol.repeats, 2);
        assert_eq!(cfg.protocol.batch_size, 40);
    }
}
