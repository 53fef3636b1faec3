//! Run configuration, read from a single TOML document. Unknown keys are
//! rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpi::{BpiConfig, PatchHead, ProbeConfig};
use crate::data::{Augment, DataSource};
use crate::error::{Error, Result};
use crate::masking::DEFAULT_M_REF;
use crate::vit::{MaskScales, VitConfig};

/// Backbone learning rate used by the frozen mode.
pub const FROZEN_LR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs of the dense baseline.
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: Augment,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            augment: Augment::default(),
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr_model: f64,
    pub lr_bpi: f64,
    pub weight_decay: f64,
    /// Train the backbone at [`FROZEN_LR`] during the pruning phases.
    pub frozen: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_model: 5e-4,
            lr_bpi: 5e-4,
            weight_decay: 0.05,
            frozen: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs_warmup: usize,
    pub epochs_sparsify: usize,
    pub epochs_sharpen: usize,
    pub epochs_finetune: usize,
    /// Steps between mask updates; absent means once per epoch.
    pub mask_update_freq: Option<usize>,
    /// Keep re-ranking masks during sharpening (otherwise only `τ` changes).
    pub updates_during_sharpen: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs_warmup: 3,
            epochs_sparsify: 22,
            epochs_sharpen: 25,
            epochs_finetune: 50,
            mask_update_freq: None,
            updates_during_sharpen: true,
        }
    }
}

impl ScheduleConfig {
    pub fn pruning_epochs(&self) -> usize {
        self.epochs_warmup + self.epochs_sparsify + self.epochs_sharpen
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    /// Global keep ratio `κ^m`.
    pub keep_ratio: f64,
    /// Patch-token weight in the merged importance.
    pub alpha: f64,
    pub m_ref: f64,
    pub tau0: f64,
    pub tau_floor: f64,
    pub kappa_floor: f64,
    pub eps: f64,
    /// Divide block performance by the full rather than the remaining
    /// parameter count.
    pub static_param_count: bool,
    /// Rank scale factors `s_j` per partial mask kind.
    pub s_in: f64,
    pub s_out: f64,
    pub s_e: f64,
    pub s_hid: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        PruningConfig {
            keep_ratio: 0.5,
            alpha: 0.5,
            m_ref: DEFAULT_M_REF,
            tau0: 0.1,
            tau_floor: 5e-3,
            kappa_floor: 0.05,
            eps: crate::budget::IMPORTANCE_EPS,
            static_param_count: false,
            s_in: 1.0,
            s_out: 1.0,
            s_e: 1.0,
            s_hid: 1.0,
        }
    }
}

impl PruningConfig {
    pub fn scales(&self) -> MaskScales {
        MaskScales {
            s_in: self.s_in,
            s_out: self.s_out,
            s_e: self.s_e,
            s_hid: self.s_hid,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpiSection {
    pub patch_head: PatchHead,
    /// Re-run backward on the head loss alone every step and fail if any
    /// backbone gradient is nonzero.
    pub check_stop_gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// Head-only training epochs per probed checkpoint.
    pub epochs: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { epochs: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: VitConfig,
    pub data: DataSource,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub pruning: PruningConfig,
    pub bpi: BpiSection,
    pub probe: ProbeSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn bpi_config(&self) -> BpiConfig {
        BpiConfig {
            patch_head: self.bpi.patch_head,
            lr: self.optimizer.lr_bpi,
            weight_decay: 0.0,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            epochs: self.probe.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            augment: self.train.augment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if let DataSource::Synthetic(s) = &self.data {
            if s.classes != self.model.num_classes
                || s.image_size != self.model.image_size
                || s.channels != self.model.channels
            {
                return fail("synthetic data geometry must match the model".into());
            }
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if self.schedule.mask_update_freq == Some(0) {
            return fail("schedule.mask_update_freq must be at least 1".into());
        }
        let p = &self.pruning;
        if !(p.keep_ratio > 0.0 && p.keep_ratio <= 1.0) {
            return fail(format!("pruning.keep_ratio {} outside (0, 1]", p.keep_ratio));
        }
        if !(0.0..=1.0).contains(&p.alpha) {
            return fail(format!("pruning.alpha {} outside [0, 1]", p.alpha));
        }
        if !(p.m_ref > 0.5 && p.m_ref < 1.0) {
            return fail(format!("pruning.m_ref {} outside (0.5, 1)", p.m_ref));
        }
        if !(p.tau_floor > 0.0 && p.tau0 >= p.tau_floor) {
            return fail("need 0 < pruning.tau_floor <= pruning.tau0".into());
        }
        if !(0.0..=1.0).contains(&p.kappa_floor) || p.eps.is_nan() || p.eps < 0.0 {
            return fail("pruning.kappa_floor must be in [0, 1] and eps non-negative".into());
        }
        let o = &self.optimizer;
        if !(o.lr_model >= 0.0 && o.lr_bpi >= 0.0 && o.weight_decay >= 0.0) {
            return fail("learning rates and weight decay must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pruning.alpha, 0.5);
        assert_eq!(cfg.pruning.m_ref, 0.9);
        assert_eq!(cfg.pruning.tau0, 0.1);
        assert_eq!(cfg.optimizer.lr_model, 5e-4);
        assert_eq!(cfg.schedule.pruning_epochs(), 50);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[pruning]\nkeep_ratoi = 0.3\n").is_err());
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
        let ok = RunConfig::from_toml("[pruning]\nkeep_ratio = 0.3\ns_hid = 0.5\n").unwrap();
        assert_eq!(ok.pruning.keep_ratio, 0.3);
        assert_eq!(ok.pruning.scales().s_hid, 0.5);
    }

    #[test]
    fn data_sources_parse() {
        let cfg = RunConfig::from_toml("[data]\nsource = \"synthetic\"\nsigma = 0.1\n").unwrap();
        match cfg.data {
            DataSource::Synthetic(s) => assert_eq!(s.sigma, 0.1),
            other => panic!("unexpected {other:?}"),
        }
        let text = "[model]\nchannels = 1\n[data]\nsource = \"idx\"\ntrain_images = \"a\"\ntrain_labels = \"b\"\nval_images = \"c\"\nval_labels = \"d\"\n";
        assert!(matches!(
            RunConfig::from_toml(text).unwrap().data,
            DataSource::Idx { .. }
        ));
        assert!(RunConfig::from_toml("[pruning]\nkeep_ratio = 0.0\n").is_err());
    }
}
