//! Run configuration: a flat TOML table plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synthetic::SyntheticSpec;
use crate::error::{FbError, Result};
use crate::fb::{FactorInit, MaskScheme};
use crate::nn::{BuildOptions, PresetOptions, SgdConfig};
use crate::report::content_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// `f64` or `f32`.
    pub dtype: String,

    pub preset: String,
    pub k: usize,
    pub p: f64,
    pub width: usize,
    pub head_kernel: usize,
    /// Dropout rate in front of the head; 0 disables it.
    pub dropout: f64,
    pub inverted_dropfactor: bool,
    /// Factor init std; 0 selects `sqrt(1/(k·n))`.
    pub factor_std: f64,

    /// `synthetic`, `cifar10` or `cifar100`.
    pub dataset: String,
    /// Dataset root; falls back to `FBK_DATA_DIR`.
    pub data_dir: String,
    /// Class-balanced training subset size; 0 keeps everything.
    pub subset: usize,
    pub augment: bool,
    pub synth_n: usize,
    pub synth_rank: usize,
    pub synth_classes: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_noise: f64,
    pub synth_linear_scale: f64,
    /// Seeds the synthetic generator and subset selection; independent of
    /// `seed` so that runs with different seeds see the same data.
    pub data_seed: u64,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factors: bool,
    pub decay_norm: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    /// Stop starting new runs/epochs after this many seconds; 0 = no cap.
    pub wallclock_cap_secs: f64,

    pub gradcheck_ks: Vec<usize>,
    pub gradcheck_tol: f64,
    /// Negative control: flips the sign of one analytic gradient.
    pub corrupt_gradient: bool,

    pub oracle_instances: usize,
    pub mc_masks: usize,

    pub bench_sizes: Vec<usize>,
    pub bench_reps: usize,

    pub ablate_ks: Vec<usize>,
    pub ablate_ps: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dtype: "f64".into(),
            preset: "fb".into(),
            k: 4,
            p: 1.0,
            width: 16,
            head_kernel: 1,
            dropout: 0.0,
            inverted_dropfactor: false,
            factor_std: 0.0,
            dataset: "synthetic".into(),
            data_dir: String::new(),
            subset: 0,
            augment: true,
            synth_n: 16,
            synth_rank: 4,
            synth_classes: 4,
            synth_train: 8000,
            synth_test: 2000,
            synth_noise: 0.0,
            synth_linear_scale: 1.0,
            data_seed: 0,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_factors: true,
            decay_norm: false,
            batch_size: 64,
            epochs: 60,
            lr_milestones: vec![40, 50],
            lr_decay: 0.1,
            warmup_epochs: 3,
            wallclock_cap_secs: 0.0,
            gradcheck_ks: vec![0, 1, 5, 20],
            gradcheck_tol: 1e-5,
            corrupt_gradient: false,
            oracle_instances: 100,
            mc_masks: 100_000,
            bench_sizes: vec![256, 512, 1024, 2048, 4096],
            bench_reps: 5,
            ablate_ks: vec![10, 20, 50, 80],
            ablate_ps: vec![0.3, 0.5, 0.7, 1.0],
        }
    }
}

fn config_err(msg: impl Into<String>) -> FbError {
    FbError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FbError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value`. The value is read as a TOML literal, falling
    /// back to a bare string, so `k=20`, `lr_milestones=[5,8]` and
    /// `preset=fbn` all work.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        if !table.contains_key(key) {
            return Err(config_err(format!("unknown config key {key:?}")));
        }
        // Integers are accepted where floats are expected.
        let value = match (&table[key], value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::Array(_), toml::Value::Array(items)) => toml::Value::Array(items),
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("gradcheck_tol", self.gradcheck_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(config_err(format!("p must lie in (0, 1], got {}", self.p)));
        }
        if self.ablate_ps.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(config_err("ablate_ps entries must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(config_err(
                "momentum must lie in [0, 1) and weight_decay be non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(config_err("lr_milestones must be non-decreasing"));
        }
        if !matches!(self.dtype.as_str(), "f32" | "f64") {
            return Err(config_err(format!("dtype must be f32 or f64, got {:?}", self.dtype)));
        }
        if !matches!(self.dataset.as_str(), "synthetic" | "cifar10" | "cifar100") {
            return Err(config_err(format!("unknown dataset {:?}", self.dataset)));
        }
        Ok(())
    }

    /// Content hash of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        content_hash(self.to_toml().as_bytes())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_factors: self.decay_factors,
            decay_norm: self.decay_norm,
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            factor_init: FactorInit {
                factor_std: (self.factor_std > 0.0).then_some(self.factor_std),
            },
            scheme: if self.inverted_dropfactor {
                MaskScheme::Inverted
            } else {
                MaskScheme::Standard
            },
        }
    }

    pub fn preset_options(&self, classes: usize) -> PresetOptions {
        PresetOptions {
            classes,
            k: self.k,
            p: self.p,
            width: self.width,
            head_kernel: self.head_kernel,
            dropout: (self.dropout > 0.0).then_some(self.dropout),
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            n: self.synth_n,
            rank: self.synth_rank,
            classes: self.synth_classes,
            train: self.synth_train,
            test: self.synth_test,
            noise: self.synth_noise,
            linear_scale: self.synth_linear_scale,
            seed: self.data_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("k=20").unwrap();
        cfg.apply_override("preset=fbn").unwrap();
        cfg.apply_override("lr=1").unwrap();
        cfg.apply_override("lr_milestones=[5, 8]").unwrap();
        cfg.apply_override("dtype=\"f32\"").unwrap();
        assert_eq!(
            (cfg.k, cfg.preset.as_str(), cfg.lr, cfg.dtype.as_str()),
            (20, "fbn", 1.0, "f32")
        );
        assert_eq!(cfg.lr_milestones, [5, 8]);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply_override("nope=1"), Err(FbError::Config(_))));
        assert!(matches!(cfg.apply_override("k=abc"), Err(FbError::Config(_))));
        assert!(matches!(cfg.apply_override("k"), Err(FbError::Config(_))));
        assert!(matches!(RunConfig::from_toml("bogus = 3"), Err(FbError::Config(_))));
        cfg.p = 0.0;
        assert!(matches!(cfg.validate(), Err(FbError::Config(_))));
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }
}
