//! Training configuration, read from a flat TOML key/value file.
//!
//! Every key is optional; missing keys take the defaults below. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Seeds used by multi-seed commands (`ablate`).
    pub seeds: Vec<u64>,
    pub lambda_distill: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    /// Must match the cohort when set.
    pub n_rois: Option<usize>,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Defaults to `2 · d_model`.
    pub d_ff: Option<usize>,
    /// Defaults to `d_model`.
    pub d_distill: Option<usize>,
    pub z_dim: usize,
    pub hyper_hidden: usize,
    pub tau_amd: f64,
    pub tau_spf: f64,
    pub eta: f64,

    pub amd_enabled: bool,
    pub gspf_enabled: bool,
    pub pspf_enabled: bool,
    pub final_layer_exchange: bool,
    pub zero_gate_diagonal: bool,
    pub layer_norm: bool,
    pub gate_fc: bool,
    pub gate_sc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(0, 0);
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            batch_size: 32,
            epochs: 200,
            patience: 20,
            seed: 0,
            seeds: vec![0, 1, 2],
            lambda_distill: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_rois: None,
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            d_ff: None,
            d_distill: None,
            z_dim: m.z_dim,
            hyper_hidden: m.hyper_hidden,
            tau_amd: m.tau_amd,
            tau_spf: m.tau_spf,
            eta: m.eta,
            amd_enabled: m.amd_enabled,
            gspf_enabled: m.gspf_enabled,
            pspf_enabled: m.pspf_enabled,
            final_layer_exchange: m.final_layer_exchange,
            zero_gate_diagonal: m.zero_gate_diagonal,
            layer_norm: m.layer_norm,
            gate_fc: m.gate_fc,
            gate_sc: m.gate_sc,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_distill >= 0.0) {
            return fail("weight_decay and lambda_distill must be non-negative".into());
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        Ok(())
    }

    /// Model architecture for a cohort with the given sizes.
    pub fn model_config(&self, n_rois: usize, n_priors: usize) -> Result<ModelConfig> {
        if let Some(n) = self.n_rois {
            if n != n_rois {
                return Err(Error::Config(format!(
                    "config n_rois = {n} but cohort has {n_rois} ROIs"
                )));
            }
        }
        let cfg = ModelConfig {
            n_rois,
            n_priors,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff.unwrap_or(2 * self.d_model),
            d_distill: self.d_distill.unwrap_or(self.d_model),
            z_dim: self.z_dim,
            hyper_hidden: self.hyper_hidden,
            tau_amd: self.tau_amd,
            tau_spf: self.tau_spf,
            eta: self.eta,
            amd_enabled: self.amd_enabled,
            gspf_enabled: self.gspf_enabled,
            pspf_enabled: self.pspf_enabled,
            final_layer_exchange: self.final_layer_exchange,
            zero_gate_diagonal: self.zero_gate_diagonal,
            layer_norm: self.layer_norm,
            gate_fc: self.gate_fc,
            gate_sc: self.gate_sc,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
