//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::harness::synthetic::GeneratorConfig;
use crate::objectives::LossWeights;
use crate::stages::StageOptions;
use crate::wera::WeraConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub generator: GeneratorConfig,
    pub weights: LossWeights,
    pub wera: WeraConfig,
    pub gat_epochs: usize,
    pub imt_epochs: usize,
    pub wera_epochs: usize,
    pub proto_epochs: usize,
    pub lr: f64,
    pub wera_lr: f64,
    pub proto_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub beta_sharp: f64,
    pub beta2: f64,
    pub audit_trials: usize,
    pub audit_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            generator: GeneratorConfig::default(),
            weights: LossWeights::default(),
            wera: WeraConfig::default(),
            gat_epochs: 40,
            imt_epochs: 40,
            wera_epochs: 40,
            proto_epochs: 10,
            lr: 1e-3,
            wera_lr: 5e-4,
            proto_lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.0,
            batch_size: 32,
            beta_sharp: 5.0,
            beta2: 5.0,
            audit_trials: 16,
            audit_samples: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    n + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.backbone;
        let g = &mut self.generator;
        let w = &mut self.weights;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "backbone_seed" => b.seed = parse(key, value)?,
            "tokens" => b.tokens = parse(key, value)?,
            "in_channels" => b.in_channels = parse(key, value)?,
            "channels" => b.channels = parse(key, value)?,
            "embed_dim" => b.embed_dim = parse(key, value)?,
            "token_dim" => b.token_dim = parse(key, value)?,
            "text_context_len" => b.text_context_len = parse(key, value)?,
            "visual_prompt_len" => b.visual_prompt_len = parse(key, value)?,
            "text_hidden" => b.text_hidden = parse(key, value)?,
            "visual_hidden" => b.visual_hidden = parse(key, value)?,
            "n_classes" => {
                b.n_classes = parse(key, value)?;
                g.n_classes = b.n_classes;
            }
            "n_domains" => {
                b.n_domains = parse(key, value)?;
                g.n_domains = b.n_domains;
            }
            "samples_per_cell" => g.samples_per_cell = parse(key, value)?,
            "token_noise" => g.token_noise = parse(key, value)?,
            "style_scale_min" => g.style_scale.0 = parse(key, value)?,
            "style_scale_max" => g.style_scale.1 = parse(key, value)?,
            "style_shift_min" => g.style_shift.0 = parse(key, value)?,
            "style_shift_max" => g.style_shift.1 = parse(key, value)?,
            "anchor_noise" => g.anchor_noise = parse(key, value)?,
            "data_seed" => g.seed = parse(key, value)?,
            "alpha1" => w.alpha1 = parse(key, value)?,
            "alpha2" => w.alpha2 = parse(key, value)?,
            "alpha3" => {
                w.alpha3 = parse(key, value)?;
                self.wera.alpha3 = w.alpha3;
            }
            "beta1" => w.beta1 = parse(key, value)?,
            "gamma_prime" => {
                w.gamma_prime = parse(key, value)?;
                self.wera.gamma_prime = w.gamma_prime;
            }
            "tau" => w.tau = parse(key, value)?,
            "wera_bases" => self.wera.bases = parse(key, value)?,
            "inner_steps" => self.wera.inner_steps = parse(key, value)?,
            "inner_eta" => self.wera.eta = parse(key, value)?,
            "random_style_init" => self.wera.random_init = parse(key, value)?,
            "gat_epochs" => self.gat_epochs = parse(key, value)?,
            "imt_epochs" => self.imt_epochs = parse(key, value)?,
            "wera_epochs" => self.wera_epochs = parse(key, value)?,
            "proto_epochs" => self.proto_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "wera_lr" => self.wera_lr = parse(key, value)?,
            "proto_lr" => self.proto_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "beta_sharp" => self.beta_sharp = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "audit_trials" => self.audit_trials = parse(key, value)?,
            "audit_samples" => self.audit_samples = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.wera.validate()?;
        self.generator.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.beta_sharp >= 0.0 && self.beta2 >= 0.0) {
            return Err(Error::Config("beta_sharp and beta2 must be ≥ 0".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("wera_lr", self.wera_lr),
            ("proto_lr", self.proto_lr),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let g = &self.generator;
        let w = &self.weights;
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("backbone_seed", b.seed.to_string()),
            ("tokens", b.tokens.to_string()),
            ("in_channels", b.in_channels.to_string()),
            ("channels", b.channels.to_string()),
            ("embed_dim", b.embed_dim.to_string()),
            ("token_dim", b.token_dim.to_string()),
            ("text_context_len", b.text_context_len.to_string()),
            ("visual_prompt_len", b.visual_prompt_len.to_string()),
            ("text_hidden", b.text_hidden.to_string()),
            ("visual_hidden", b.visual_hidden.to_string()),
            ("n_classes", b.n_classes.to_string()),
            ("n_domains", b.n_domains.to_string()),
            ("samples_per_cell", g.samples_per_cell.to_string()),
            ("token_noise", g.token_noise.to_string()),
            ("style_scale_min", g.style_scale.0.to_string()),
            ("style_scale_max", g.style_scale.1.to_string()),
            ("style_shift_min", g.style_shift.0.to_string()),
            ("style_shift_max", g.style_shift.1.to_string()),
            ("anchor_noise", g.anchor_noise.to_string()),
            ("data_seed", g.seed.to_string()),
            ("alpha1", w.alpha1.to_string()),
            ("alpha2", w.alpha2.to_string()),
            ("alpha3", w.alpha3.to_string()),
            ("beta1", w.beta1.to_string()),
            ("gamma_prime", w.gamma_prime.to_string()),
            ("tau", w.tau.to_string()),
            ("wera_bases", self.wera.bases.to_string()),
            ("inner_steps", self.wera.inner_steps.to_string()),
            ("inner_eta", self.wera.eta.to_string()),
            ("random_style_init", self.wera.random_init.to_string()),
            ("gat_epochs", self.gat_epochs.to_string()),
            ("imt_epochs", self.imt_epochs.to_string()),
            ("wera_epochs", self.wera_epochs.to_string()),
            ("proto_epochs", self.proto_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("wera_lr", self.wera_lr.to_string()),
            ("proto_lr", self.proto_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("momentum", self.momentum.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta_sharp", self.beta_sharp.to_string()),
            ("beta2", self.beta2.to_string()),
            ("audit_trials", self.audit_trials.to_string()),
            ("audit_samples", self.audit_samples.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn stage_options(&self, epochs: usize, lr: f64, stream: u64) -> StageOptions {
        StageOptions {
            epochs,
            lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_mul(1000).wrapping_add(stream),
        }
    }
}
