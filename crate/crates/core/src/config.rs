//! Training configuration and its flat `key = value` file format.
//!
//! Every key is optional; an empty file yields the defaults below. Lines
//! starting with `#` (and anything after a `#`) are comments.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::{Conditioning, NetworkConfig};
use crate::prior::PriorInit;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of clusters.
    pub k: usize,
    /// Latent dimensionality.
    pub j: usize,
    pub d_steps: usize,
    pub e_steps: usize,
    /// Rate for discriminator, generator and encoder updates.
    pub lr: f64,
    /// Rate for the clustering/prior update of the mixture parameters.
    pub lr_prior: f64,
    pub lambda_p: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub ema_start_iter: u64,
    pub sigma_min: f64,
    pub seed: u64,
    pub conditioning: Conditioning,
    pub share_trunk: bool,
    pub trunk_depth: Option<usize>,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub init_std: f64,
    pub prior_init: PriorInit,
    pub eval_interval: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Dataset spec, see [`crate::data::DataSpec`].
    pub dataset: String,
    /// Generated samples per evaluation (latent MSE, MMD, coverage).
    pub eval_samples: usize,
    pub coverage_min_hits: usize,
    /// 0 picks three times the dataset's noise scale.
    pub coverage_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 5,
            j: 2,
            d_steps: 4,
            e_steps: 4,
            lr: 2e-4,
            lr_prior: 6e-4,
            lambda_p: 0.01,
            batch_size: 50,
            total_iters: 20_000,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.9999,
            ema_start_iter: 1000,
            sigma_min: 0.5,
            seed: 0,
            conditioning: Conditioning::ZOnly,
            share_trunk: true,
            trunk_depth: None,
            g_hidden: vec![64, 64],
            d_hidden: vec![64, 64],
            init_std: 0.02,
            prior_init: PriorInit::Gaussian,
            eval_interval: 500,
            checkpoint_interval: 0,
            dataset: "gmm2d:c=5,n_per=2000,separation=6,noise=1,seed=0".into(),
            eval_samples: 1000,
            coverage_min_hits: 10,
            coverage_radius: 0.0,
        }
    }
}

const KEYS: &[&str] = &[
    "K",
    "J",
    "d_steps",
    "e_steps",
    "lr",
    "lr_prior",
    "lambda_p",
    "batch_size",
    "total_iters",
    "beta1",
    "beta2",
    "adam_eps",
    "ema_decay",
    "ema_start_iter",
    "sigma_min",
    "seed",
    "conditioning",
    "share_trunk",
    "trunk_depth",
    "g_hidden",
    "d_hidden",
    "init_std",
    "prior_init",
    "eval_interval",
    "checkpoint_interval",
    "dataset",
    "eval_samples",
    "coverage_min_hits",
    "coverage_radius",
];

impl TrainConfig {
    pub fn network_config(&self, data_dim: usize) -> NetworkConfig {
        NetworkConfig {
            data_dim,
            latent_dim: self.j,
            clusters: self.k,
            g_hidden: self.g_hidden.clone(),
            d_hidden: self.d_hidden.clone(),
            share_trunk: self.share_trunk,
            trunk_depth: self.trunk_depth,
            conditioning: self.conditioning,
            init_std: self.init_std,
        }
    }

    /// Checks every invariant except strict positivity of the learning rates.
    pub fn validate_structure(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 || self.j == 0 {
            return fail(format!("K and J must be >= 1 (K={}, J={})", self.k, self.j));
        }
        if self.d_steps == 0 || self.e_steps == 0 {
            return fail("d_steps and e_steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        for (name, r) in [("lr", self.lr), ("lr_prior", self.lr_prior)] {
            if !(r >= 0.0) || !r.is_finite() {
                return fail(format!("{name} must be finite and non-negative, got {r}"));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.sigma_min > 0.0) {
            return fail(format!("sigma_min must be positive, got {}", self.sigma_min));
        }
        if self.g_hidden.is_empty() || self.d_hidden.is_empty() {
            return fail("g_hidden and d_hidden need at least one layer".into());
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be >= 1".into());
        }
        if let Some(t) = self.trunk_depth {
            if t > self.d_hidden.len() {
                return fail(format!(
                    "trunk_depth {t} exceeds {} d_hidden layers",
                    self.d_hidden.len()
                ));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if !(self.lr > 0.0) || !(self.lr_prior > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Renders every field in the file format; `parse(to_text())` is lossless.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "K = {}", self.k);
        let _ = writeln!(s, "J = {}", self.j);
        let _ = writeln!(s, "d_steps = {}", self.d_steps);
        let _ = writeln!(s, "e_steps = {}", self.e_steps);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_prior = {}", self.lr_prior);
        let _ = writeln!(s, "lambda_p = {}", self.lambda_p);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "total_iters = {}", self.total_iters);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "ema_decay = {}", self.ema_decay);
        let _ = writeln!(s, "ema_start_iter = {}", self.ema_start_iter);
        let _ = writeln!(s, "sigma_min = {}", self.sigma_min);
        let _ = writeln!(s, "seed = {}", self.seed);
        let conditioning = match self.conditioning {
            Conditioning::ZOnly => "z".to_string(),
            Conditioning::Embedding { dim } => format!("embedding:{dim}"),
        };
        let _ = writeln!(s, "conditioning = {conditioning}");
        let _ = writeln!(s, "share_trunk = {}", self.share_trunk);
        let trunk = self
            .trunk_depth
            .map_or_else(|| "auto".to_string(), |d| d.to_string());
        let _ = writeln!(s, "trunk_depth = {trunk}");
        let _ = writeln!(s, "g_hidden = {}", list(&self.g_hidden));
        let _ = writeln!(s, "d_hidden = {}", list(&self.d_hidden));
        let _ = writeln!(s, "init_std = {}", self.init_std);
        let prior_init = match self.prior_init {
            PriorInit::Gaussian => "gaussian",
            PriorInit::Orthogonal => "orthogonal",
        };
        let _ = writeln!(s, "prior_init = {prior_init}");
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "checkpoint_interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "eval_samples = {}", self.eval_samples);
        let _ = writeln!(s, "coverage_min_hits = {}", self.coverage_min_hits);
        let _ = writeln!(s, "coverage_radius = {}", self.coverage_radius);
        s
    }

    /// Parses and checks every invariant, including positive learning rates.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg = Self::parse_unchecked(text)?;
        cfg.validate().map_err(|e| Error::Config {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Parses keys and values without checking cross-field invariants.
    pub fn parse_unchecked(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { line, message };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("`{key}`: cannot parse `{v}` as a number"))
        }
        fn list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        match key {
            "K" => self.k = num(key, value)?,
            "J" => self.j = num(key, value)?,
            "d_steps" => self.d_steps = num(key, value)?,
            "e_steps" => self.e_steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_prior" => self.lr_prior = num(key, value)?,
            "lambda_p" => self.lambda_p = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_iters" => self.total_iters = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "ema_decay" => self.ema_decay = num(key, value)?,
            "ema_start_iter" => self.ema_start_iter = num(key, value)?,
            "sigma_min" => self.sigma_min = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "conditioning" => {
                self.conditioning = match value {
                    "z" => Conditioning::ZOnly,
                    v => match v.strip_prefix("embedding:") {
                        Some(d) => Conditioning::Embedding { dim: num(key, d)? },
                        None => {
                            return Err(format!(
                                "`conditioning`: expected `z` or `embedding:<dim>`, got `{v}`"
                            ))
                        }
                    },
                }
            }
            "share_trunk" => {
                self.share_trunk = value
                    .parse()
                    .map_err(|_| format!("`share_trunk`: expected true/false, got `{value}`"))?
            }
            "trunk_depth" => {
                self.trunk_depth = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "g_hidden" => self.g_hidden = list(key, value)?,
            "d_hidden" => self.d_hidden = list(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "prior_init" => {
                self.prior_init = match value {
                    "gaussian" => PriorInit::Gaussian,
                    "orthogonal" => PriorInit::Orthogonal,
                    v => return Err(format!("`prior_init`: unknown value `{v}`")),
                }
            }
            "eval_interval" => self.eval_interval = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "dataset" => self.dataset = value.to_string(),
            "eval_samples" => self.eval_samples = num(key, value)?,
            "coverage_min_hits" => self.coverage_min_hits = num(key, value)?,
            "coverage_radius" => self.coverage_radius = num(key, value)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.lambda_p, 0.01);
        assert_eq!(cfg.sigma_min, 0.5);
        assert_eq!(cfg.d_steps, 4);
        assert_eq!(cfg.e_steps, 4);
        assert_eq!(cfg.lr, 2e-4);
        assert_eq!(cfg.lr_prior, 6e-4);
        assert_eq!(cfg.beta1, 0.0);
        assert_eq!(cfg.beta2, 0.999);
        assert_eq!(cfg.ema_decay, 0.9999);
        assert_eq!(cfg.ema_start_iter, 1000);
        assert_eq!(cfg.batch_size, 50);
    }

    #[test]
    fn single_override() {
        let cfg = TrainConfig::parse("# clusters\nK = 7   # seven\n").unwrap();
        assert_eq!(
            cfg,
            TrainConfig {
                k: 7,
                ..TrainConfig::default()
            }
        );
    }

    #[test]
    fn unknown_key_names_line_and_key() {
        let err = TrainConfig::parse("unknown = 1").unwrap_err();
        match &err {
            Error::Config { line, message } => {
                assert_eq!(*line, 1);
                assert!(message.contains("unknown"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_type_errors_carry_line_numbers() {
        let err = TrainConfig::parse("K = 3\n\nK = 4").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }));
        let err = TrainConfig::parse("lr = fast").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
        let err = TrainConfig::parse("J").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn invariants_enforced() {
        assert!(TrainConfig::parse("d_steps = 0").is_err());
        assert!(TrainConfig::parse("ema_decay = 1").is_err());
        assert!(TrainConfig::parse("lr = 0").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            k: 8,
            lr: 1.0 / 3.0,
            conditioning: Conditioning::Embedding { dim: 3 },
            trunk_depth: Some(1),
            g_hidden: vec![16, 8, 4],
            prior_init: PriorInit::Orthogonal,
            dataset: "ring:modes=8,n=4000,noise=0.05,seed=2".into(),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
