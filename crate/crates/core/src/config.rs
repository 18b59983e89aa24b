//! Hyperparameters and the flat key-value config format.

use serde::{Deserialize, Serialize};
use toml::Table;

use crate::error::{Error, Result};

/// All hyperparameters of one active-learning experiment.
///
/// `Default` is the full-scale CIFAR-10 setting; [`ALConfig::desk`] is the reduced
/// preset used by tests and the synthetic examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub beta: f64,
    /// Weight of the rotation loss when training the target learner.
    pub xi: f64,
    /// Keep the KL terms inside the proxy supervised/self-supervised losses.
    pub proxy_kl: bool,
    pub lr_vae: f64,
    pub lr_disc: f64,
    pub lr_target: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs_vae: usize,
    pub epochs_target: usize,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub initial_pool: usize,
    pub budget: usize,
    pub rounds: usize,
    pub seed: u64,
    pub enc_width: usize,
    pub proxy_hidden: usize,
    pub disc_hidden: usize,
    pub target_width: usize,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.5,
            lambda4: 1.0,
            beta: 1.0,
            xi: 1.0,
            proxy_kl: true,
            lr_vae: 5e-4,
            lr_disc: 5e-4,
            lr_target: 1e-2,
            momentum: 0.9,
            weight_decay: 0.005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 0.0,
            epochs_vae: 100,
            epochs_target: 100,
            batch_size: 128,
            latent_dim: 32,
            initial_pool: 1000,
            budget: 1000,
            rounds: 5,
            seed: 0,
            enc_width: 8,
            proxy_hidden: 64,
            disc_hidden: 64,
            target_width: 8,
        }
    }
}

impl ALConfig {
    /// Every key accepted in a config file for this struct.
    pub const KEYS: &'static [&'static str] = &[
        "lambda1",
        "lambda2",
        "lambda3",
        "lambda4",
        "beta",
        "xi",
        "proxy_kl",
        "lr_vae",
        "lr_disc",
        "lr_target",
        "momentum",
        "weight_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "grad_clip",
        "epochs_vae",
        "epochs_target",
        "batch_size",
        "latent_dim",
        "initial_pool",
        "budget",
        "rounds",
        "seed",
        "enc_width",
        "proxy_hidden",
        "disc_hidden",
        "target_width",
    ];

    /// Reduced-epoch, small-pool preset for desk-scale runs.
    pub fn desk() -> Self {
        ALConfig {
            epochs_vae: 20,
            epochs_target: 20,
            initial_pool: 100,
            budget: 100,
            rounds: 3,
            ..ALConfig::default()
        }
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("beta", self.beta),
            ("xi", self.xi),
            ("lr_vae", self.lr_vae),
            ("lr_disc", self.lr_disc),
            ("lr_target", self.lr_target),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        let positive = [
            ("epochs_vae", self.epochs_vae),
            ("epochs_target", self.epochs_target),
            ("batch_size", self.batch_size),
            ("latent_dim", self.latent_dim),
            ("initial_pool", self.initial_pool),
            ("budget", self.budget),
            ("enc_width", self.enc_width),
            ("proxy_hidden", self.proxy_hidden),
            ("disc_hidden", self.disc_hidden),
            ("target_width", self.target_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Reads the keys of this struct out of a flat table, ignoring foreign keys.
    pub fn from_table(table: &Table) -> Result<Self> {
        let own: Table = table
            .iter()
            .filter(|(k, _)| Self::KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let cfg: ALConfig = own
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Table {
        Table::try_from(self).expect("ALConfig always serializes")
    }
}

/// Parses a flat key-value document, rejecting nested tables and any key not in
/// `allowed`.
pub fn parse_flat(text: &str, allowed: &[&[&str]]) -> Result<Table> {
    let table: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for (key, value) in &table {
        if value.is_table() {
            return Err(Error::Config(format!("nested table `{key}` is not allowed")));
        }
        if !allowed.iter().any(|keys| keys.contains(&key.as_str())) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
    }
    Ok(table)
}
