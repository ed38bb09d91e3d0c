//! One flat experiment config shared by every subcommand. Values resolve in
//! three layers: built-in defaults, then a `key = value` config file, then
//! command-line flags. Unknown keys are errors, never silently ignored.

use std::path::{Path, PathBuf};

use serde::Serialize;
use veilface_core::attack::AttackConfig;
use veilface_core::data::toyfaces::{JitterParams, ToyfacesSpec};
use veilface_core::loss::{LossFlags, LossWeights};
use veilface_core::nets::ArchConfig;
use veilface_core::train::TrainConfig;
use veilface_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    // corpus
    pub n_identities: usize,
    pub n_expressions: usize,
    pub samples_per_cell: usize,
    pub image_size: usize,
    pub jitter_position: f64,
    pub jitter_scale: f64,
    pub jitter_color: f64,
    pub train_fraction: f64,
    // architecture
    pub base_channels: usize,
    pub latent_dim: usize,
    pub leaky_slope: f64,
    pub scale_factor: usize,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub g_steps_per_d_step: usize,
    pub checkpoint_interval: usize,
    pub left_out: Option<(usize, usize)>,
    pub lambda_d1: f64,
    pub lambda_d2: f64,
    pub lambda_d3: f64,
    pub lambda_g1: f64,
    pub lambda_g2: f64,
    pub lambda_g3: f64,
    pub lambda_g4: f64,
    pub non_saturating: bool,
    pub disc_labels_on_fake: bool,
    // attack evaluation
    pub attack_epochs: usize,
    pub attack_batch_size: usize,
    pub attack_learning_rate: f64,
    pub attack_rmsprop_decay: f64,
    // global
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let faces = ToyfacesSpec::default();
        let arch = ArchConfig::desk();
        let train = TrainConfig::default();
        let weights = LossWeights::default();
        let attack = AttackConfig::default();
        ExperimentConfig {
            n_identities: faces.n_identities,
            n_expressions: faces.n_expressions,
            samples_per_cell: faces.samples_per_cell,
            image_size: faces.image_size,
            jitter_position: faces.jitter.position,
            jitter_scale: faces.jitter.scale,
            jitter_color: faces.jitter.color,
            train_fraction: 0.85,
            base_channels: arch.base_channels,
            latent_dim: arch.latent_dim,
            leaky_slope: arch.leaky_slope,
            scale_factor: arch.scale_factor,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            rmsprop_decay: train.rmsprop_decay,
            g_steps_per_d_step: train.g_steps_per_d_step,
            checkpoint_interval: train.checkpoint_interval,
            left_out: None,
            lambda_d1: weights.d1,
            lambda_d2: weights.d2,
            lambda_d3: weights.d3,
            lambda_g1: weights.g1,
            lambda_g2: weights.g2,
            lambda_g3: weights.g3,
            lambda_g4: weights.g4,
            non_saturating: false,
            disc_labels_on_fake: false,
            attack_epochs: attack.epochs,
            attack_batch_size: attack.batch_size,
            attack_learning_rate: attack.learning_rate,
            attack_rmsprop_decay: attack.rmsprop_decay,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// "none" clears the cell, "i,e" selects one.
pub fn parse_left_out(s: &str) -> Result<Option<(usize, usize)>> {
    if s == "none" {
        return Ok(None);
    }
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || Error::Config(format!("left_out wants \"identity,expression\" or \"none\", got {s:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let i = parts[0].trim().parse().map_err(|_| bad())?;
    let e = parts[1].trim().parse().map_err(|_| bad())?;
    Ok(Some((i, e)))
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Config(format!("bad value {value:?} for key {key:?}"))
            })
        }
        let v = value.trim();
        match key {
            "n_identities" => self.n_identities = num(key, v)?,
            "n_expressions" => self.n_expressions = num(key, v)?,
            "samples_per_cell" => self.samples_per_cell = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "jitter_position" => self.jitter_position = num(key, v)?,
            "jitter_scale" => self.jitter_scale = num(key, v)?,
            "jitter_color" => self.jitter_color = num(key, v)?,
            "train_fraction" => self.train_fraction = num(key, v)?,
            "base_channels" => self.base_channels = num(key, v)?,
            "latent_dim" => self.latent_dim = num(key, v)?,
            "leaky_slope" => self.leaky_slope = num(key, v)?,
            "scale_factor" => self.scale_factor = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "rmsprop_decay" => self.rmsprop_decay = num(key, v)?,
            "g_steps_per_d_step" => self.g_steps_per_d_step = num(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, v)?,
            "left_out" => self.left_out = parse_left_out(v)?,
            "lambda_d1" => self.lambda_d1 = num(key, v)?,
            "lambda_d2" => self.lambda_d2 = num(key, v)?,
            "lambda_d3" => self.lambda_d3 = num(key, v)?,
            "lambda_g1" => self.lambda_g1 = num(key, v)?,
            "lambda_g2" => self.lambda_g2 = num(key, v)?,
            "lambda_g3" => self.lambda_g3 = num(key, v)?,
            "lambda_g4" => self.lambda_g4 = num(key, v)?,
            "non_saturating" => self.non_saturating = num(key, v)?,
            "disc_labels_on_fake" => self.disc_labels_on_fake = num(key, v)?,
            "attack_epochs" => self.attack_epochs = num(key, v)?,
            "attack_batch_size" => self.attack_batch_size = num(key, v)?,
            "attack_learning_rate" => self.attack_learning_rate = num(key, v)?,
            "attack_rmsprop_decay" => self.attack_rmsprop_decay = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{path:?}:{}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{path:?}:{}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn toyfaces_spec(&self) -> ToyfacesSpec {
        ToyfacesSpec {
            n_identities: self.n_identities,
            n_expressions: self.n_expressions,
            samples_per_cell: self.samples_per_cell,
            image_size: self.image_size,
            jitter: JitterParams {
                position: self.jitter_position,
                scale: self.jitter_scale,
                color: self.jitter_color,
            },
            seed: self.seed,
        }
    }

    /// Architecture with corpus-shape fields taken from this config; callers
    /// holding a manifest override those from it.
    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            latent_dim: self.latent_dim,
            n_identities: self.n_identities,
            n_expressions: self.n_expressions,
            leaky_slope: self.leaky_slope,
            scale_factor: self.scale_factor,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            rmsprop_decay: self.rmsprop_decay,
            g_steps_per_d_step: self.g_steps_per_d_step,
            weights: LossWeights {
                d1: self.lambda_d1,
                d2: self.lambda_d2,
                d3: self.lambda_d3,
                g1: self.lambda_g1,
                g2: self.lambda_g2,
                g3: self.lambda_g3,
                g4: self.lambda_g4,
            },
            flags: LossFlags {
                non_saturating: self.non_saturating,
                disc_labels_on_fake: self.disc_labels_on_fake,
            },
            seed: self.seed,
            left_out: self.left_out,
            checkpoint_interval: self.checkpoint_interval,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            epochs: self.attack_epochs,
            batch_size: self.attack_batch_size,
            learning_rate: self.attack_learning_rate,
            rmsprop_decay: self.attack_rmsprop_decay,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_set() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("epochs", " 3 ").unwrap();
        cfg.set("left_out", "2,5").unwrap();
        cfg.set("non_saturating", "true").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.left_out, Some((2, 5)));
        assert!(cfg.non_saturating);
        cfg.set("left_out", "none").unwrap();
        assert_eq!(cfg.left_out, None);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.set("epoch", "3"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("epochs", "x"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("left_out", "2"), Err(Error::Config(_))));
    }

    #[test]
    fn config_file_layers_under_flags() {
        let dir = std::env::temp_dir().join(format!("veilface-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("exp.cfg");
        std::fs::write(&path, "# comment\nepochs = 5\nseed = 9 # inline\n\nlatent_dim=16\n").unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!((cfg.epochs, cfg.seed, cfg.latent_dim), (5, 9, 16));
        std::fs::write(&path, "mystery = 1\n").unwrap();
        assert!(cfg.apply_file(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn builders_mirror_the_flat_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("lambda_g4", "0.5").unwrap();
        cfg.set("attack_epochs", "2").unwrap();
        assert_eq!(cfg.train_config().weights.g4, 0.5);
        assert_eq!(cfg.attack_config().epochs, 2);
        assert_eq!(cfg.toyfaces_spec().n_identities, cfg.arch().n_identities);
    }
}
