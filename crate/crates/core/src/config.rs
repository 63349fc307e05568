//! Training configuration: a flat `key = value` file (TOML syntax, no
//! tables). Unknown keys are rejected; absent keys take documented defaults,
//! some of which depend on the selected profile.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameter profile. `desk` uses learning rates and schedules sized for
/// small images and a few hundred iterations; `paper` keeps the full-scale
/// published settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

/// Gating architecture. Only the convolutional gate is implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    #[default]
    Conv,
}

/// Config file contents before defaults are applied.
#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub profile: Option<Profile>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub eta: Option<f64>,
    pub max_its: Option<usize>,
    pub pretrain_its: Option<usize>,
    pub lr_f: Option<f64>,
    pub lr_d: Option<f64>,
    pub lr_s: Option<f64>,
    pub wd_f: Option<f64>,
    pub wd_d: Option<f64>,
    pub wd_s: Option<f64>,
    pub momentum_s: Option<f64>,
    pub seed: Option<u64>,
    pub num_classes: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub integration_steps: Option<usize>,
    pub usm: Option<bool>,
    pub enc_widths: Option<Vec<usize>>,
    pub branch_width: Option<usize>,
    pub gate_width: Option<usize>,
    pub gate: Option<GateKind>,
    pub deform_width: Option<usize>,
    pub disc_width: Option<usize>,
    pub max_velocity: Option<f64>,
    pub aug_flip: Option<f64>,
    pub aug_jitter: Option<f64>,
    pub jitter_strength: Option<f64>,
    pub aug_blur: Option<f64>,
    pub blur_sigma_max: Option<f64>,
    pub aug_erase: Option<f64>,
    pub aug_lab: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub skip_nonfinite: Option<bool>,
    pub lr_power: Option<f64>,
    pub distortion_strength: Option<f64>,
    pub images_per_domain: Option<usize>,
}

/// Fully resolved configuration.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    /// Adversarial weight in the morphing loss.
    pub alpha: f64,
    /// Weight of the target-branch loss.
    pub beta: f64,
    /// EMA rate of the teacher.
    pub gamma: f64,
    /// Pseudo-label confidence threshold.
    pub eta: f64,
    pub max_its: usize,
    pub pretrain_its: usize,
    pub lr_f: f64,
    pub lr_d: f64,
    pub lr_s: f64,
    pub wd_f: f64,
    pub wd_d: f64,
    pub wd_s: f64,
    pub momentum_s: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub integration_steps: usize,
    /// Deformation branch on/off (off = ablation without morphing).
    pub usm: bool,
    pub enc_widths: Vec<usize>,
    pub branch_width: usize,
    pub gate_width: usize,
    pub gate: GateKind,
    pub deform_width: usize,
    pub disc_width: usize,
    /// Per-component velocity bound of the deformation network, in pixels.
    pub max_velocity: f64,
    pub aug_flip: f64,
    pub aug_jitter: f64,
    pub jitter_strength: f64,
    pub aug_blur: f64,
    pub blur_sigma_max: f64,
    pub aug_erase: f64,
    pub aug_lab: f64,
    /// 0 means every `max_its / 10` iterations.
    pub checkpoint_every: usize,
    pub skip_nonfinite: bool,
    /// Exponent of the polynomial decay of the segmentation learning rate
    /// during adaptation; 0 keeps it constant.
    pub lr_power: f64,
    pub distortion_strength: f64,
    pub images_per_domain: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        validate_config(RawConfig::default()).expect("defaults are valid")
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        validate_config(RawConfig {
            profile: Some(Profile::Paper),
            ..RawConfig::default()
        })
        .expect("paper defaults are valid")
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        validate_config(parse_config(&text)?)
    }

    /// Flat `key = value` rendering, parseable by [`parse_config`].
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn checkpoint_interval(&self) -> usize {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.max_its / 10).max(1)
        }
    }

    /// Re-checks every invariant of an already-resolved config.
    pub fn validate(&self) -> Result<()> {
        let raw: RawConfig = parse_config(&self.to_text())?;
        let again = validate_config(raw)?;
        debug_assert_eq!(&again, self);
        Ok(())
    }
}

pub fn parse_config(text: &str) -> Result<RawConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}

fn check(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

fn probability(name: &str, v: f64) -> Result<()> {
    check((0.0..=1.0).contains(&v), format!("{name}={v} must lie in [0,1]"))
}

/// Fills defaults for absent keys and checks every range constraint.
pub fn validate_config(raw: RawConfig) -> Result<TrainConfig> {
    let profile = raw.profile.unwrap_or_default();
    let (max_its, pretrain_its, lr_f, lr_d, lr_s) = match profile {
        Profile::Desk => (500, 300, 1e-3, 1e-4, 1e-2),
        Profile::Paper => (40_000, 40_000, 2.5e-6, 2.5e-6, 5e-6),
    };
    let cfg = TrainConfig {
        profile,
        alpha: raw.alpha.unwrap_or(20.0),
        beta: raw.beta.unwrap_or(0.5),
        gamma: raw.gamma.unwrap_or(0.999),
        eta: raw.eta.unwrap_or(0.95),
        max_its: raw.max_its.unwrap_or(max_its),
        pretrain_its: raw.pretrain_its.unwrap_or(pretrain_its),
        lr_f: raw.lr_f.unwrap_or(lr_f),
        lr_d: raw.lr_d.unwrap_or(lr_d),
        lr_s: raw.lr_s.unwrap_or(lr_s),
        wd_f: raw.wd_f.unwrap_or(5e-5),
        wd_d: raw.wd_d.unwrap_or(5e-5),
        wd_s: raw.wd_s.unwrap_or(5e-4),
        momentum_s: raw.momentum_s.unwrap_or(0.9),
        seed: raw.seed.unwrap_or(0),
        num_classes: raw.num_classes.unwrap_or(5),
        height: raw.height.unwrap_or(64),
        width: raw.width.unwrap_or(128),
        integration_steps: raw.integration_steps.unwrap_or(7),
        usm: raw.usm.unwrap_or(true),
        enc_widths: raw.enc_widths.unwrap_or_else(|| vec![16, 32, 48, 48]),
        branch_width: raw.branch_width.unwrap_or(32),
        gate_width: raw.gate_width.unwrap_or(32),
        gate: raw.gate.unwrap_or_default(),
        deform_width: raw.deform_width.unwrap_or(8),
        disc_width: raw.disc_width.unwrap_or(8),
        max_velocity: raw.max_velocity.unwrap_or(6.0),
        aug_flip: raw.aug_flip.unwrap_or(0.5),
        aug_jitter: raw.aug_jitter.unwrap_or(0.5),
        jitter_strength: raw.jitter_strength.unwrap_or(0.2),
        aug_blur: raw.aug_blur.unwrap_or(0.3),
        blur_sigma_max: raw.blur_sigma_max.unwrap_or(1.0),
        aug_erase: raw.aug_erase.unwrap_or(0.3),
        aug_lab: raw.aug_lab.unwrap_or(0.5),
        checkpoint_every: raw.checkpoint_every.unwrap_or(0),
        skip_nonfinite: raw.skip_nonfinite.unwrap_or(true),
        lr_power: raw.lr_power.unwrap_or(0.9),
        distortion_strength: raw.distortion_strength.unwrap_or(0.25),
        images_per_domain: raw.images_per_domain.unwrap_or(50),
    };

    check(cfg.alpha > 0.0, format!("alpha={} must be > 0", cfg.alpha))?;
    check(cfg.beta > 0.0, format!("beta={} must be > 0", cfg.beta))?;
    check((0.0..=1.0).contains(&cfg.gamma), format!("gamma={} must lie in [0,1]", cfg.gamma))?;
    check(cfg.eta > 0.0 && cfg.eta < 1.0, format!("eta={} must lie in (0,1)", cfg.eta))?;
    check(cfg.max_its >= 1, "max_its must be >= 1")?;
    check(cfg.max_velocity > 0.0, format!("max_velocity={} must be > 0", cfg.max_velocity))?;
    check(cfg.lr_power >= 0.0, format!("lr_power={} must be >= 0", cfg.lr_power))?;
    for (name, v) in [
        ("lr_f", cfg.lr_f),
        ("lr_d", cfg.lr_d),
        ("lr_s", cfg.lr_s),
        ("wd_f", cfg.wd_f),
        ("wd_d", cfg.wd_d),
        ("wd_s", cfg.wd_s),
    ] {
        check(v.is_finite() && v >= 0.0, format!("{name}={v} must be finite and >= 0"))?;
    }
    probability("momentum_s", cfg.momentum_s)?;
    check(
        (2..=254).contains(&cfg.num_classes),
        format!("num_classes={} must lie in 2..=254", cfg.num_classes),
    )?;
    check(
        cfg.height >= 16 && cfg.width >= 16 && cfg.height % 8 == 0 && cfg.width % 8 == 0,
        format!("image size {}x{} must be multiples of 8, at least 16", cfg.height, cfg.width),
    )?;
    check(cfg.integration_steps >= 1, "integration_steps must be >= 1")?;
    check(
        cfg.enc_widths.len() == 4 && cfg.enc_widths.iter().all(|&w| w > 0),
        "enc_widths must list 4 positive widths",
    )?;
    for (name, v) in [
        ("branch_width", cfg.branch_width),
        ("gate_width", cfg.gate_width),
        ("deform_width", cfg.deform_width),
        ("disc_width", cfg.disc_width),
        ("images_per_domain", cfg.images_per_domain),
    ] {
        check(v > 0, format!("{name} must be > 0"))?;
    }
    for (name, v) in [
        ("aug_flip", cfg.aug_flip),
        ("aug_jitter", cfg.aug_jitter),
        ("aug_blur", cfg.aug_blur),
        ("aug_erase", cfg.aug_erase),
        ("aug_lab", cfg.aug_lab),
    ] {
        probability(name, v)?;
    }
    check(
        cfg.jitter_strength >= 0.0 && cfg.blur_sigma_max >= 0.0,
        "augmentation magnitudes must be >= 0",
    )?;
    check(
        (0.0..crate::synthdata::MAX_DISTORTION).contains(&cfg.distortion_strength),
        format!(
            "distortion_strength={} must lie in [0, {:.4})",
            cfg.distortion_strength,
            crate::synthdata::MAX_DISTORTION
        ),
    )?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gets_defaults() {
        let cfg = validate_config(parse_config("").unwrap()).unwrap();
        assert_eq!(cfg.alpha, 20.0);
        assert_eq!(cfg.gamma, 0.999);
        assert_eq!(cfg.eta, 0.95);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.profile, Profile::Desk);
    }

    #[test]
    fn eta_out_of_range_is_rejected() {
        let raw = parse_config("eta = 1.5").unwrap();
        assert!(validate_config(raw).is_err());
        let raw = parse_config("eta = 0.0").unwrap();
        assert!(validate_config(raw).is_err());
    }

    #[test]
    fn gamma_boundaries() {
        assert!(validate_config(parse_config("gamma = 0").unwrap()).is_ok());
        assert!(validate_config(parse_config("gamma = 1.0").unwrap()).is_ok());
        assert!(validate_config(parse_config("gamma = -0.1").unwrap()).is_err());
        assert!(validate_config(parse_config("gamma = 1.01").unwrap()).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("alpha = 3.0\nlearning_rate = 1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn paper_profile_learning_rates() {
        let cfg = TrainConfig::paper();
        assert_eq!((cfg.lr_f, cfg.lr_d, cfg.lr_s), (2.5e-6, 2.5e-6, 5e-6));
        assert_eq!((cfg.wd_f, cfg.wd_d, cfg.wd_s), (5e-5, 5e-5, 5e-4));
        assert_eq!(cfg.max_its, 40_000);
    }

    #[test]
    fn text_round_trip() {
        let cfg = validate_config(parse_config("seed = 9\nusm = false\nenc_widths = [4, 4, 8, 8]").unwrap()).unwrap();
        let again = validate_config(parse_config(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert!(cfg.validate().is_ok());
    }
}
