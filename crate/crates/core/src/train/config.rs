use serde::{Deserialize, Serialize};

use crate::codebook::CommitmentMode;
use crate::encoders::EncoderConfig;
use crate::objectives::{LossWeights, TERM_NAMES};

use super::TrainError;

pub const CONFIG_SCHEMA_VERSION: &str = "1";

/// Which of the six loss terms take part. Quantisation is on exactly when
/// `commit` is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermFlags {
    pub nce: bool,
    pub commit: bool,
    pub rec: bool,
    pub occ: bool,
    pub orth: bool,
    pub kl: bool,
}

impl TermFlags {
    pub const ALL: Self = Self { nce: true, commit: true, rec: true, occ: true, orth: true, kl: true };
    pub const NONE: Self = Self { nce: false, commit: false, rec: false, occ: false, orth: false, kl: false };

    pub fn as_array(&self) -> [bool; 6] {
        [self.nce, self.commit, self.rec, self.occ, self.orth, self.kl]
    }

    pub fn enabled_names(&self) -> Vec<&'static str> {
        TERM_NAMES.iter().zip(self.as_array()).filter(|(_, on)| *on).map(|(n, _)| *n).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: String,
    pub seed: u64,
    pub epochs: usize,
    pub lr_max: f64,
    /// Scenes per optimiser step.
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub n_queries: usize,
    pub occupancy_delta: f64,
    pub occupancy_k: usize,
    pub occupancy_hidden: usize,
    pub tau: f64,
    /// Cap on sampled point-pixel pairs per scene.
    pub m_max: usize,
    pub codebook_size: usize,
    pub gamma: f64,
    pub codebook_init_noise: f64,
    pub revive_every: u64,
    pub revive_threshold: u64,
    pub commitment: CommitmentMode,
    /// Fill masked pixels from corresponded 3D features before decoding.
    pub substitution: bool,
    pub terms: TermFlags,
    pub weights: LossWeights,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION.into(),
            seed: 0,
            epochs: 50,
            lr_max: 1e-3,
            batch_size: 4,
            mask_ratio: 0.5,
            n_queries: 200,
            occupancy_delta: 0.2,
            occupancy_k: 4,
            occupancy_hidden: 32,
            tau: 0.07,
            m_max: 256,
            codebook_size: 64,
            gamma: 0.99,
            codebook_init_noise: 1e-2,
            revive_every: 50,
            revive_threshold: 200,
            commitment: CommitmentMode::Anchored3d,
            substitution: true,
            terms: TermFlags::ALL,
            weights: LossWeights::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(TrainError::Version { found: self.schema_version.clone(), expected: CONFIG_SCHEMA_VERSION });
        }
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_queries", self.n_queries),
            ("occupancy_k", self.occupancy_k),
            ("occupancy_hidden", self.occupancy_hidden),
            ("m_max", self.m_max),
            ("codebook_size", self.codebook_size),
            ("encoder.knn", self.encoder.knn),
            ("encoder.patch_size", self.encoder.patch_size),
            ("encoder.channels", self.encoder.channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.encoder.point_widths.is_empty() || self.encoder.point_widths.contains(&0) {
            return bad("encoder.point_widths must be non-empty and positive".into());
        }
        if self.revive_every == 0 || self.revive_threshold == 0 {
            return bad("revive_every and revive_threshold must be positive".into());
        }
        for (name, v) in [("lr_max", self.lr_max), ("tau", self.tau), ("occupancy_delta", self.occupancy_delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.codebook_init_noise >= 0.0 && self.codebook_init_noise.is_finite()) {
            return bad("codebook_init_noise must be non-negative".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} must lie in (0, 1)", self.gamma));
        }
        for (name, w) in TERM_NAMES.iter().zip(self.weights.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("weight for {name} must be non-negative, got {w}"));
            }
        }
        Ok(())
    }

    /// Parses and validates a JSON config; absent fields take their defaults.
    pub fn from_json(bytes: &[u8]) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Masking is only needed when something reconstructs the masked content.
    pub fn masks_images(&self) -> bool {
        self.terms.rec
    }

    pub fn quantizes(&self) -> bool {
        self.terms.commit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_vec(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&json).unwrap(), cfg);
        assert_eq!(TrainConfig::from_json(b"{}").unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for patch in [r#"{"mask_ratio": 1.0}"#, r#"{"epochs": 0}"#, r#"{"tau": -1}"#, r#"{"gamma": 1.0}"#, r#"{"schema_version": "2"}"#] {
            assert!(TrainConfig::from_json(patch.as_bytes()).is_err(), "{patch}");
        }
        assert!(TrainConfig::from_json(br#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn six_flags() {
        assert_eq!(TermFlags::ALL.enabled_names(), TERM_NAMES.to_vec());
        assert!(TermFlags::NONE.enabled_names().is_empty());
    }
}
