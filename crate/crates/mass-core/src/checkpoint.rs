//! Model checkpoint files: a versioned, self-describing JSON container for
//! one context's generator/discriminator parameters and target statistics.
//! Numbers render as shortest round-trip decimals, so files round-trip
//! bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextLabel;
use crate::gan::{GanConfig, GanModel, TargetStats};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint fails model validation: {0}")]
    Invalid(#[from] crate::gan::GanError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub context: ContextLabel,
    pub config: GanConfig,
    pub target_stats: TargetStats,
    pub gen_params: Vec<f64>,
    pub disc_params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(context: ContextLabel, model: &GanModel, stats: TargetStats) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            context,
            config: model.config.clone(),
            target_stats: stats,
            gen_params: model.gen_params.clone(),
            disc_params: model.disc_params.clone(),
        }
    }

    pub fn model(&self) -> GanModel {
        GanModel {
            config: self.config.clone(),
            gen_params: self.gen_params.clone(),
            disc_params: self.disc_params.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        ckpt.model().validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Conventional file name inside a checkpoint directory.
    pub fn file_name(context: ContextLabel) -> String {
        format!("{}.ckpt", context.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_model(seed: u64) -> GanModel {
        GanModel::init(
            GanConfig {
                hidden_size: 4,
                num_layers: 1,
                seq_len: 4,
                batch_users: 2,
            },
            seed,
        )
    }

    fn sample_stats() -> TargetStats {
        TargetStats {
            c_target: 0.5,
            mu_target: 0.3,
            sigma_target: 0.2,
            skew_target: 1.1,
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let ckpt = Checkpoint::new(ContextLabel::Global, &sample_model(1), sample_stats());
        let mut bad = ckpt.to_json();
        bad = bad.replace("\"version\":1", "\"version\":9");
        assert!(matches!(
            Checkpoint::from_json(&bad),
            Err(CheckpointError::Version(9))
        ));
    }

    #[test]
    fn truncated_parameters_are_rejected() {
        let mut ckpt = Checkpoint::new(ContextLabel::Global, &sample_model(2), sample_stats());
        ckpt.gen_params.pop();
        assert!(Checkpoint::from_json(&ckpt.to_json()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::new(ContextLabel::StreamHigh, &sample_model(3), sample_stats());
        let path = dir.path().join(Checkpoint::file_name(ContextLabel::StreamHigh));
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    proptest! {
        // Shortest round-trip decimals must reproduce every parameter bit.
        #[test]
        fn json_round_trip_is_bitwise(seed in 0u64..200) {
            let model = sample_model(seed);
            let ckpt = Checkpoint::new(ContextLabel::Interact, &model, sample_stats());
            let back = Checkpoint::from_json(&ckpt.to_json()).unwrap();
            prop_assert_eq!(
                ckpt.gen_params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                back.gen_params.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(
                ckpt.disc_params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                back.disc_params.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
