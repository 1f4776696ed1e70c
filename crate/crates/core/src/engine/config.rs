use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EngineError;
use crate::fusion::TaskKind;
use crate::lorentz::Curvature;
use crate::numerics::OptimizerKind;

/// Which prototype set conditions unseen-sample synthesis during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthSource {
    /// Test-time unseen categories.
    #[default]
    Test,
    /// Every category outside the seen set: validation and test-time unseen.
    All,
    /// Validation categories only.
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Latent width.
    pub h: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the unseen cross-entropy.
    pub eta: f64,
    /// Weight of the distribution-alignment loss.
    pub zeta: f64,
    /// Explicit calibration grid; derived from validation scores when absent.
    pub gamma_grid: Option<Vec<f64>>,
    pub gamma_points: usize,
    /// Synthetic samples per unseen category per step.
    pub k: usize,
    /// Multiplier on the information-bottleneck regulariser.
    pub ib_beta: f64,
    pub curvature: Curvature,
    pub seed: u64,
    pub task: TaskKind,
    pub optimizer: OptimizerKind,
    pub exclude_true_in_rank: bool,
    pub synthesize: bool,
    pub synth_source: SynthSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            h: 768,
            lr: 1e-3,
            epochs: 50,
            batch_size: 32,
            eta: 1.0,
            zeta: 1.0,
            gamma_grid: None,
            gamma_points: 21,
            k: 1,
            ib_beta: 1.0,
            curvature: Curvature::default(),
            seed: 0,
            task: TaskKind::Met,
            optimizer: OptimizerKind::Adam,
            exclude_true_in_rank: false,
            synthesize: true,
            synth_source: SynthSource::Test,
        }
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> EngineError {
    EngineError::Config {
        field,
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.h == 0 {
            return Err(bad("h", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        for (field, v) in [("eta", self.eta), ("zeta", self.zeta), ("ib_beta", self.ib_beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(field, format!("must be non-negative, got {v}")));
            }
        }
        if let Some(grid) = &self.gamma_grid {
            if grid.is_empty() {
                return Err(bad("gamma_grid", "must not be empty"));
            }
            if let Some(g) = grid.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
                return Err(bad("gamma_grid", format!("values must be non-negative, got {g}")));
            }
        }
        if self.gamma_points == 0 {
            return Err(bad("gamma_points", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(bad("k", "must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_named() {
        let cases: Vec<(TrainConfig, &str)> = vec![
            (TrainConfig { eta: -1.0, ..TrainConfig::default() }, "eta"),
            (TrainConfig { zeta: f64::NAN, ..TrainConfig::default() }, "zeta"),
            (TrainConfig { epochs: 0, ..TrainConfig::default() }, "epochs"),
            (TrainConfig { batch_size: 0, ..TrainConfig::default() }, "batch_size"),
            (TrainConfig { gamma_grid: Some(vec![]), ..TrainConfig::default() }, "gamma_grid"),
        ];
        for (cfg, field) in cases {
            match cfg.validate() {
                Err(EngineError::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn json_round_trip_and_hash() {
        let cfg = TrainConfig {
            h: 32,
            curvature: Curvature::new(-0.5).unwrap(),
            ..TrainConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(TrainConfig::default().hash(), cfg.hash());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"curvature": 1.0}"#).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"h": 16, "task": "MRE"}"#).unwrap();
        assert_eq!((partial.h, partial.task), (16, TaskKind::Mre));
    }
}
