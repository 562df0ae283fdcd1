//! Model shape configuration, embedded in checkpoints and validated on load.

use serde::{Deserialize, Serialize};

use crate::error::{KpbeError, Result};
use crate::geometry::NUM_KEYPOINTS;
use crate::grid::VoxelGrid;

/// How the local motion around each keypoint pair is modelled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// `J = R_s·R_dᵀ` for every keypoint.
    Rotation,
    /// `J = I` (translation-only flows), for ablations.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub keypoints: usize,
    /// Appearance feature channels `C`.
    pub channels: usize,
    /// Feature volume depth `D`.
    pub depth: usize,
    /// Input/output image side.
    pub resolution: usize,
    /// Gaussian width `σ²` of the keypoint heatmaps fed to the mask estimator.
    pub sigma2: f64,
    /// Softmax temperature of the keypoint heatmaps.
    pub heatmap_temperature: f64,
    pub jacobian: JacobianMode,
    pub expression_bound: f64,
    pub yaw_bound: f64,
    pub pitch_bound: f64,
    pub roll_bound: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            keypoints: NUM_KEYPOINTS,
            channels: 32,
            depth: 16,
            resolution: 64,
            sigma2: 0.01,
            heatmap_temperature: 0.1,
            jacobian: JacobianMode::Rotation,
            expression_bound: 1.0,
            yaw_bound: std::f64::consts::FRAC_PI_2,
            pitch_bound: std::f64::consts::FRAC_PI_2,
            roll_bound: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl ModelConfig {
    /// Side of the feature volume (stride 4 relative to the image).
    pub fn feature_res(&self) -> usize {
        self.resolution / 4
    }

    pub fn grid(&self) -> VoxelGrid {
        VoxelGrid::new(self.depth, self.feature_res(), self.feature_res())
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints != NUM_KEYPOINTS {
            return Err(KpbeError::Config(format!(
                "model.k must be {NUM_KEYPOINTS}, got {}",
                self.keypoints
            )));
        }
        if self.resolution == 0 || self.resolution % 16 != 0 {
            // The pose estimator downsamples four times by 2.
            return Err(KpbeError::Config(format!(
                "model.resolution must be a positive multiple of 16, got {}",
                self.resolution
            )));
        }
        if self.channels == 0 || self.depth == 0 {
            return Err(KpbeError::Config("model.channels and model.depth must be positive".into()));
        }
        if !(self.sigma2 > 0.0 && self.heatmap_temperature > 0.0 && self.expression_bound > 0.0) {
            return Err(KpbeError::Config(
                "sigma2, heatmap temperature and expression bound must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Error describing the first shape field that differs from `other`.
    pub fn check_compatible(&self, other: &ModelConfig) -> Result<()> {
        let fields = [
            ("k", self.keypoints, other.keypoints),
            ("channels", self.channels, other.channels),
            ("depth", self.depth, other.depth),
            ("resolution", self.resolution, other.resolution),
        ];
        for (name, a, b) in fields {
            if a != b {
                return Err(KpbeError::ShapeMismatch(format!(
                    "checkpoint has model.{name}={a}, config requests {b}"
                )));
            }
        }
        Ok(())
    }
}
