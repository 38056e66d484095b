use serde::{Deserialize, Serialize};

use crate::decoding::GuidanceMode;
use crate::error::{Error, Result};
use crate::similarity::{EnsembleWeights, DEFAULT_TAU};

/// How the aggregated row-stochastic map is turned into edge similarities
/// before thresholding at `tau_cut`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AffinityScale {
    /// Undo the temperature softmax: `1 + τ·ln(S_ij / sqrt(S_ii S_jj))`,
    /// which recovers cosine similarity for a single map.
    #[default]
    Cosine,
    /// Threshold the softmax values as they are.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tau: f32,
    pub weights: EnsembleWeights,
    pub k_clusters: usize,
    /// Minimum selection frequency for a head to enter the dataset-level set.
    pub theta: f64,
    pub tau_cut: f64,
    pub epsilon: f64,
    pub affinity_scale: AffinityScale,
    pub alpha: f64,
    pub mode: GuidanceMode,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            weights: EnsembleWeights::uniform(),
            k_clusters: 5,
            theta: 0.5,
            tau_cut: 0.2,
            epsilon: 1e-5,
            affinity_scale: AffinityScale::Cosine,
            alpha: 0.4,
            mode: GuidanceMode::Additive,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidTemperature(self.tau));
        }
        EnsembleWeights::new(self.weights.w_q, self.weights.w_k, self.weights.w_v)?;
        if self.k_clusters == 0 {
            return Err(Error::InvalidClusterCount(0));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidConfig(format!("theta {} not in [0,1]", self.theta)));
        }
        if self.affinity_scale == AffinityScale::Raw && !(self.tau_cut > 0.0 && self.tau_cut < 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "tau_cut {} not in (0,1)",
                self.tau_cut
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} not in (0,1)",
                self.epsilon
            )));
        }
        self.guidance().validate()
    }

    pub fn guidance(&self) -> crate::decoding::GuidanceConfig {
        crate::decoding::GuidanceConfig {
            alpha: self.alpha,
            mode: self.mode,
            max_new_tokens: self.max_new_tokens,
        }
    }
}
