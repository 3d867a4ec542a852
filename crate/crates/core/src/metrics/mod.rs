//! Long-video quality metrics.
//!
//! Motion metrics come from exhaustive block matching. Appearance metrics use
//! a frozen random feature network, so FID and FVD numbers here are proxies
//! and are labeled as such everywhere.

pub mod curves;
pub mod features;
pub mod flow;

use serde::{Deserialize, Serialize};
use wmlab_tensor::Element;

use crate::clip::Clip;
use crate::error::{config_err, contract_err, Result};
use crate::toyroad::ClipRecord;

pub use curves::{evaluate, windowed_curves, ClipMetrics, EvalReport, ReferenceStats, WindowedCurves};
pub use features::{
    background_consistency, consistency_from_features, cosine, frechet_distance, FeatureExtractor, FeatureNet,
    FeatureStats, STACK_FRAMES,
};
pub use flow::{
    estimate_flow, mawe, mawe_from, optical_flow_score, pair_flows, pair_warp_error, warp_error, FlowField,
    MotionStats,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub mawe_coefficient: f64,
    /// Frames per evaluation window; marks fall at its multiples.
    pub window: usize,
    pub search_radius: usize,
    pub block: usize,
    pub feature_seed: u64,
    /// Start spacing of the frame stacks used for temporal features.
    pub stack_stride: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            mawe_coefficient: 9.5,
            window: 40,
            search_radius: 4,
            block: 8,
            feature_seed: 0,
            stack_stride: 4,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mawe_coefficient > 0.0) {
            return Err(config_err!("MAWE coefficient must be positive"));
        }
        if self.window < 2 {
            return Err(config_err!("evaluation window must be at least 2 frames"));
        }
        if self.block == 0 || self.stack_stride == 0 {
            return Err(config_err!("flow block and stack stride must be positive"));
        }
        Ok(())
    }

    pub fn extractor(&self, channels: usize) -> FeatureExtractor {
        FeatureExtractor::new(self.feature_seed, channels, self.stack_stride)
    }
}

/// `(L, C, H, W)` frames with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub data: Vec<f64>,
    pub len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Video {
    pub fn new(data: Vec<f64>, shape: [usize; 4]) -> Result<Self> {
        let [len, channels, height, width] = shape;
        if data.len() != len * channels * height * width {
            return Err(contract_err!("{} values for video shape {shape:?}", data.len()));
        }
        Ok(Self {
            data,
            len,
            channels,
            height,
            width,
        })
    }

    pub fn from_bytes(bytes: &[u8], shape: [usize; 4]) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as f64 / 255.0).collect(), shape)
    }

    pub fn from_record(rec: &ClipRecord) -> Result<Self> {
        Self::from_bytes(&rec.frames, rec.shape())
    }

    /// Maps model-space values in `[-1, 1]` to `[0, 1]`.
    pub fn from_clip<T: Element>(clip: &Clip<T>) -> Result<Self> {
        let shape = [clip.len(), clip.channels(), clip.height(), clip.width()];
        Self::new(
            clip.frames.data().iter().map(|v| (v.as_f64() + 1.0) / 2.0).collect(),
            shape,
        )
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn segment(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len {
            return Err(contract_err!("segment {start}..{} of a {}-frame video", start + len, self.len));
        }
        let n = self.frame_len();
        Self::new(
            self.data[start * n..(start + len) * n].to_vec(),
            [len, self.channels, self.height, self.width],
        )
    }
}
