//! Windowed degradation curves and the evaluation report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{consistency_from_features, frechet_distance, FeatureExtractor, FeatureStats};
use super::flow::MotionStats;
use super::{MetricConfig, Video};
use crate::error::{contract_err, Result};

/// Feature statistics of the reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub extractor_checksum: String,
    pub frames: FeatureStats,
    /// Absent when every reference video is shorter than a frame stack.
    pub stacks: Option<FeatureStats>,
}

impl ReferenceStats {
    pub fn from_videos(videos: &[Video], extractor: &FeatureExtractor) -> Result<Self> {
        let (frames, stacks) = pooled_features(videos, extractor)?;
        Ok(Self {
            extractor_checksum: extractor.checksum(),
            frames: FeatureStats::from_vectors(&frames)?,
            stacks: if stacks.is_empty() {
                None
            } else {
                Some(FeatureStats::from_vectors(&stacks)?)
            },
        })
    }
}

fn content_key(v: &Video) -> [u8; 32] {
    let mut h = Sha256::new();
    for x in [v.len, v.channels, v.height, v.width] {
        h.update((x as u64).to_le_bytes());
    }
    for x in &v.data {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

/// Videos in an order fixed by their content, so aggregates do not depend on
/// the order the caller supplied.
fn canonical(videos: &[Video]) -> Vec<&Video> {
    let mut keyed: Vec<_> = videos.iter().map(|v| (content_key(v), v)).collect();
    keyed.sort_by_key(|a| a.0);
    keyed.into_iter().map(|(_, v)| v).collect()
}

type Features = Vec<Vec<f64>>;

fn pooled_features(videos: &[Video], extractor: &FeatureExtractor) -> Result<(Features, Features)> {
    let per: Vec<(Features, Features)> = canonical(videos)
        .into_par_iter()
        .map(|v| Ok((extractor.frame_features(v)?, extractor.stack_features(v)?)))
        .collect::<Result<_>>()?;
    let mut frames = Vec::new();
    let mut stacks = Vec::new();
    for (f, s) in per {
        frames.extend(f);
        stacks.extend(s);
    }
    Ok((frames, stacks))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedCurves {
    pub window: usize,
    /// Exclusive end frame of each window.
    pub marks: Vec<usize>,
    pub fid_proxy: Vec<f64>,
    /// `None` where the window is shorter than a frame stack.
    pub fvd_proxy: Vec<Option<f64>>,
    /// Mean over clips with a defined value; `None` when no clip has one.
    pub mawe: Vec<Option<f64>>,
    pub background_consistency: Vec<f64>,
}

/// Metrics over frames `[m - window, m)` for each mark `m` that fits in the
/// shortest video.
pub fn windowed_curves(videos: &[Video], reference: &ReferenceStats, cfg: &MetricConfig) -> Result<WindowedCurves> {
    cfg.validate()?;
    let shortest = videos
        .iter()
        .map(|v| v.len)
        .min()
        .ok_or_else(|| contract_err!("windowed curves need at least one video"))?;
    let extractor = cfg.extractor(videos[0].channels);
    if extractor.checksum() != reference.extractor_checksum {
        return Err(contract_err!("reference statistics come from a different feature extractor"));
    }
    let marks: Vec<usize> = (1..=shortest / cfg.window).map(|k| k * cfg.window).collect();
    let mut out = WindowedCurves {
        window: cfg.window,
        marks: marks.clone(),
        fid_proxy: Vec::new(),
        fvd_proxy: Vec::new(),
        mawe: Vec::new(),
        background_consistency: Vec::new(),
    };
    for m in marks {
        let segments = videos
            .iter()
            .map(|v| v.segment(m - cfg.window, cfg.window))
            .collect::<Result<Vec<_>>>()?;
        let segments = canonical(&segments).into_iter().cloned().collect::<Vec<_>>();
        let per_clip: Vec<(Features, Features, MotionStats)> = segments
            .par_iter()
            .map(|s| {
                Ok((
                    extractor.frame_features(s)?,
                    extractor.stack_features(s)?,
                    MotionStats::of(s, cfg)?,
                ))
            })
            .collect::<Result<_>>()?;
        let frames: Features = per_clip.iter().flat_map(|p| p.0.iter().cloned()).collect();
        let stacks: Features = per_clip.iter().flat_map(|p| p.1.iter().cloned()).collect();
        out.fid_proxy
            .push(frechet_distance(&FeatureStats::from_vectors(&frames)?, &reference.frames)?);
        out.fvd_proxy.push(match (&reference.stacks, stacks.is_empty()) {
            (Some(r), false) => Some(frechet_distance(&FeatureStats::from_vectors(&stacks)?, r)?),
            _ => None,
        });
        out.mawe
            .push(mean(per_clip.iter().filter_map(|p| p.2.mawe(cfg.mawe_coefficient).ok())));
        let bc = per_clip
            .iter()
            .map(|p| consistency_from_features(&p.0))
            .collect::<Result<Vec<_>>>()?;
        out.background_consistency.push(mean(bc).unwrap_or(f64::NAN));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub name: String,
    pub frames: usize,
    pub warp_error: Option<f64>,
    pub flow_score: f64,
    pub mawe: Option<f64>,
    pub background_consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub warp_error: Option<f64>,
    pub flow_score: f64,
    pub mawe: Option<f64>,
    pub background_consistency: f64,
    pub fid_proxy: f64,
    pub fvd_proxy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: MetricConfig,
    pub extractor_checksum: String,
    /// Sorted by name.
    pub clips: Vec<ClipMetrics>,
    pub aggregate: Aggregates,
    pub curves: WindowedCurves,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per mark for plotting.
    pub fn curves_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let c = &self.curves;
        let mut s = String::from("mark,fid_proxy,fvd_proxy,mawe,background_consistency\n");
        for i in 0..c.marks.len() {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.marks[i],
                c.fid_proxy[i],
                opt(c.fvd_proxy[i]),
                opt(c.mawe[i]),
                c.background_consistency[i]
            ));
        }
        s
    }
}

/// Per-clip metrics, whole-set aggregates and windowed curves for named
/// videos against `reference`.
pub fn evaluate(videos: &[(String, Video)], reference: &ReferenceStats, cfg: &MetricConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut named: Vec<&(String, Video)> = videos.iter().collect();
    named.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| content_key(&a.1).cmp(&content_key(&b.1))));
    let first = named.first().ok_or_else(|| contract_err!("nothing to evaluate"))?;
    let extractor = cfg.extractor(first.1.channels);
    let clips: Vec<ClipMetrics> = named
        .par_iter()
        .map(|(name, v)| {
            let motion = MotionStats::of(v, cfg)?;
            Ok(ClipMetrics {
                name: name.clone(),
                frames: v.len,
                warp_error: motion.warp_error,
                flow_score: motion.flow_score,
                mawe: motion.mawe(cfg.mawe_coefficient).ok(),
                background_consistency: consistency_from_features(&extractor.frame_features(v)?)?,
            })
        })
        .collect::<Result<_>>()?;
    let plain: Vec<Video> = named.iter().map(|(_, v)| v.clone()).collect();
    let (frames, stacks) = pooled_features(&plain, &extractor)?;
    let aggregate = Aggregates {
        warp_error: mean(clips.iter().filter_map(|c| c.warp_error)),
        flow_score: mean(clips.iter().map(|c| c.flow_score)).unwrap_or(0.0),
        mawe: mean(clips.iter().filter_map(|c| c.mawe)),
        background_consistency: mean(clips.iter().map(|c| c.background_consistency)).unwrap_or(f64::NAN),
        fid_proxy: frechet_distance(&FeatureStats::from_vectors(&frames)?, &reference.frames)?,
        fvd_proxy: match (&reference.stacks, stacks.is_empty()) {
            (Some(r), false) => Some(frechet_distance(&FeatureStats::from_vectors(&stacks)?, r)?),
            _ => None,
        },
    };
    Ok(EvalReport {
        config: cfg.clone(),
        extractor_checksum: extractor.checksum(),
        curves: windowed_curves(&plain, reference, cfg)?,
        clips,
        aggregate,
    })
}
