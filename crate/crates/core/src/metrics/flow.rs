//! Exhaustive block-matching flow and the warp-based motion metrics.

use serde::{Deserialize, Serialize};

use super::{MetricConfig, Video};
use crate::error::{config_err, contract_err, Error, Result};

/// Per-pixel integer displacement from one frame to the next. A pixel's
/// content at `(y, x)` moves to `(y + v, x + u)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<i32>,
    pub v: Vec<i32>,
    pub occluded: Vec<bool>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            u: vec![0; n],
            v: vec![0; n],
            occluded: vec![false; n],
        }
    }

    pub fn mean_norm(&self) -> f64 {
        let n = self.u.len();
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| ((u * u + v * v) as f64).sqrt())
            .sum::<f64>()
            / n as f64
    }

    pub fn mean_u(&self) -> f64 {
        self.u.iter().map(|&u| u as f64).sum::<f64>() / self.u.len() as f64
    }
}

/// Candidate displacements ordered by length, so the first minimum found is
/// the smallest displacement among ties.
fn candidates(radius: i32) -> Vec<(i32, i32)> {
    let mut c: Vec<(i32, i32)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dy, dx)))
        .collect();
    c.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    c
}

/// Block-wise motion field from `a` to `b`, without occlusion marking.
fn match_blocks(video: &Video, a: usize, b: usize, cfg: &MetricConfig) -> Result<(Vec<i32>, Vec<i32>)> {
    let (h, w, c) = (video.height, video.width, video.channels);
    let bs = cfg.block;
    if bs == 0 || h < bs || w < bs {
        return Err(config_err!("frame {h}x{w} is smaller than flow block {bs}"));
    }
    let fa = video.frame(a);
    let fb = video.frame(b);
    let plane = h * w;
    let cands = candidates(cfg.search_radius as i32);
    let (mut u, mut v) = (vec![0i32; plane], vec![0i32; plane]);
    // trailing rows/columns join the last block
    let starts = |n: usize| -> Vec<(usize, usize)> {
        let k = n / bs;
        (0..k).map(|i| (i * bs, if i + 1 == k { n } else { (i + 1) * bs })).collect()
    };
    for &(y0, y1) in &starts(h) {
        for &(x0, x1) in &starts(w) {
            let area = (y1 - y0) * (x1 - x0);
            let mut best = (f64::INFINITY, 0, 0);
            for &(dy, dx) in &cands {
                let ys = (y0 as i32 + dy).max(0) - dy..(y1 as i32 + dy).min(h as i32) - dy;
                let xs = (x0 as i32 + dx).max(0) - dx..(x1 as i32 + dx).min(w as i32) - dx;
                if ys.is_empty() || xs.is_empty() {
                    continue;
                }
                let overlap = ys.len() * xs.len();
                if 2 * overlap < area {
                    continue;
                }
                let mut sad = 0.0;
                for ch in 0..c {
                    let pa = &fa[ch * plane..(ch + 1) * plane];
                    let pb = &fb[ch * plane..(ch + 1) * plane];
                    for y in ys.clone() {
                        let ra = y as usize * w;
                        let rb = (y + dy) as usize * w;
                        for x in xs.clone() {
                            sad += (pa[ra + x as usize] - pb[rb + (x + dx) as usize]).abs();
                        }
                    }
                }
                let cost = sad / overlap as f64;
                if cost < best.0 {
                    best = (cost, dx, dy);
                }
            }
            for y in y0..y1 {
                for x in x0..x1 {
                    u[y * w + x] = best.1;
                    v[y * w + x] = best.2;
                }
            }
        }
    }
    Ok((u, v))
}

/// Flow from frame `a` to frame `b`, with forward-backward occlusion.
pub fn estimate_flow(video: &Video, a: usize, b: usize, cfg: &MetricConfig) -> Result<FlowField> {
    if a >= video.len || b >= video.len {
        return Err(contract_err!("frames {a}, {b} outside a {}-frame video", video.len));
    }
    let (h, w) = (video.height, video.width);
    let (u, v) = match_blocks(video, a, b, cfg)?;
    let (bu, bv) = match_blocks(video, b, a, cfg)?;
    let mut occluded = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (ty, tx) = (y as i32 + v[i], x as i32 + u[i]);
            occluded[i] = if ty < 0 || tx < 0 || ty >= h as i32 || tx >= w as i32 {
                true
            } else {
                let j = ty as usize * w + tx as usize;
                let (ru, rv) = (u[i] + bu[j], v[i] + bv[j]);
                ((ru * ru + rv * rv) as f64).sqrt() > 1.0
            };
        }
    }
    Ok(FlowField {
        height: h,
        width: w,
        u,
        v,
        occluded,
    })
}

/// RMS difference between frame `a` and frame `b` warped back along `flow`,
/// over pixels that are visible and land inside `b`. `None` when no pixel
/// qualifies.
pub fn pair_warp_error(video: &Video, a: usize, b: usize, flow: &FlowField) -> Option<f64> {
    let (h, w, c) = (video.height, video.width, video.channels);
    let plane = h * w;
    let (fa, fb) = (video.frame(a), video.frame(b));
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if flow.occluded[i] {
                continue;
            }
            let (ty, tx) = (y as i32 + flow.v[i], x as i32 + flow.u[i]);
            if ty < 0 || tx < 0 || ty >= h as i32 || tx >= w as i32 {
                continue;
            }
            let j = ty as usize * w + tx as usize;
            for ch in 0..c {
                let d = fa[ch * plane + i] - fb[ch * plane + j];
                sum += d * d;
            }
            n += c;
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

fn check_pairs(video: &Video) -> Result<()> {
    if video.len < 2 {
        return Err(contract_err!("motion metrics need at least 2 frames, got {}", video.len));
    }
    Ok(())
}

/// Forward flow for every consecutive pair.
pub fn pair_flows(video: &Video, cfg: &MetricConfig) -> Result<Vec<FlowField>> {
    check_pairs(video)?;
    (0..video.len - 1).map(|k| estimate_flow(video, k, k + 1, cfg)).collect()
}

/// Motion statistics of one video, computed from a single flow pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionStats {
    pub warp_error: Option<f64>,
    pub flow_score: f64,
}

impl MotionStats {
    pub fn of(video: &Video, cfg: &MetricConfig) -> Result<Self> {
        let flows = pair_flows(video, cfg)?;
        let errs: Vec<f64> = flows
            .iter()
            .enumerate()
            .filter_map(|(k, f)| pair_warp_error(video, k, k + 1, f))
            .collect();
        let warp_error = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
        let flow_score = flows.iter().map(FlowField::mean_norm).sum::<f64>() / flows.len() as f64;
        Ok(Self { warp_error, flow_score })
    }

    pub fn warp_error(&self) -> Result<f64> {
        self.warp_error
            .ok_or_else(|| Error::UndefinedMetric("every frame pair is fully occluded".into()))
    }

    pub fn mawe(&self, coefficient: f64) -> Result<f64> {
        mawe_from(self.warp_error()?, self.flow_score, coefficient)
    }
}

/// Motion-aware warp error from its parts. A motionless video scores 0 when
/// it is also warp-consistent; otherwise the ratio is undefined.
pub fn mawe_from(warp_error: f64, flow_score: f64, coefficient: f64) -> Result<f64> {
    if flow_score < 1e-6 {
        if warp_error < 1e-6 {
            return Ok(0.0);
        }
        return Err(Error::UndefinedMetric(format!(
            "warp error {warp_error} with zero optical flow"
        )));
    }
    Ok(warp_error / (coefficient * flow_score))
}

/// Mean warp error over consecutive pairs that have visible pixels.
pub fn warp_error(video: &Video, cfg: &MetricConfig) -> Result<f64> {
    MotionStats::of(video, cfg)?.warp_error()
}

/// Mean flow magnitude over all pixels and consecutive pairs.
pub fn optical_flow_score(video: &Video, cfg: &MetricConfig) -> Result<f64> {
    Ok(MotionStats::of(video, cfg)?.flow_score)
}

pub fn mawe(video: &Video, cfg: &MetricConfig) -> Result<f64> {
    MotionStats::of(video, cfg)?.mawe(cfg.mawe_coefficient)
}
