use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Error, Result};
use crate::noise::derive_seed;

use super::caption::generate_caption;
use super::format::{read_clip, write_clip, ClipRecord};
use super::scene::{native_frames_needed, render_frames, render_indices, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Renders a full clip record for `spec`.
pub fn render_clip(spec: &SceneSpec, h: usize, w: usize, l: usize, fps: u8) -> Result<ClipRecord> {
    let r = render_frames(spec, h, w, l, fps as f64)?;
    Ok(ClipRecord {
        frames: r.pixels,
        len: l,
        channels: 3,
        height: h,
        width: w,
        fps,
        caption: generate_caption(spec),
        commands: r.commands,
    })
}

/// Scene for clip `index` of a dataset generated with `seed`.
pub fn dataset_scene(seed: u64, index: usize, frames: usize, fps: u8) -> SceneSpec {
    SceneSpec::sample(derive_seed(seed, &[index as u64]), native_frames_needed(frames, fps as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub clips: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub channels: usize,
    pub fps: u8,
    pub seed: u64,
    pub files: Vec<String>,
    /// Present for procedurally generated sets, which lets loaders re-render
    /// at other resolutions.
    #[serde(default)]
    pub scene_seeds: Option<Vec<u64>>,
    /// Hash of the experiment configuration that produced the set, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Renders `clips` scenes in parallel and writes them with a manifest.
pub fn generate_dataset(dir: &Path, clips: usize, h: usize, w: usize, l: usize, fps: u8, seed: u64) -> Result<Manifest> {
    if clips == 0 {
        return Err(config_err!("dataset needs at least one clip"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files: Vec<String> = (0..clips).map(|i| format!("clip_{i:05}.toyr")).collect();
    let scene_seeds: Vec<u64> = (0..clips).map(|i| derive_seed(seed, &[i as u64])).collect();
    files.par_iter().enumerate().try_for_each(|(i, name)| {
        let spec = dataset_scene(seed, i, l, fps);
        write_clip(&render_clip(&spec, h, w, l, fps)?, dir.join(name))
    })?;
    let manifest = Manifest {
        clips,
        height: h,
        width: w,
        frames: l,
        channels: 3,
        fps,
        seed,
        files,
        scene_seeds: Some(scene_seeds),
        config_hash: None,
    };
    manifest.write(dir)?;
    Ok(manifest)
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| contract_err!("{e}"))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Frames of one clip at a requested resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedFrames {
    /// `(n, C, H, W)` bytes.
    pub pixels: Vec<u8>,
    pub shape: [usize; 4],
    pub caption: String,
    pub commands: Vec<crate::backbone::Command>,
    pub fps: f64,
}

/// A clip collection addressable by index.
pub trait ClipSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn base_dims(&self) -> (usize, usize, usize);
    fn fps(&self) -> f64;
    /// Frames at `indices` of clip `clip`, at `h x w`.
    fn load(&self, clip: usize, h: usize, w: usize, indices: &[usize]) -> Result<LoadedFrames>;
}

/// A dataset directory held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<ClipRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.files.len() != manifest.clips {
            return Err(Error::Data(format!(
                "manifest lists {} files for {} clips",
                manifest.files.len(),
                manifest.clips
            )));
        }
        let records = manifest
            .files
            .iter()
            .map(|f| read_clip(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        for (f, r) in manifest.files.iter().zip(&records) {
            if r.shape() != [manifest.frames, manifest.channels, manifest.height, manifest.width] {
                return Err(Error::Data(format!("{f} has shape {:?}, manifest disagrees", r.shape())));
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            records,
        })
    }

    fn scene(&self, clip: usize) -> Option<SceneSpec> {
        let seeds = self.manifest.scene_seeds.as_ref()?;
        let native = native_frames_needed(self.manifest.frames, self.manifest.fps as f64);
        Some(SceneSpec::sample(seeds[clip], native))
    }
}

impl ClipSource for Dataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn base_dims(&self) -> (usize, usize, usize) {
        (self.manifest.height, self.manifest.width, self.manifest.frames)
    }

    fn fps(&self) -> f64 {
        self.manifest.fps as f64
    }

    fn load(&self, clip: usize, h: usize, w: usize, indices: &[usize]) -> Result<LoadedFrames> {
        let rec = self
            .records
            .get(clip)
            .ok_or_else(|| Error::Data(format!("clip {clip} of {}", self.records.len())))?;
        if let Some(&i) = indices.iter().find(|&&i| i >= rec.len) {
            return Err(Error::Data(format!("frame {i} outside clip of {} frames", rec.len)));
        }
        let commands = indices.iter().map(|&i| rec.commands[i]).collect();
        let pixels = if (h, w) == (rec.height, rec.width) {
            let n = rec.channels * h * w;
            indices.iter().flat_map(|&i| rec.frames[i * n..(i + 1) * n].iter().copied()).collect()
        } else if let Some(spec) = self.scene(clip) {
            render_indices(&spec, h, w, indices, self.fps())?.pixels
        } else {
            let n = rec.channels * rec.height * rec.width;
            let picked: Vec<u8> = indices
                .iter()
                .flat_map(|&i| rec.frames[i * n..(i + 1) * n].iter().copied())
                .collect();
            resize_bilinear(&picked, [indices.len(), rec.channels, rec.height, rec.width], h, w)
        };
        Ok(LoadedFrames {
            pixels,
            shape: [indices.len(), rec.channels, h, w],
            caption: rec.caption.clone(),
            commands,
            fps: self.fps(),
        })
    }
}

/// Bilinear resize of `(L, C, H, W)` bytes with pixel-centre alignment.
pub fn resize_bilinear(frames: &[u8], shape: [usize; 4], nh: usize, nw: usize) -> Vec<u8> {
    let [l, c, h, w] = shape;
    let coord = |o: usize, n: usize, src: usize| {
        let x = ((o as f64 + 0.5) * src as f64 / n as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(src - 1), x - i0 as f64)
    };
    let ys: Vec<_> = (0..nh).map(|o| coord(o, nh, h)).collect();
    let xs: Vec<_> = (0..nw).map(|o| coord(o, nw, w)).collect();
    let mut out = Vec::with_capacity(l * c * nh * nw);
    for plane in frames.chunks_exact(h * w).take(l * c) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}
