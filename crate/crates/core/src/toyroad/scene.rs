//! Procedural road scenes and their anti-aliased rasterization.
//!
//! Geometry lives in scene units: one unit is one pixel when a frame is
//! rendered 32 rows tall. Motion parameters are per native frame at 10 Hz.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Command;
use crate::error::{contract_err, Result};
use crate::noise::keyed_rng;

/// Frame height, in pixels, at which one scene unit is one pixel.
pub const REFERENCE_HEIGHT: f64 = 32.0;
/// Rate at which scene motion is specified.
pub const NATIVE_FPS: f64 = 10.0;
const SUPERSAMPLE: usize = 4;

const HORIZON: f64 = 10.0;
const DASH_PERIOD: f64 = 8.0;
const DASH_ON: f64 = 4.0;
/// Lateral displacement of the far road end at full bend.
const BEND_SPAN: f64 = 8.0;
const BEND_RATE: f64 = 0.15;
/// Image pan per native frame while turning.
const YAW_RATE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Palette {
    Day,
    Dusk,
    Night,
}

impl Palette {
    pub const ALL: [Palette; 3] = [Palette::Day, Palette::Dusk, Palette::Night];

    pub fn name(self) -> &'static str {
        match self {
            Palette::Day => "day",
            Palette::Dusk => "dusk",
            Palette::Night => "night",
        }
    }

    fn colors(self) -> Colors {
        match self {
            Palette::Day => Colors {
                sky: [135.0, 190.0, 235.0],
                skyline: [70.0, 95.0, 125.0],
                grass: [70.0, 140.0, 60.0],
                tuft: [45.0, 105.0, 40.0],
                road: [95.0, 95.0, 100.0],
                marking: [240.0, 240.0, 240.0],
                tint: 1.0,
            },
            Palette::Dusk => Colors {
                sky: [225.0, 140.0, 95.0],
                skyline: [85.0, 55.0, 75.0],
                grass: [65.0, 95.0, 50.0],
                tuft: [40.0, 65.0, 35.0],
                road: [75.0, 70.0, 75.0],
                marking: [230.0, 215.0, 190.0],
                tint: 0.8,
            },
            Palette::Night => Colors {
                sky: [15.0, 20.0, 45.0],
                skyline: [35.0, 35.0, 60.0],
                grass: [20.0, 40.0, 28.0],
                tuft: [10.0, 25.0, 15.0],
                road: [38.0, 38.0, 44.0],
                marking: [205.0, 200.0, 120.0],
                tint: 0.55,
            },
        }
    }
}

struct Colors {
    sky: [f64; 3],
    skyline: [f64; 3],
    grass: [f64; 3],
    tuft: [f64; 3],
    road: [f64; 3],
    marking: [f64; 3],
    /// Brightness multiplier for vehicle bodies.
    tint: f64,
}

const VEHICLE_COLORS: [[f64; 3]; 6] = [
    [200.0, 40.0, 40.0],
    [40.0, 80.0, 200.0],
    [230.0, 200.0, 50.0],
    [235.0, 235.0, 235.0],
    [30.0, 30.0, 30.0],
    [60.0, 170.0, 90.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    /// -1 for the left lane, +1 for the right lane.
    pub lane: i8,
    /// Forward speed in scene units per native frame.
    pub speed: f64,
    pub color: u8,
    pub spawn_frame: usize,
    /// Row of the vehicle's base when it appears.
    pub spawn_row: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Scene units per native frame.
    pub ego_speed: f64,
    pub vehicles: Vec<Vehicle>,
    pub palette: Palette,
    /// One command per native frame.
    pub commands: Vec<Command>,
}

fn hash01(seed: u64, k: i64) -> f64 {
    let mut z = seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) as f64 / u64::MAX as f64
}

impl SceneSpec {
    /// A random scene with a command track of `frames` native frames.
    pub fn sample(seed: u64, frames: usize) -> Self {
        let mut rng = keyed_rng(seed, &[0x5CE2E]);
        let palette = Palette::ALL[rng.random_range(0..3)];
        let ego_speed = rng.random_range(0.5..1.5);
        let n = rng.random_range(0..=3);
        let vehicles = (0..n)
            .map(|_| Vehicle {
                lane: if rng.random_bool(0.5) { -1 } else { 1 },
                speed: rng.random_range(0.0..2.0),
                color: rng.random_range(0..VEHICLE_COLORS.len() as u8),
                spawn_frame: rng.random_range(0..frames.max(1).div_ceil(2)),
                spawn_row: rng.random_range(HORIZON + 4.0..26.0),
            })
            .collect();
        let mut commands = Vec::with_capacity(frames);
        while commands.len() < frames {
            let len = rng.random_range(8..=24);
            let c = match rng.random_range(0..4) {
                0 => Command::Left,
                1 => Command::Right,
                _ => Command::Straight,
            };
            commands.extend(std::iter::repeat_n(c, len));
        }
        commands.truncate(frames);
        Self {
            seed,
            ego_speed,
            vehicles,
            palette,
            commands,
        }
    }

    /// A scene with no vehicles and a fixed command on every frame.
    pub fn plain(seed: u64, frames: usize, ego_speed: f64, command: Command, palette: Palette) -> Self {
        Self {
            seed,
            ego_speed,
            vehicles: Vec::new(),
            palette,
            commands: vec![command; frames],
        }
    }

    /// Signed road curvature at the start of each native frame, plus one
    /// trailing entry. Positive follows a left command: the ego yaws left so
    /// the far road swings right in the image, as does everything else.
    pub fn road_curvature(&self) -> Vec<f64> {
        self.motion().into_iter().map(|(b, _)| b).collect()
    }

    /// `(bend, pan)` after `t` native frames: bend eases toward the command
    /// target; pan accumulates yaw.
    fn motion(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.commands.len() + 1);
        let (mut bend, mut pan) = (0.0f64, 0.0f64);
        out.push((bend, pan));
        for c in &self.commands {
            let dir = match c {
                Command::Straight => 0.0,
                Command::Left => 1.0,
                Command::Right => -1.0,
            };
            bend += BEND_RATE * (dir - bend);
            pan += YAW_RATE * dir;
            out.push((bend, pan));
        }
        out
    }
}

struct FrameState<'a> {
    spec: &'a SceneSpec,
    colors: Colors,
    t: f64,
    bend: f64,
    pan: f64,
    width: f64,
    vehicles: Vec<(f64, f64, f64, f64, [f64; 3])>,
}

impl FrameState<'_> {
    fn half_width(y: f64) -> f64 {
        1.0 + 0.65 * (y - HORIZON)
    }

    fn center(&self, y: f64) -> f64 {
        let far = ((REFERENCE_HEIGHT - y) / (REFERENCE_HEIGHT - HORIZON)).clamp(0.0, 1.0);
        self.width / 2.0 + self.bend * BEND_SPAN * far * far
    }

    fn shade(&self, x: f64, y: f64) -> [f64; 3] {
        let c = &self.colors;
        for &(x0, x1, y0, y1, col) in &self.vehicles {
            if x >= x0 && x < x1 && y >= y0 && y < y1 {
                return col;
            }
        }
        if y < HORIZON {
            let block = ((x - self.pan) / 5.0).floor() as i64;
            let height = 1.5 + 4.0 * hash01(self.spec.seed, block.rem_euclid(64));
            return if y > HORIZON - height { c.skyline } else { c.sky };
        }
        let cx = self.center(y);
        let hw = Self::half_width(y);
        let dx = x - cx;
        if dx.abs() < hw {
            let dash_w = 0.25 + 0.04 * (y - HORIZON);
            let phase = (y - self.spec.ego_speed * self.t).rem_euclid(DASH_PERIOD);
            if dx.abs() < dash_w && phase < DASH_ON {
                return c.marking;
            }
            let edge_w = 0.2 + 0.03 * (y - HORIZON);
            if dx.abs() > hw - edge_w {
                return c.marking;
            }
            return c.road;
        }
        let gx = (x - self.pan).rem_euclid(7.0);
        let gy = (y - self.spec.ego_speed * self.t).rem_euclid(5.0);
        if gx < 1.0 && gy < 1.0 {
            c.tuft
        } else {
            c.grass
        }
    }
}

/// Rendered clip plus its per-frame commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrames {
    /// `(L, 3, H, W)` bytes.
    pub pixels: Vec<u8>,
    pub commands: Vec<Command>,
}

/// Native frames a scene needs to cover `l` frames at `fps`.
pub fn native_frames_needed(l: usize, fps: f64) -> usize {
    if l == 0 {
        return 0;
    }
    ((l - 1) as f64 * NATIVE_FPS / fps).floor() as usize + 1
}

/// Renders `l` frames of `spec` at `h x w` pixels and `fps` frames per
/// second. Each pixel averages a 4x4 grid of scene samples.
pub fn render_frames(spec: &SceneSpec, h: usize, w: usize, l: usize, fps: f64) -> Result<RenderedFrames> {
    let indices: Vec<usize> = (0..l).collect();
    render_indices(spec, h, w, &indices, fps)
}

/// Renders only the listed frame indices of the `fps`-rate sequence.
pub fn render_indices(spec: &SceneSpec, h: usize, w: usize, indices: &[usize], fps: f64) -> Result<RenderedFrames> {
    let l = indices.len();
    if h == 0 || w == 0 || l == 0 || !(fps > 0.0) {
        return Err(contract_err!("render dims must be positive, got {h}x{w}x{l} at {fps} fps"));
    }
    let step = NATIVE_FPS / fps;
    let last = native_frames_needed(indices.iter().max().unwrap() + 1, fps) - 1;
    if last >= spec.commands.len() {
        return Err(contract_err!(
            "scene has {} native frames, rendering needs {}",
            spec.commands.len(),
            last + 1
        ));
    }
    let motion = spec.motion();
    let scale = h as f64 / REFERENCE_HEIGHT;
    let width = w as f64 / scale;
    let mut pixels = Vec::with_capacity(l * 3 * h * w);
    let mut commands = Vec::with_capacity(l);
    let plane = h * w;
    for &k in indices {
        let t = k as f64 * step;
        let native = t.floor() as usize;
        let frac = t - native as f64;
        let (b0, p0) = motion[native];
        let (b1, p1) = motion[native + 1];
        let (bend, pan) = (b0 + frac * (b1 - b0), p0 + frac * (p1 - p0));
        commands.push(spec.commands[native]);
        let colors = spec.palette.colors();
        let mut state = FrameState {
            spec,
            t,
            bend,
            pan,
            width,
            vehicles: Vec::new(),
            colors,
        };
        for v in &spec.vehicles {
            if t < v.spawn_frame as f64 {
                continue;
            }
            let row = v.spawn_row + (spec.ego_speed - v.speed) * (t - v.spawn_frame as f64);
            if row <= HORIZON + 1.0 || row > REFERENCE_HEIGHT + 10.0 {
                continue;
            }
            let hw = FrameState::half_width(row);
            let cx = state.center(row) + v.lane as f64 * 0.5 * hw;
            let vw = 0.42 * hw;
            let vh = 0.7 * vw;
            let base = VEHICLE_COLORS[v.color as usize % VEHICLE_COLORS.len()];
            let col = base.map(|c| c * state.colors.tint);
            state.vehicles.push((cx - vw / 2.0, cx + vw / 2.0, row - vh, row, col));
        }
        // nearer (lower) vehicles occlude farther ones
        state.vehicles.sort_by(|a, b| b.3.total_cmp(&a.3));

        let mut frame = vec![0.0f64; 3 * plane];
        let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for py in 0..h {
            for px in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..SUPERSAMPLE {
                    let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / scale;
                    for sx in 0..SUPERSAMPLE {
                        let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / scale;
                        let c = state.shade(x, y);
                        acc[0] += c[0];
                        acc[1] += c[1];
                        acc[2] += c[2];
                    }
                }
                for ch in 0..3 {
                    frame[ch * plane + py * w + px] = acc[ch] * inv;
                }
            }
        }
        pixels.extend(frame.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    Ok(RenderedFrames { pixels, commands })
}
