//! Procedural driving-like clips with exact captions and commands.

pub mod caption;
pub mod dataset;
pub mod format;
pub mod scene;

pub use caption::{generate_caption, tokenize, VOCAB};
pub use dataset::{
    dataset_scene, generate_dataset, render_clip, resize_bilinear, ClipSource, Dataset, LoadedFrames, Manifest,
};
pub use format::{read_clip, write_clip, ClipRecord};
pub use scene::{native_frames_needed, render_frames, render_indices, Palette, SceneSpec, Vehicle, NATIVE_FPS};
