//! `.toyr` clip files.
//!
//! Layout, little-endian: magic `TOYR`, u16 version (1), u16 H, u16 W, u16 L,
//! u8 C, u8 fps, u32 caption length, caption bytes, L command bytes, then
//! `L*C*H*W` pixel bytes. Nothing may follow.

use std::path::Path;

use crate::backbone::Command;
use crate::clip::{bytes_to_unit, unit_to_byte, Clip};
use crate::error::{contract_err, Error, Result};
use wmlab_tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"TOYR";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    /// `(L, C, H, W)` bytes.
    pub frames: Vec<u8>,
    pub len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u8,
    pub caption: String,
    pub commands: Vec<Command>,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(contract_err!("clip record has zero frames"));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 || self.fps == 0 {
            return Err(contract_err!(
                "clip record dims must be positive: C {} H {} W {} fps {}",
                self.channels,
                self.height,
                self.width,
                self.fps
            ));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.len > u16::MAX as usize {
            return Err(contract_err!("clip record dims exceed u16"));
        }
        if self.channels > u8::MAX as usize {
            return Err(contract_err!("clip record has {} channels", self.channels));
        }
        if self.frames.len() != self.len * self.channels * self.height * self.width {
            return Err(contract_err!(
                "clip record holds {} bytes for shape {:?}",
                self.frames.len(),
                [self.len, self.channels, self.height, self.width]
            ));
        }
        if self.caption.is_empty() {
            return Err(contract_err!("clip record caption is empty"));
        }
        if self.commands.len() != self.len {
            return Err(contract_err!("{} commands for {} frames", self.commands.len(), self.len));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.len, self.channels, self.height, self.width]
    }

    /// Pixels mapped to `[-1, 1]`.
    pub fn to_clip<T: Element>(&self) -> Result<Clip<T>> {
        let data: Vec<T> = self.frames.iter().map(|&b| bytes_to_unit(b)).collect();
        Clip::new(Tensor::new(self.shape().to_vec(), data)?, self.fps as f64)
    }

    /// Quantizes a `[-1, 1]` clip. `fps` is rounded to the nearest integer.
    pub fn from_clip<T: Element>(clip: &Clip<T>, caption: String, commands: Vec<Command>) -> Result<Self> {
        let fps = clip.fps.round();
        if !(1.0..=255.0).contains(&fps) {
            return Err(contract_err!("frame rate {} does not fit the clip format", clip.fps));
        }
        let rec = Self {
            frames: clip.frames.data().iter().map(|&v| unit_to_byte(v)).collect(),
            len: clip.len(),
            channels: clip.channels(),
            height: clip.height(),
            width: clip.width(),
            fps: fps as u8,
            caption,
            commands,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let cap = self.caption.as_bytes();
        let mut out = Vec::with_capacity(20 + cap.len() + self.len + self.frames.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.len as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.push(self.fps);
        out.extend_from_slice(&(cap.len() as u32).to_le_bytes());
        out.extend_from_slice(cap);
        out.extend(self.commands.iter().map(|c| c.id() as u8));
        out.extend_from_slice(&self.frames);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(format_err(0, format!("bad magic {magic:?}")));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let len = r.u16("frame count")? as usize;
        let channels = r.take(1, "channels")?[0] as usize;
        let fps = r.take(1, "fps")?[0];
        for (name, v, off) in [("height", height, 6), ("width", width, 8), ("frame count", len, 10)] {
            if v == 0 {
                return Err(format_err(off, format!("{name} is zero")));
            }
        }
        if channels == 0 {
            return Err(format_err(12, "channels is zero".into()));
        }
        if fps == 0 {
            return Err(format_err(13, "fps is zero".into()));
        }
        let cap_len = r.u32("caption length")? as usize;
        let cap_at = r.pos;
        let caption = std::str::from_utf8(r.take(cap_len, "caption")?)
            .map_err(|e| format_err(cap_at + e.valid_up_to(), "caption is not UTF-8".into()))?
            .to_owned();
        if caption.is_empty() {
            return Err(format_err(cap_at, "caption is empty".into()));
        }
        let cmd_at = r.pos;
        let commands = r
            .take(len, "commands")?
            .iter()
            .enumerate()
            .map(|(i, &b)| Command::from_id(b).ok_or_else(|| format_err(cmd_at + i, format!("command code {b}"))))
            .collect::<Result<Vec<_>>>()?;
        let frames = r.take(len * channels * height * width, "pixels")?.to_vec();
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            frames,
            len,
            channels,
            height,
            width,
            fps,
            caption,
            commands,
        })
    }
}

fn format_err(offset: usize, reason: String) -> Error {
    Error::Format {
        offset: offset as u64,
        reason,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(
                self.bytes.len(),
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_clip(record: &ClipRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = record.encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<ClipRecord> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ClipRecord::decode(&bytes)
}
