use wmlab_tensor::{Element, Tensor};

use crate::error::{contract_err, Result};

/// A video clip: `(frames, channels, height, width)` values plus frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip<T> {
    pub frames: Tensor<T>,
    pub fps: f64,
}

impl<T: Element> Clip<T> {
    pub fn new(frames: Tensor<T>, fps: f64) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(contract_err!("clip tensors are (L, C, H, W), got {:?}", frames.shape()));
        }
        if !(fps > 0.0) {
            return Err(contract_err!("clip fps must be positive, got {fps}"));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn frame(&self, i: usize) -> &[T] {
        let n = self.frame_len();
        &self.frames.data()[i * n..(i + 1) * n]
    }

    pub fn range(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            frames: self.frames.slice(0, start, len)?,
            fps: self.fps,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 / self.fps
    }
}

/// Maps bytes in `[0, 255]` to `[-1, 1]`.
pub fn bytes_to_unit<T: Element>(v: u8) -> T {
    T::from_f64_lossy(v as f64 / 127.5 - 1.0)
}

/// Inverse of [`bytes_to_unit`], clamping out-of-range values.
pub fn unit_to_byte<T: Element>(v: T) -> u8 {
    ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}
