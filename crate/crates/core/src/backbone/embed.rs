//! Tokenization and fixed (non-learned) embeddings.

use wmlab_tensor::{Element, Tensor};

use crate::error::{config_err, contract_err, Result};

/// Splits `(L, C, H, W)` frames into `(L, S, C*p*p)` patch tokens, with
/// `S = (H/p) * (W/p)` in row-major patch order.
pub fn patchify<T: Element>(clip: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(contract_err!("patchify expects (L, C, H, W), got {:?}", s));
    }
    let (l, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(config_err!("frame {h}x{w} is not divisible into {patch}-pixel patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(clip
        .reshape([l, c, gh, patch, gw, patch])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape([l, gh * gw, c * patch * patch])?)
}

/// Inverse of [`patchify`] for `channels`-channel tokens.
pub fn unpatchify<T: Element>(tokens: &Tensor<T>, patch: usize, channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(config_err!("frame {h}x{w} is not divisible into {patch}-pixel patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    if s.len() != 3 || s[1] != gh * gw || s[2] != channels * patch * patch {
        return Err(contract_err!("token shape {:?} does not match a {h}x{w} frame with patch {patch}", s));
    }
    Ok(tokens
        .reshape([s[0], gh, gw, channels, patch, patch])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape([s[0], channels, h, w])?)
}

/// Sinusoidal features `[cos(v f_0..), sin(v f_0..)]` of each value, with
/// frequencies `f_i = 10000^(-i/half)`. Returns `(n, dim)`.
pub fn sinusoid<T: Element>(values: &[f64], dim: usize) -> Result<Tensor<T>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(config_err!("sinusoidal width must be even and >= 2, got {dim}"));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let angles = (0..half).map(|i| v * (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let angles: Vec<f64> = angles.collect();
        out.extend(angles.iter().map(|a| a.cos()));
        out.extend(angles.iter().map(|a| a.sin()));
    }
    Ok(Tensor::from_f64([values.len(), dim], &out)?)
}

/// Span, in embedding coordinates, of every patch grid regardless of its
/// resolution, so the same image location maps to the same embedding.
const GRID_SPAN: f64 = 16.0;

/// Fixed 2D sin-cos embedding of a `gh x gw` grid, `(gh*gw, dim)`: half the
/// width encodes the row, half the column.
pub fn grid_embedding<T: Element>(gh: usize, gw: usize, dim: usize) -> Result<Tensor<T>> {
    if !dim.is_multiple_of(4) {
        return Err(config_err!("grid embedding width must be a multiple of 4, got {dim}"));
    }
    let rows: Vec<f64> = (0..gh).map(|i| (i as f64 + 0.5) * GRID_SPAN / gh as f64).collect();
    let cols: Vec<f64> = (0..gw).map(|j| (j as f64 + 0.5) * GRID_SPAN / gw as f64).collect();
    let er = sinusoid::<f64>(&rows, dim / 2)?;
    let ec = sinusoid::<f64>(&cols, dim / 2)?;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for i in 0..gh {
        for j in 0..gw {
            out.extend_from_slice(&er.data()[i * dim / 2..(i + 1) * dim / 2]);
            out.extend_from_slice(&ec.data()[j * dim / 2..(j + 1) * dim / 2]);
        }
    }
    Ok(Tensor::from_f64([gh * gw, dim], &out)?)
}

/// Original (full-rate) frame positions used for temporal rotary encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipRopePlan {
    original_indices: Vec<usize>,
    rope_base: f64,
}

impl SkipRopePlan {
    pub fn new(original_indices: Vec<usize>, rope_base: f64) -> Result<Self> {
        if original_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(contract_err!("rope positions must be strictly increasing: {:?}", original_indices));
        }
        if !(rope_base > 1.0) {
            return Err(config_err!("rope base must exceed 1, got {rope_base}"));
        }
        Ok(Self {
            original_indices,
            rope_base,
        })
    }

    /// Positions `0..len` at full rate.
    pub fn contiguous(len: usize, rope_base: f64) -> Result<Self> {
        Self::new((0..len).collect(), rope_base)
    }

    pub fn indices(&self) -> &[usize] {
        &self.original_indices
    }

    pub fn len(&self) -> usize {
        self.original_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original_indices.is_empty()
    }

    pub fn rope_base(&self) -> f64 {
        self.rope_base
    }

    /// `(cos, sin)` tables of shape `(L, head_dim/2)` with angle
    /// `p * base^(-2i/head_dim)` for original position `p`.
    pub fn tables<T: Element>(&self, head_dim: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        if !head_dim.is_multiple_of(2) {
            return Err(config_err!("rotary head width must be even, got {head_dim}"));
        }
        let half = head_dim / 2;
        let mut c = Vec::with_capacity(self.len() * half);
        let mut s = Vec::with_capacity(self.len() * half);
        for &p in &self.original_indices {
            for i in 0..half {
                let a = p as f64 * self.rope_base.powf(-2.0 * i as f64 / head_dim as f64);
                c.push(a.cos());
                s.push(a.sin());
            }
        }
        Ok((
            Tensor::from_f64([self.len(), half], &c)?,
            Tensor::from_f64([self.len(), half], &s)?,
        ))
    }
}
