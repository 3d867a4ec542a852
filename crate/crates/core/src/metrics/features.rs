//! Frozen random convolutional features standing in for pretrained
//! perceptual backbones, plus the statistics built on them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Video;
use crate::error::{contract_err, Result};
use crate::noise::keyed_rng;

/// Frames stacked channel-wise for the temporal feature network.
pub const STACK_FRAMES: usize = 16;
const WIDTHS: [(usize, usize); 3] = [(16, 2), (32, 2), (32, 1)];

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    stride: usize,
    /// `(cout, cin, 3, 3)`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Conv {
    /// 3x3 convolution with zero padding 1.
    fn apply(&self, x: &[f64], h: usize, w: usize, relu: bool) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut out = vec![0.0; self.cout * oh * ow];
        for o in 0..self.cout {
            let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
            dst.fill(self.b[o]);
            for i in 0..self.cin {
                let src = &x[i * h * w..(i + 1) * h * w];
                let k = &self.w[(o * self.cin + i) * 9..(o * self.cin + i + 1) * 9];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (cy, cx) = ((oy * self.stride) as isize, (ox * self.stride) as isize);
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let y = cy + ky as isize - 1;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = cx + kx as isize - 1;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += k[ky * 3 + kx] * src[y as usize * w + xx as usize];
                            }
                        }
                        dst[oy * ow + ox] += acc;
                    }
                }
            }
        }
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        (out, oh, ow)
    }
}

/// Three random 3x3 convolutions (two strided, ReLU between) followed by
/// global and 2x2 quadrant average pooling, then unit normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    layers: Vec<Conv>,
}

impl FeatureNet {
    /// Weights are uniform in `±sqrt(6 / fan_in)` and biases in `±0.1`, drawn
    /// from a portable generator with plain IEEE arithmetic.
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut rng = keyed_rng(seed, &[0xFEA7, in_channels as u64]);
        let mut cin = in_channels;
        let layers = WIDTHS
            .iter()
            .map(|&(cout, stride)| {
                let a = (6.0 / (cin * 9) as f64).sqrt();
                let w = (0..cout * cin * 9).map(|_| rng.random_range(-a..a)).collect();
                let b = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
                let layer = Conv { cin, cout, stride, w, b };
                cin = cout;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].cin
    }

    pub fn dim(&self) -> usize {
        5 * self.layers.last().map_or(0, |l| l.cout)
    }

    /// SHA-256 over every weight and bias as little-endian f64.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for v in l.w.iter().chain(&l.b) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Feature vector of a `(C, H, W)` image with values in `[0, 1]`.
    pub fn embed(&self, image: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        if image.len() != self.in_channels() * h * w || h == 0 || w == 0 {
            return Err(contract_err!(
                "feature net expects {} channels of {h}x{w}, got {} values",
                self.in_channels(),
                image.len()
            ));
        }
        let mut x: Vec<f64> = image.iter().map(|v| 2.0 * v - 1.0).collect();
        let (mut ch, mut cw) = (h, w);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, oh, ow) = layer.apply(&x, ch, cw, i < last);
            x = y;
            ch = oh;
            cw = ow;
        }
        let cout = self.layers[last].cout;
        let (hy, hx) = (ch.div_ceil(2), cw.div_ceil(2));
        let regions = [
            (0, ch, 0, cw),
            (0, hy, 0, hx),
            (0, hy, hx.min(cw - 1), cw),
            (hy.min(ch - 1), ch, 0, hx),
            (hy.min(ch - 1), ch, hx.min(cw - 1), cw),
        ];
        let mut f = Vec::with_capacity(self.dim());
        for &(y0, y1, x0, x1) in &regions {
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for o in 0..cout {
                let map = &x[o * ch * cw..(o + 1) * ch * cw];
                let s: f64 = (y0..y1).map(|y| map[y * cw + x0..y * cw + x1].iter().sum::<f64>()).sum();
                f.push(s / n);
            }
        }
        Ok(normalize(f))
    }
}

fn normalize(mut f: Vec<f64>) -> Vec<f64> {
    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < 1e-12 {
        f.iter_mut().for_each(|v| *v = 0.0);
        f[0] = 1.0;
    } else {
        f.iter_mut().for_each(|v| *v /= n);
    }
    f
}

/// The frame and frame-stack networks for one extractor seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub frame_net: FeatureNet,
    pub stack_net: FeatureNet,
    pub stack_stride: usize,
}

impl FeatureExtractor {
    pub fn new(seed: u64, channels: usize, stack_stride: usize) -> Self {
        Self {
            frame_net: FeatureNet::new(seed, channels),
            stack_net: FeatureNet::new(seed, channels * STACK_FRAMES),
            stack_stride: stack_stride.max(1),
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.frame_net.checksum());
        h.update(self.stack_net.checksum());
        hex::encode(h.finalize())
    }

    pub fn frame_features(&self, video: &Video) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        (0..video.len)
            .into_par_iter()
            .map(|k| self.frame_net.embed(video.frame(k), video.height, video.width))
            .collect()
    }

    /// Features of every `STACK_FRAMES`-frame window starting at multiples of
    /// the stack stride. Empty for shorter videos.
    pub fn stack_features(&self, video: &Video) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        if video.len < STACK_FRAMES {
            return Ok(Vec::new());
        }
        let starts: Vec<usize> = (0..=video.len - STACK_FRAMES).step_by(self.stack_stride).collect();
        let n = video.frame_len();
        starts
            .into_par_iter()
            .map(|s| {
                self.stack_net
                    .embed(&video.data[s * n..(s + STACK_FRAMES) * n], video.height, video.width)
            })
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Average of the mean consecutive-frame similarity and the mean similarity
/// of the first frame to each later frame.
pub fn consistency_from_features(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(contract_err!("background consistency needs at least 2 frames"));
    }
    let n = (features.len() - 1) as f64;
    let consecutive = features.windows(2).map(|p| cosine(&p[0], &p[1])).sum::<f64>() / n;
    let anchored = features[1..].iter().map(|f| cosine(&features[0], f)).sum::<f64>() / n;
    Ok((consecutive + anchored) / 2.0)
}

pub fn background_consistency(video: &Video, extractor: &FeatureExtractor) -> Result<f64> {
    consistency_from_features(&extractor.frame_features(video)?)
}

/// Gaussian fit of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, unbiased (population when one sample).
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(contract_err!("feature statistics need at least one vector"));
        };
        let d = first.len();
        if vectors.iter().any(|v| v.len() != d) {
            return Err(contract_err!("feature vectors have mixed dimensions"));
        }
        let n = vectors.len();
        let mut mean = vec![0.0; d];
        for v in vectors {
            mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for v in vectors {
            let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigenvalues below `-EIGEN_TOLERANCE * scale` mean the input was not PSD.
const EIGEN_TOLERANCE: f64 = 1e-8;
/// Eigenvalues within this relative band of zero are round-off from rank
/// deficiency; their square roots (about 1e-8) would otherwise dominate.
const EIGEN_FLOOR: f64 = 1e-12;

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let roots = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < -EIGEN_TOLERANCE * scale {
                Err(contract_err!("matrix is not positive semidefinite: eigenvalue {l}"))
            } else if l <= EIGEN_FLOOR * scale {
                Ok(0.0)
            } else {
                Ok(l.sqrt())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&DVector::from_vec(roots)) * q.transpose())
}

/// Squared Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(contract_err!("feature statistics have dimensions {} and {}", d, b.dim()));
    }
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    // tr (S_a S_b)^(1/2) is the nuclear norm of R_b R_a. Taking singular
    // values of the product of roots avoids squaring the dynamic range, which
    // would push small true eigenvalues under the noise floor.
    let ra = psd_sqrt(sa.clone())?;
    let rb = psd_sqrt(sb.clone())?;
    let cross: f64 = (&rb * &ra).singular_values().iter().sum();
    let dm: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((dm + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}
