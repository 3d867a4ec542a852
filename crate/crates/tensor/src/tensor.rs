use crate::element::{DType, Element};
use crate::error::{dim_err, Result, TensorError};
use crate::shape::{self, broadcast_shape, broadcast_strides, contiguous_strides, numel, split_axis, walk};

/// Dense, contiguous, row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(dim_err(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; only for tensors that are not recorded on a tape.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(dim_err("item", format!("tensor of shape {:?} is not a scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        binary(self, other, op, f)
    }

    /// Max absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, extent, inner) = split_axis("slice", &self.shape, axis)?;
        if start + len > extent {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat", "no tensors to concatenate"))?;
        let (outer, _, inner) = split_axis("concat", &first.shape, axis)?;
        let mut total = 0;
        for p in parts {
            let same_rank = p.shape.len() == first.shape.len();
            let compatible = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += p.shape[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let src = contiguous_strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        walk(&out_shape, [&strides], |_, [o]| data.push(self.data[o]));
        Ok(Self { shape: out_shape, data })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let out = broadcast_shape("broadcast_to", &self.shape, shape)?;
        if out != shape {
            return Err(TensorError::Shape {
                op: "broadcast_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let strides = broadcast_strides(&self.shape, shape);
        let mut data = Vec::with_capacity(numel(shape));
        walk(shape, [&strides], |_, [o]| data.push(self.data[o]));
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Sums a broadcast result back down to `shape` (inverse of broadcasting).
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let check = broadcast_shape("reduce_to", shape, &self.shape)?;
        if check != self.shape {
            return Err(TensorError::Shape {
                op: "reduce_to",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = vec![T::zero(); numel(shape)];
        let n = out.len();
        if n == 1 {
            out[0] = self.sum_all();
        } else if shape_is_suffix(shape, &self.shape) {
            for chunk in self.data.chunks_exact(n) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
        } else {
            let strides = broadcast_strides(shape, &self.shape);
            walk(&self.shape, [&strides], |pos, [o]| out[o] += self.data[pos]);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Self> {
        let mut kept = self.shape.clone();
        for &a in axes {
            if a >= kept.len() {
                return Err(dim_err("sum", format!("axis {a} out of range for rank {}", kept.len())));
            }
            kept[a] = 1;
        }
        let reduced = self.reduce_to(&kept)?;
        if keepdim {
            Ok(reduced)
        } else {
            let shape: Vec<usize> = self
                .shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            reduced.reshape(shape)
        }
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]` with broadcast batch axes.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_impl(self, false, other, false)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = split_axis("softmax", &self.shape, axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(out[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (out[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if self.shape.is_empty() {
            return Err(dim_err("gather", "table must have rank >= 1"));
        }
        let rows = self.shape[0];
        let width = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&self.data[i * width..(i + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }
}

fn shape_is_suffix(small: &[usize], big: &[usize]) -> bool {
    let mut s = small;
    while let [1, rest @ ..] = s {
        s = rest;
    }
    s.len() <= big.len() && big[big.len() - s.len()..] == *s
}

/// Elementwise binary op with trailing-axis broadcasting.
pub(crate) fn binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape == b.shape {
        return Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        });
    }
    let out = broadcast_shape(op, &a.shape, &b.shape)?;
    let n = numel(&out);
    let mut data = Vec::with_capacity(n);
    if out == a.shape && shape_is_suffix(&b.shape, &a.shape) {
        let m = b.data.len();
        for chunk in a.data.chunks_exact(m) {
            data.extend(chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)));
        }
    } else if out == b.shape && shape_is_suffix(&a.shape, &b.shape) {
        let m = a.data.len();
        for chunk in b.data.chunks_exact(m) {
            data.extend(a.data.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    } else {
        let sa = broadcast_strides(&a.shape, &out);
        let sb = broadcast_strides(&b.shape, &out);
        walk(&out, [&sa, &sb], |_, [oa, ob]| data.push(f(a.data[oa], b.data[ob])));
    }
    Ok(Tensor { shape: out, data })
}

/// Shared matmul driver. `a_t`/`b_t` mean the last two axes are read transposed.
pub(crate) fn matmul_impl<T: Element>(
    a: &Tensor<T>,
    a_t: bool,
    b: &Tensor<T>,
    b_t: bool,
) -> Result<Tensor<T>> {
    let mismatch = || TensorError::Shape {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() < 2 {
        return Err(mismatch());
    }
    let (ar, br) = (a.rank(), b.rank());
    let (m, ka) = if a_t {
        (a.shape[ar - 1], a.shape[ar - 2])
    } else {
        (a.shape[ar - 2], a.shape[ar - 1])
    };
    let (kb, n) = if b_t {
        (b.shape[br - 1], b.shape[br - 2])
    } else {
        (b.shape[br - 2], b.shape[br - 1])
    };
    if ka != kb {
        return Err(mismatch());
    }
    let k = ka;
    let a_batch = &a.shape[..ar - 2];
    let b_batch = &b.shape[..br - 2];
    let batch = broadcast_shape("matmul", a_batch, b_batch).map_err(|_| mismatch())?;
    let nb = numel(&batch);
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); nb * m * n];

    // a flat [.., m, k] against a shared [k, n] collapses into one product
    if b_batch.iter().all(|&d| d == 1) && !a_t && batch == a_batch {
        T::gemm(nb * m, k, n, &a.data, false, &b.data, b_t, &mut out, false);
        return Ok(Tensor { shape: out_shape, data: out });
    }
    let sa = broadcast_strides(a_batch, &batch);
    let sb = broadcast_strides(b_batch, &batch);
    let (ma, mb) = (m * k, k * n);
    let mut offsets = Vec::with_capacity(nb);
    shape::walk(&batch, [&sa, &sb], |pos, [oa, ob]| offsets.push((pos, oa, ob)));
    if batch.is_empty() {
        offsets = vec![(0, 0, 0)];
    }
    for (pos, oa, ob) in offsets {
        T::gemm(
            m,
            k,
            n,
            &a.data[oa * ma..(oa + 1) * ma],
            a_t,
            &b.data[ob * mb..(ob + 1) * mb],
            b_t,
            &mut out[pos * m * n..(pos + 1) * m * n],
            false,
        );
    }
    Ok(Tensor { shape: out_shape, data: out })
}
