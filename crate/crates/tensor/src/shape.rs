//! Shape arithmetic shared by the kernels: broadcasting, strides and the
//! odometer walk used for strided element access.

use crate::error::{Result, TensorError};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Trailing-axis aligned broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed as broadcast into `out` (zero on stretched axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 && out[i] != 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, calling `f` with the
/// flat output position and the matching offsets under each stride set.
///
/// The innermost axis is walked in a tight loop; outer axes use an odometer.
pub fn walk<const N: usize>(shape: &[usize], strides: [&[usize]; N], mut f: impl FnMut(usize, [usize; N])) {
    let total = numel(shape);
    if total == 0 {
        return;
    }
    if shape.is_empty() {
        f(0, [0; N]);
        return;
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_strides: [usize; N] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = [0usize; N];
    let mut pos = 0;
    loop {
        let mut offs = base;
        for _ in 0..inner {
            f(pos, offs);
            pos += 1;
            for k in 0..N {
                offs[k] += inner_strides[k];
            }
        }
        // advance the odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            for k in 0..N {
                base[k] += strides[k][axis];
            }
            if idx[axis] < shape[axis] {
                break;
            }
            for k in 0..N {
                base[k] -= strides[k][axis] * shape[axis];
            }
            idx[axis] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Dimension {
            op,
            detail: format!("axis {axis} out of range for rank {}", shape.len()),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}
