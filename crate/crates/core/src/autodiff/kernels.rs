//! Dense loops shared by forward and backward passes.

use crate::scalar::Scalar;
use crate::tensor::strides;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent accumulators, so the loop vectorises.
/// The summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (x, y) in ra.iter().zip(rb) {
        acc += *x * *y;
    }
    acc
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// Geometry of a temporal convolution over one batch element.
#[derive(Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub t: usize,
    /// Spatial positions per frame.
    pub s: usize,
    pub k: usize,
    pub stride: usize,
    pub t_out: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k
    }

    pub fn cols(&self) -> usize {
        self.t_out * self.s
    }
}

/// Unfolds `x[C_in×T×S]` into patches `[(C_in·k) × (T_out·S)]`, so the
/// convolution becomes one matrix product with the `C_out × (C_in·k)` kernel.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: ConvGeom, cols: &mut [T]) {
    let (n, s) = (g.cols(), g.s);
    for c in 0..g.cin {
        let xc = &x[c * g.t * s..(c + 1) * g.t * s];
        for kk in 0..g.k {
            let row = &mut cols[(c * g.k + kk) * n..(c * g.k + kk + 1) * n];
            for tp in 0..g.t_out {
                let src = (tp * g.stride + kk) * s;
                row[tp * s..(tp + 1) * s].copy_from_slice(&xc[src..src + s]);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `x`.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: ConvGeom, x: &mut [T]) {
    let (n, s) = (g.cols(), g.s);
    for c in 0..g.cin {
        let xc = &mut x[c * g.t * s..(c + 1) * g.t * s];
        for kk in 0..g.k {
            let row = &cols[(c * g.k + kk) * n..(c * g.k + kk + 1) * n];
            for tp in 0..g.t_out {
                let dst = (tp * g.stride + kk) * s;
                for (d, &v) in xc[dst..dst + s].iter_mut().zip(&row[tp * s..(tp + 1) * s]) {
                    *d += v;
                }
            }
        }
    }
}

/// For every flat index of a tensor with `out_shape`, the flat source index
/// obtained by walking `src_strides` (zero strides broadcast).
pub(crate) fn strided_map(out_shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let Some((&inner, outer)) = out_shape.split_last() else {
        return vec![0];
    };
    if total == 0 {
        return map;
    }
    // Rows of the innermost axis are emitted as runs; only the outer axes
    // need the odometer.
    let step = src_strides[outer.len()];
    let mut idx = vec![0usize; outer.len()];
    let mut base = 0usize;
    for _ in 0..total / inner {
        match step {
            0 => map.extend(std::iter::repeat_n(base, inner)),
            1 => map.extend(base..base + inner),
            _ => map.extend((0..inner).map(|j| base + j * step)),
        }
        for ax in (0..outer.len()).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < outer[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Source-index map that broadcasts `in_shape` (same rank, dims equal or 1)
/// up to `out_shape`.
pub(crate) fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let st = strides(in_shape);
    let src: Vec<usize> = in_shape
        .iter()
        .zip(&st)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    strided_map(out_shape, &src)
}

/// Same-rank broadcast of two shapes, or `None` if incompatible.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Index map for an operand: `None` when it already has the output shape.
pub(crate) fn operand_map(shape: &[usize], out_shape: &[usize]) -> Option<Vec<usize>> {
    if shape == out_shape {
        None
    } else {
        Some(broadcast_map(shape, out_shape))
    }
}

#[inline]
pub(crate) fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}
