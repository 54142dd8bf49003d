//! Raw array kernels behind the graph ops: GEMM, im2col/col2im, layout permutes.
//!
//! Everything here is deterministic: parallel splits are pure functions of the
//! operand shapes, never of the thread count, and each output element is
//! written by exactly one task.

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

/// Geometry of a 2-D convolution in NCHW layout.
///
/// `h_out`/`w_out` are derived and must divide exactly; callers validate
/// resolutions before constructing one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        channels: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1 && kh >= 1 && kw >= 1);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        assert!(
            (h + 2 * pad - kh) % stride == 0 && (w + 2 * pad - kw) % stride == 0,
            "conv geometry does not divide exactly: h={h} w={w} k={kh} s={stride} p={pad}"
        );
        Self { batch, channels, h, w, kh, kw, stride, pad }
    }

    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the patch matrix: batch * output positions.
    pub fn rows(&self) -> usize {
        self.batch * self.h_out() * self.w_out()
    }

    /// Columns of the patch matrix: channels * kernel area.
    pub fn cols(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// C = A (m x k) * B (k x n), f32, deterministic row-chunked GEMM.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut c = vec![0.0f32; m * n];
    // Chunk size depends only on the shape so results are bit-stable.
    let chunk_rows = if m >= 256 && k * n >= 4096 { 64 } else { m.max(1) };
    c.par_chunks_mut(chunk_rows * n)
        .enumerate()
        .for_each(|(ci, c_chunk)| {
            let row0 = ci * chunk_rows;
            let rows = c_chunk.len() / n;
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.as_ptr().add(row0 * k),
                    k as isize,
                    1,
                    b.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    c
}

/// [B, C, H, W] -> [B*Ho*Wo, C*kh*kw] patch matrix; out-of-bounds reads are 0.
pub fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let cols = g.cols();
    let mut out = vec![0.0f32; g.rows() * cols];
    let per_batch_rows = ho * wo;
    out.par_chunks_mut(per_batch_rows * cols)
        .enumerate()
        .for_each(|(b, chunk)| {
            let xin = &x[b * g.channels * g.h * g.w..(b + 1) * g.channels * g.h * g.w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (oy * wo + ox) * cols;
                    let mut col = 0usize;
                    for c in 0..g.channels {
                        let plane = &xin[c * g.h * g.w..(c + 1) * g.h * g.w];
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                col += g.kw;
                                continue;
                            }
                            let base = iy as usize * g.w;
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < g.w as isize {
                                    chunk[row + col] = plane[base + ix as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Adjoint of [`im2col`]: [B*Ho*Wo, C*kh*kw] -> [B, C, H, W] by scatter-add.
pub fn col2im(cols_in: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let cols = g.cols();
    assert_eq!(cols_in.len(), g.rows() * cols);
    let mut out = vec![0.0f32; g.batch * g.channels * g.h * g.w];
    let per_batch = g.channels * g.h * g.w;
    out.par_chunks_mut(per_batch).enumerate().for_each(|(b, chunk)| {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                let mut col = 0usize;
                for c in 0..g.channels {
                    let plane = &mut chunk[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            col += g.kw;
                            continue;
                        }
                        let base = iy as usize * g.w;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[base + ix as usize] += cols_in[row + col];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    });
    out
}

/// [B*H*W, C] row matrix (batch-major, then spatial) -> [B, C, H, W].
pub fn rows_to_nchw(m: &[f32], b: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    assert_eq!(m.len(), b * h * w * c);
    let mut out = vec![0.0f32; b * c * h * w];
    let spatial = h * w;
    for bi in 0..b {
        for p in 0..spatial {
            let row = (bi * spatial + p) * c;
            for ci in 0..c {
                out[(bi * c + ci) * spatial + p] = m[row + ci];
            }
        }
    }
    out
}

/// [B, C, H, W] -> [B*H*W, C] row matrix; inverse of [`rows_to_nchw`].
pub fn nchw_to_rows(x: &[f32], b: usize, c: usize, h: usize, w: usize) -> Vec<f32> {
    assert_eq!(x.len(), b * c * h * w);
    let mut out = vec![0.0f32; b * h * w * c];
    let spatial = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * spatial..(bi * c + ci + 1) * spatial];
            for p in 0..spatial {
                out[(bi * spatial + p) * c + ci] = plane[p];
            }
        }
    }
    out
}

/// Reduce `x` over `axes` (kept as size-1 dims), accumulating in f64.
pub fn sum_axes_keepdims(x: &ArrayD<f32>, axes: &[usize]) -> ArrayD<f32> {
    let in_shape = x.shape().to_vec();
    let ndim = in_shape.len();
    let mut reduce = vec![false; ndim];
    for &a in axes {
        assert!(a < ndim);
        reduce[a] = true;
    }
    let mut out_shape = in_shape.clone();
    for (d, r) in reduce.iter().enumerate() {
        if *r {
            out_shape[d] = 1;
        }
    }
    let data = x.as_slice().expect("standard layout");

    // full reduction
    if reduce.iter().all(|&r| r) {
        let total: f64 = data.iter().map(|&v| v as f64).sum();
        return ArrayD::from_shape_vec(IxDyn(&out_shape), vec![total as f32]).unwrap();
    }

    // trailing-block reduction (e.g. spatial [2,3] of NCHW, or [1,2,3]):
    // reduced axes form a contiguous suffix
    let first_reduced = reduce.iter().position(|&r| r);
    if let Some(f) = first_reduced {
        if reduce[f..].iter().all(|&r| r) {
            let outer: usize = in_shape[..f].iter().product();
            let block: usize = in_shape[f..].iter().product();
            let out: Vec<f32> = (0..outer)
                .map(|o| {
                    data[o * block..(o + 1) * block]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>() as f32
                })
                .collect();
            return ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        }
    }

    // exactly one reduced axis (channel sums [1] of NCHW)
    if reduce.iter().filter(|&&r| r).count() == 1 {
        let axis = reduce.iter().position(|&r| r).unwrap();
        let outer: usize = in_shape[..axis].iter().product();
        let red = in_shape[axis];
        let inner: usize = in_shape[axis + 1..].iter().product();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for m in 0..red {
                let base = (o * red + m) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    acc[dst + i] += data[base + i] as f64;
                }
            }
        }
        let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        return ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
    }

    // kept axes form one contiguous run (batch-norm [0,2,3] reduces around a
    // kept middle): collapse to outer x mid x inner with mid kept
    let kept: Vec<usize> = (0..ndim).filter(|&d| !reduce[d]).collect();
    let contiguous_kept = kept.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous_kept {
        let k0 = kept[0];
        let k1 = *kept.last().unwrap();
        let outer: usize = in_shape[..k0].iter().product();
        let mid: usize = in_shape[k0..=k1].iter().product();
        let inner: usize = in_shape[k1 + 1..].iter().product();
        let mut acc = vec![0.0f64; mid];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let mut s = 0.0f64;
                for &v in &data[base..base + inner] {
                    s += v as f64;
                }
                acc[m] += s;
            }
        }
        let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        return ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap();
    }

    // generic fallback
    let out_strides = row_major_strides(&out_shape);
    let out_len: usize = out_shape.iter().product();
    let mut acc = vec![0.0f64; out_len];
    let mut idx = vec![0usize; ndim];
    for &v in data {
        let mut o = 0usize;
        for d in 0..ndim {
            if out_shape[d] != 1 {
                o += idx[d] * out_strides[d];
            }
        }
        acc[o] += v as f64;
        for d in (0..ndim).rev() {
            idx[d] += 1;
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap()
}

/// Broadcast `x` to `shape`; size-1 dims of `x` expand, others must match.
pub fn broadcast_to(x: &ArrayD<f32>, shape: &[usize]) -> ArrayD<f32> {
    assert_eq!(x.ndim(), shape.len(), "broadcast requires equal ndim");
    let ndim = shape.len();
    for (d, (&have, &want)) in x.shape().iter().zip(shape.iter()).enumerate() {
        assert!(have == want || have == 1, "cannot broadcast dim {d}: {have} -> {want}");
    }
    let src = x.as_slice().expect("standard layout");

    // single expanded middle axis (e.g. channel: [B,1,H,W] -> [B,C,H,W])
    let expanded: Vec<usize> =
        (0..ndim).filter(|&d| x.shape()[d] == 1 && shape[d] != 1).collect();
    if expanded.len() == 1 {
        let e = expanded[0];
        if (0..ndim).all(|d| d == e || x.shape()[d] == shape[d]) {
            let outer: usize = shape[..e].iter().product();
            let rep = shape[e];
            let inner: usize = shape[e + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * rep * inner);
            for o in 0..outer {
                let block = &src[o * inner..(o + 1) * inner];
                for _ in 0..rep {
                    out.extend_from_slice(block);
                }
            }
            return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        }
    }

    // leading expansion only: tile the whole source block
    let first_kept = (0..ndim).find(|&d| x.shape()[d] == shape[d] && shape[d] != 1);
    let expand_dims: Vec<usize> =
        (0..ndim).filter(|&d| x.shape()[d] == 1 && shape[d] != 1).collect();
    if let Some(f) = first_kept {
        if expand_dims.iter().all(|&d| d < f) {
            let reps: usize = shape[..f].iter().product();
            let mut out = Vec::with_capacity(reps * src.len());
            for _ in 0..reps {
                out.extend_from_slice(src);
            }
            return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        }
        // trailing expansion only: repeat each scalar over the tail block
        let last_kept = (0..ndim).rev().find(|&d| x.shape()[d] == shape[d] && shape[d] != 1);
        if let Some(l) = last_kept {
            if expand_dims.iter().all(|&d| d > l) {
                let block: usize = shape[l + 1..].iter().product();
                let mut out = Vec::with_capacity(src.len() * block);
                for &v in src {
                    out.extend(std::iter::repeat(v).take(block));
                }
                return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
            }
            // sandwich: leading reps, kept middle run, trailing block
            let mid_run = (f..=l).all(|d| x.shape()[d] == shape[d]);
            if mid_run && expand_dims.iter().all(|&d| d < f || d > l) {
                let reps: usize = shape[..f].iter().product();
                let mid: usize = shape[f..=l].iter().product();
                let block: usize = shape[l + 1..].iter().product();
                let mut out = Vec::with_capacity(reps * mid * block);
                for _ in 0..reps {
                    for m in 0..mid {
                        let v = src[m];
                        out.extend(std::iter::repeat(v).take(block));
                    }
                }
                return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
            }
        }
    } else {
        // pure fill from a single scalar (or all dims expanded)
        if src.len() == 1 {
            return ArrayD::from_elem(IxDyn(shape), src[0]);
        }
    }

    x.broadcast(IxDyn(shape)).expect("validated broadcast").to_owned()
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        s[d] = acc;
        acc *= shape[d];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, stride 1, no pad: patch matrix is just a permute.
        let g = ConvGeom::new(1, 2, 2, 2, 1, 1, 1, 0);
        let x: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let cols = im2col(&x, &g);
        // rows are spatial positions, columns are channels
        assert_eq!(cols, vec![0., 4., 1., 5., 2., 6., 3., 7.]);
        let back = col2im(&cols, &g);
        assert_eq!(back, x);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish data
        let g = ConvGeom::new(2, 3, 4, 4, 3, 3, 1, 1);
        let x: Vec<f32> = (0..g.batch * g.channels * g.h * g.w)
            .map(|i| ((i * 37 + 11) % 17) as f32 * 0.25 - 2.0)
            .collect();
        let y: Vec<f32> =
            (0..g.rows() * g.cols()).map(|i| ((i * 53 + 7) % 23) as f32 * 0.125 - 1.0).collect();
        let cx = im2col(&x, &g);
        let ay = col2im(&y, &g);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&ay).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn nchw_roundtrip() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let rows = nchw_to_rows(&x, 2, 3, 2, 2);
        let back = rows_to_nchw(&rows, 2, 3, 2, 2);
        assert_eq!(back, x);
    }

    #[test]
    fn sum_axes_f64_accumulation() {
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = sum_axes_keepdims(&x, &[1]);
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.as_slice().unwrap(), &[6., 15.]);
        let s0 = sum_axes_keepdims(&x, &[0, 1]);
        assert_eq!(s0.shape(), &[1, 1]);
        assert_eq!(s0.as_slice().unwrap(), &[21.]);
    }
}
