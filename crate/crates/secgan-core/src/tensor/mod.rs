//! A small define-by-run autodiff tape over `ndarray` f32 tensors.
//!
//! Every op's backward is itself expressed in tape ops, so gradients are
//! ordinary graph values and can be differentiated again. That is what lets
//! the gradient-penalty term backpropagate through the critic's input
//! gradient without any special casing.
//!
//! Values are evaluated eagerly at node creation; a [`Graph`] lives for one
//! training step and is dropped afterwards. Parameters enter as leaves.

mod grad;
mod kernels;

pub use kernels::ConvGeom;

use ndarray::{ArrayD, IxDyn};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Neg(Var),
    Mul(Var, Var),
    ScalarMul(Var, f32),
    ScalarAdd(Var),
    Recip(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f32),
    /// d/dx of leaky relu as a constant mask; not differentiable further.
    LeakyMask(Var),
    Clamp(Var, f32, f32),
    /// 1 inside [lo, hi], 0 outside; not differentiable further.
    RangeMask(Var),
    Abs(Var),
    /// sign(x) with sign(0) = 0; not differentiable further.
    SignMask(Var),
    /// Sum over the given axes, kept as size-1 dims. f64 accumulation.
    Sum(Var),
    Broadcast(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Im2col(Var, ConvGeom),
    Col2im(Var, ConvGeom),
    /// [B*H*W, C] -> [B, C, H, W]
    RowsToNchw(Var),
    /// [B, C, H, W] -> [B*H*W, C]
    NchwToRows(Var),
    /// Concatenate along axis 1.
    ConcatC(Var, Var),
    /// Slice channels [from, to) along axis 1.
    SliceC(Var, usize, usize),
    /// Zero-pad along axis 1: `before` channels in front, `after` behind.
    PadC(Var, usize),
    Detach(Var),
    /// Channel-wise max, keepdims; gradient intentionally blocked (used for
    /// the softmax shift, which is gradient-free by shift invariance).
    MaxC(Var),
    /// Per-pixel argmax indicator over axis 1; ties go to the lowest index.
    ArgmaxOneHotC(Var),
}

struct Node {
    value: ArrayD<f32>,
    op: Op,
    requires_grad: bool,
}

/// Append-only autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: std::cell::RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f32>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn value_ref<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f32>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[v.0].value)
    }

    pub(crate) fn op(&self, v: Var) -> Op {
        self.nodes.borrow()[v.0].op.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value_ref(v, |a| a.shape().to_vec())
    }

    /// Copy a node's value out of the tape.
    pub fn value(&self, v: Var) -> ArrayD<f32> {
        self.value_ref(v, |a| a.clone())
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f32 {
        self.value_ref(v, |a| {
            assert_eq!(a.len(), 1, "expected scalar, got shape {:?}", a.shape());
            *a.iter().next().unwrap()
        })
    }

    // ---- leaves ----

    pub fn leaf(&self, value: ArrayD<f32>, requires_grad: bool) -> Var {
        assert!(value.is_standard_layout());
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: ArrayD<f32>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f32) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    pub fn zeros_like(&self, v: Var) -> Var {
        let shape = self.shape(v);
        self.constant(ArrayD::zeros(IxDyn(&shape)))
    }

    pub fn ones_like(&self, v: Var) -> Var {
        let shape = self.shape(v);
        self.constant(ArrayD::from_elem(IxDyn(&shape), 1.0))
    }

    // ---- elementwise ----

    fn unary(&self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value = self.value_ref(x, |a| a.mapv(&f));
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn unary_nograd(&self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value = self.value_ref(x, |a| a.mapv(&f));
        self.push(value, op, false)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value_ref(a, |va| self.value_ref(b, |vb| {
            assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
            va + vb
        }));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.value_ref(a, |va| self.value_ref(b, |vb| {
            assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
            va * vb
        }));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scalar_mul(&self, x: Var, c: f32) -> Var {
        self.unary(x, Op::ScalarMul(x, c), |v| v * c)
    }

    pub fn scalar_add(&self, x: Var, c: f32) -> Var {
        self.unary(x, Op::ScalarAdd(x), |v| v + c)
    }

    pub fn recip(&self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn leaky_relu(&self, x: Var, slope: f32) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v >= 0.0 { v } else { slope * v })
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub(crate) fn leaky_mask(&self, x: Var, slope: f32) -> Var {
        self.unary_nograd(x, Op::LeakyMask(x), |v| if v >= 0.0 { 1.0 } else { slope })
    }

    pub fn clamp(&self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub(crate) fn range_mask(&self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary_nograd(x, Op::RangeMask(x), |v| if v >= lo && v <= hi { 1.0 } else { 0.0 })
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub(crate) fn sign_mask(&self, x: Var) -> Var {
        self.unary_nograd(x, Op::SignMask(x), |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x);
        self.push(value, Op::Detach(x), false)
    }

    // ---- reductions / shape ----

    pub fn sum_axes(&self, x: Var, axes: &[usize]) -> Var {
        let value = self.value_ref(x, |a| kernels::sum_axes_keepdims(a, axes));
        let rg = self.requires_grad(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Sum of all elements, as a `[1]`-shaped node.
    pub fn sum_all(&self, x: Var) -> Var {
        let ndim = self.shape(x).len();
        let axes: Vec<usize> = (0..ndim).collect();
        let s = self.sum_axes(x, &axes);
        self.reshape(s, &[1])
    }

    /// Mean of all elements, as a `[1]`-shaped node.
    pub fn mean_all(&self, x: Var) -> Var {
        let n: usize = self.shape(x).iter().product();
        let s = self.sum_all(x);
        self.scalar_mul(s, 1.0 / n as f32)
    }

    pub fn mean_axes(&self, x: Var, axes: &[usize]) -> Var {
        let shape = self.shape(x);
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        let s = self.sum_axes(x, axes);
        self.scalar_mul(s, 1.0 / n as f32)
    }

    pub fn broadcast(&self, x: Var, shape: &[usize]) -> Var {
        let value = self.value_ref(x, |a| kernels::broadcast_to(a, shape));
        let rg = self.requires_grad(x);
        self.push(value, Op::Broadcast(x), rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = self.value_ref(x, |a| {
            let n: usize = shape.iter().product();
            assert_eq!(a.len(), n, "reshape {:?} -> {:?}", a.shape(), shape);
            a.clone().into_shape_with_order(IxDyn(shape)).unwrap()
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::Reshape(x), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = self.value_ref(a, |va| self.value_ref(b, |vb| {
            assert_eq!(va.ndim(), 2, "matmul lhs must be 2-d");
            assert_eq!(vb.ndim(), 2, "matmul rhs must be 2-d");
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let (k2, n) = (vb.shape()[0], vb.shape()[1]);
            assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
            let c = kernels::matmul(va.as_slice().unwrap(), vb.as_slice().unwrap(), m, k, n);
            ArrayD::from_shape_vec(IxDyn(&[m, n]), c).unwrap()
        }));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&self, x: Var) -> Var {
        let value = self.value_ref(x, |a| {
            assert_eq!(a.ndim(), 2);
            a.t().as_standard_layout().to_owned().into_dyn()
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::Transpose(x), rg)
    }

    // ---- convolution building blocks ----

    pub fn im2col(&self, x: Var, geom: ConvGeom) -> Var {
        let value = self.value_ref(x, |a| {
            assert_eq!(a.shape(), &[geom.batch, geom.channels, geom.h, geom.w]);
            let cols = kernels::im2col(a.as_slice().unwrap(), &geom);
            ArrayD::from_shape_vec(IxDyn(&[geom.rows(), geom.cols()]), cols).unwrap()
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::Im2col(x, geom), rg)
    }

    pub fn col2im(&self, x: Var, geom: ConvGeom) -> Var {
        let value = self.value_ref(x, |a| {
            assert_eq!(a.shape(), &[geom.rows(), geom.cols()]);
            let im = kernels::col2im(a.as_slice().unwrap(), &geom);
            ArrayD::from_shape_vec(IxDyn(&[geom.batch, geom.channels, geom.h, geom.w]), im)
                .unwrap()
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::Col2im(x, geom), rg)
    }

    pub fn rows_to_nchw(&self, x: Var, dims: [usize; 4]) -> Var {
        let [b, c, h, w] = dims;
        let value = self.value_ref(x, |a| {
            assert_eq!(a.shape(), &[b * h * w, c]);
            let v = kernels::rows_to_nchw(a.as_slice().unwrap(), b, c, h, w);
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), v).unwrap()
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::RowsToNchw(x), rg)
    }

    pub fn nchw_to_rows(&self, x: Var) -> Var {
        let value = self.value_ref(x, |a| {
            assert_eq!(a.ndim(), 4);
            let (b, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
            let v = kernels::nchw_to_rows(a.as_slice().unwrap(), b, c, h, w);
            ArrayD::from_shape_vec(IxDyn(&[b * h * w, c]), v).unwrap()
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::NchwToRows(x), rg)
    }

    // ---- channel ops ----

    pub fn concat_c(&self, a: Var, b: Var) -> Var {
        let value = self.value_ref(a, |va| self.value_ref(b, |vb| {
            assert!(va.ndim() >= 2 && va.ndim() == vb.ndim());
            for d in 0..va.ndim() {
                if d != 1 {
                    assert_eq!(va.shape()[d], vb.shape()[d], "concat dim {d}");
                }
            }
            ndarray::concatenate(ndarray::Axis(1), &[va.view(), vb.view()])
                .unwrap()
                .as_standard_layout()
                .to_owned()
        }));
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, Op::ConcatC(a, b), rg)
    }

    pub fn slice_c(&self, x: Var, from: usize, to: usize) -> Var {
        let value = self.value_ref(x, |a| {
            assert!(from < to && to <= a.shape()[1]);
            a.slice_axis(ndarray::Axis(1), ndarray::Slice::from(from..to))
                .as_standard_layout()
                .to_owned()
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::SliceC(x, from, to), rg)
    }

    pub fn pad_c(&self, x: Var, before: usize, after: usize) -> Var {
        let value = self.value_ref(x, |a| {
            let mut shape = a.shape().to_vec();
            shape[1] += before + after;
            let mut out = ArrayD::zeros(IxDyn(&shape));
            out.slice_axis_mut(
                ndarray::Axis(1),
                ndarray::Slice::from(before..before + a.shape()[1]),
            )
            .assign(a);
            out
        });
        let rg = self.requires_grad(x);
        self.push(value, Op::PadC(x, before), rg)
    }

    /// Channel-max keepdims; used only as the gradient-free softmax shift.
    pub fn max_c(&self, x: Var) -> Var {
        let value = self.value_ref(x, |a| {
            assert!(a.ndim() >= 2);
            let mut shape = a.shape().to_vec();
            let c = shape[1];
            shape[1] = 1;
            let inner: usize = a.shape()[2..].iter().product();
            let outer = a.shape()[0];
            let src = a.as_slice().unwrap();
            let mut out = vec![f32::NEG_INFINITY; outer * inner];
            for b in 0..outer {
                for ci in 0..c {
                    let base = (b * c + ci) * inner;
                    for p in 0..inner {
                        let v = src[base + p];
                        let o = b * inner + p;
                        if v > out[o] {
                            out[o] = v;
                        }
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
        });
        self.push(value, Op::MaxC(x), false)
    }

    /// Per-pixel argmax one-hot over axis 1; ties break to the lowest index.
    /// The result does not carry gradient.
    pub fn argmax_one_hot_c(&self, x: Var) -> Var {
        let value = self.value_ref(x, |a| {
            assert!(a.ndim() >= 2);
            let c = a.shape()[1];
            let outer = a.shape()[0];
            let inner: usize = a.shape()[2..].iter().product();
            let src = a.as_slice().unwrap();
            let mut out = vec![0.0f32; a.len()];
            for b in 0..outer {
                for p in 0..inner {
                    let mut best = 0usize;
                    let mut best_v = src[(b * c) * inner + p];
                    for ci in 1..c {
                        let v = src[(b * c + ci) * inner + p];
                        if v > best_v {
                            best_v = v;
                            best = ci;
                        }
                    }
                    out[(b * c + best) * inner + p] = 1.0;
                }
            }
            ArrayD::from_shape_vec(IxDyn(a.shape()), out).unwrap()
        });
        self.push(value, Op::ArgmaxOneHotC(x), false)
    }

    /// Softmax over axis 1, numerically shifted by the (gradient-free) max.
    pub fn softmax_c(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let m = self.max_c(x);
        let mb = self.broadcast(m, &shape);
        let z = self.sub(x, mb);
        let e = self.exp(z);
        let s = self.sum_axes(e, &[1]);
        let r = self.recip(s);
        let rb = self.broadcast(r, &shape);
        self.mul(e, rb)
    }
}

#[cfg(test)]
mod tests;
