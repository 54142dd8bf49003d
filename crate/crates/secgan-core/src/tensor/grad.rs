//! Reverse-mode differentiation. VJPs are built with ordinary graph ops, so
//! the returned gradients are themselves differentiable nodes.

use super::{Graph, Op, Var};

impl Graph {
    /// Gradients of scalar `y` with respect to each of `wrt`.
    ///
    /// Nodes `y` does not depend on get a zero gradient of matching shape.
    /// The traversal only expands nodes on a path from some `wrt` entry up to
    /// `y`, so unrelated parameters cost nothing.
    pub fn grad(&self, y: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(
            self.shape(y).iter().product::<usize>(),
            1,
            "grad expects a scalar objective"
        );
        let n = y.0 + 1;

        // useful[v]: v is wrt itself or (transitively) consumes a wrt node.
        let mut useful = vec![false; n];
        for w in wrt {
            assert!(
                self.requires_grad(*w),
                "requested gradient of a node that does not require grad"
            );
            if w.0 < n {
                useful[w.0] = true;
            }
        }
        for id in 0..n {
            if useful[id] {
                continue;
            }
            let op = self.op(Var(id));
            useful[id] = op_inputs(&op).iter().any(|v| useful[v.0]);
        }

        let mut slot: Vec<Option<Var>> = vec![None; n];
        if useful[y.0] {
            slot[y.0] = Some(self.ones_like(y));
        }
        for id in (0..n).rev() {
            let Some(g) = slot[id] else { continue };
            let op = self.op(Var(id));
            self.backprop_one(&op, Var(id), g, &mut slot, &useful);
        }

        wrt.iter()
            .map(|w| {
                if w.0 < n {
                    slot[w.0].unwrap_or_else(|| self.zeros_like(*w))
                } else {
                    self.zeros_like(*w)
                }
            })
            .collect()
    }

    fn accumulate(&self, slot: &mut [Option<Var>], target: Var, piece: Var) {
        slot[target.0] = Some(match slot[target.0] {
            None => piece,
            Some(acc) => self.add(acc, piece),
        });
    }

    /// Propagate `g` (gradient at `out`) into the inputs of `op`.
    fn backprop_one(
        &self,
        op: &Op,
        out: Var,
        g: Var,
        slot: &mut [Option<Var>],
        useful: &[bool],
    ) {
        let want = |v: Var| useful[v.0] && self.requires_grad(v);
        match *op {
            Op::Leaf
            | Op::Detach(_)
            | Op::LeakyMask(_)
            | Op::RangeMask(_)
            | Op::SignMask(_)
            | Op::MaxC(_)
            | Op::ArgmaxOneHotC(_) => {}
            Op::Add(a, b) => {
                if want(a) {
                    self.accumulate(slot, a, g);
                }
                if want(b) {
                    self.accumulate(slot, b, g);
                }
            }
            Op::Neg(x) => {
                if want(x) {
                    let p = self.neg(g);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let p = self.mul(g, b);
                    self.accumulate(slot, a, p);
                }
                if want(b) {
                    let p = self.mul(g, a);
                    self.accumulate(slot, b, p);
                }
            }
            Op::ScalarMul(x, c) => {
                if want(x) {
                    let p = self.scalar_mul(g, c);
                    self.accumulate(slot, x, p);
                }
            }
            Op::ScalarAdd(x) => {
                if want(x) {
                    self.accumulate(slot, x, g);
                }
            }
            Op::Recip(x) => {
                if want(x) {
                    // d(1/x) = -y^2
                    let yy = self.mul(out, out);
                    let p = self.mul(g, yy);
                    let p = self.neg(p);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Log(x) => {
                if want(x) {
                    let r = self.recip(x);
                    let p = self.mul(g, r);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Exp(x) => {
                if want(x) {
                    let p = self.mul(g, out);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Sqrt(x) => {
                if want(x) {
                    // d sqrt = 0.5 / y
                    let r = self.recip(out);
                    let r = self.scalar_mul(r, 0.5);
                    let p = self.mul(g, r);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Tanh(x) => {
                if want(x) {
                    let yy = self.mul(out, out);
                    let d = self.scalar_add(self.neg(yy), 1.0);
                    let p = self.mul(g, d);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Sigmoid(x) => {
                if want(x) {
                    let one_minus = self.scalar_add(self.neg(out), 1.0);
                    let d = self.mul(out, one_minus);
                    let p = self.mul(g, d);
                    self.accumulate(slot, x, p);
                }
            }
            Op::LeakyRelu(x, slope) => {
                if want(x) {
                    let m = self.leaky_mask(x, slope);
                    let p = self.mul(g, m);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Clamp(x, lo, hi) => {
                if want(x) {
                    let m = self.range_mask(x, lo, hi);
                    let p = self.mul(g, m);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Abs(x) => {
                if want(x) {
                    let m = self.sign_mask(x);
                    let p = self.mul(g, m);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Sum(x) => {
                if want(x) {
                    let shape = self.shape(x);
                    let p = self.broadcast(g, &shape);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Broadcast(x) => {
                if want(x) {
                    let in_shape = self.shape(x);
                    let out_shape = self.shape(out);
                    let axes: Vec<usize> = (0..in_shape.len())
                        .filter(|&d| in_shape[d] == 1 && out_shape[d] != 1)
                        .collect();
                    let p = if axes.is_empty() { g } else { self.sum_axes(g, &axes) };
                    self.accumulate(slot, x, p);
                }
            }
            Op::Reshape(x) => {
                if want(x) {
                    let shape = self.shape(x);
                    let p = self.reshape(g, &shape);
                    self.accumulate(slot, x, p);
                }
            }
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b);
                    let p = self.matmul(g, bt);
                    self.accumulate(slot, a, p);
                }
                if want(b) {
                    let at = self.transpose(a);
                    let p = self.matmul(at, g);
                    self.accumulate(slot, b, p);
                }
            }
            Op::Transpose(x) => {
                if want(x) {
                    let p = self.transpose(g);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Im2col(x, geom) => {
                if want(x) {
                    let p = self.col2im(g, geom);
                    self.accumulate(slot, x, p);
                }
            }
            Op::Col2im(x, geom) => {
                if want(x) {
                    let p = self.im2col(g, geom);
                    self.accumulate(slot, x, p);
                }
            }
            Op::RowsToNchw(x) => {
                if want(x) {
                    let p = self.nchw_to_rows(g);
                    self.accumulate(slot, x, p);
                }
            }
            Op::NchwToRows(x) => {
                if want(x) {
                    let s = self.shape(x);
                    let p = self.rows_to_nchw(g, [s[0], s[1], s[2], s[3]]);
                    self.accumulate(slot, x, p);
                }
            }
            Op::ConcatC(a, b) => {
                let ca = self.shape(a)[1];
                let cb = self.shape(b)[1];
                if want(a) {
                    let p = self.slice_c(g, 0, ca);
                    self.accumulate(slot, a, p);
                }
                if want(b) {
                    let p = self.slice_c(g, ca, ca + cb);
                    self.accumulate(slot, b, p);
                }
            }
            Op::SliceC(x, from, to) => {
                if want(x) {
                    let c = self.shape(x)[1];
                    let p = self.pad_c(g, from, c - to);
                    self.accumulate(slot, x, p);
                }
            }
            Op::PadC(x, before) => {
                if want(x) {
                    let c = self.shape(x)[1];
                    let p = self.slice_c(g, before, before + c);
                    self.accumulate(slot, x, p);
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::ConcatC(a, b) => vec![a, b],
        Op::Neg(x)
        | Op::ScalarMul(x, _)
        | Op::ScalarAdd(x)
        | Op::Recip(x)
        | Op::Log(x)
        | Op::Exp(x)
        | Op::Sqrt(x)
        | Op::Tanh(x)
        | Op::Sigmoid(x)
        | Op::LeakyRelu(x, _)
        | Op::LeakyMask(x)
        | Op::Clamp(x, _, _)
        | Op::RangeMask(x)
        | Op::Abs(x)
        | Op::SignMask(x)
        | Op::Sum(x)
        | Op::Broadcast(x)
        | Op::Reshape(x)
        | Op::Transpose(x)
        | Op::Im2col(x, _)
        | Op::Col2im(x, _)
        | Op::RowsToNchw(x)
        | Op::NchwToRows(x)
        | Op::SliceC(x, _, _)
        | Op::PadC(x, _)
        | Op::Detach(x)
        | Op::MaxC(x)
        | Op::ArgmaxOneHotC(x) => vec![x],
    }
}
