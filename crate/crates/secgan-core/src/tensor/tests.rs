use super::*;
use ndarray::{ArrayD, IxDyn};

fn arr(shape: &[usize], data: Vec<f32>) -> ArrayD<f32> {
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn pseudo(shape: &[usize], seed: u64) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let data: Vec<f32> = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32 * 0.8
        })
        .collect();
    arr(shape, data)
}

/// Central finite differences of `f` against the analytic gradient at every
/// coordinate of the single leaf input.
fn gradcheck(shape: &[usize], x0: ArrayD<f32>, f: impl Fn(&Graph, Var) -> Var) {
    let g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let y = f(&g, x);
    let analytic = g.value(g.grad(y, &[x])[0]);

    let h = 1e-3f32;
    let n: usize = shape.iter().product();
    for i in 0..n {
        let mut plus = x0.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        let mut minus = x0.clone();
        minus.as_slice_mut().unwrap()[i] -= h;

        let gp = Graph::new();
        let vp = gp.leaf(plus, false);
        let yp = gp.scalar_value(f(&gp, vp));
        let gm = Graph::new();
        let vm = gm.leaf(minus, false);
        let ym = gm.scalar_value(f(&gm, vm));

        let numeric = (yp as f64 - ym as f64) / (2.0 * h as f64);
        let a = analytic.as_slice().unwrap()[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-2);
        assert!(
            (a - numeric).abs() / denom < 2e-2,
            "coord {i}: analytic {a} vs numeric {numeric}"
        );
    }
}

#[test]
fn gradcheck_elementwise_chain() {
    gradcheck(&[2, 3], pseudo(&[2, 3], 1), |g, x| {
        let t = g.tanh(x);
        let s = g.sigmoid(t);
        let e = g.exp(s);
        let m = g.mul(e, x);
        g.mean_all(m)
    });
}

#[test]
fn gradcheck_log_sqrt_recip() {
    let x0 = pseudo(&[2, 2], 2).mapv(|v| v.abs() + 0.5);
    gradcheck(&[2, 2], x0, |g, x| {
        let l = g.log(x);
        let r = g.recip(x);
        let q = g.sqrt(x);
        let s = g.add(l, r);
        let s = g.add(s, q);
        g.sum_all(s)
    });
}

#[test]
fn gradcheck_leaky_relu_abs() {
    // keep values away from the kinks
    let x0 = pseudo(&[3, 3], 3).mapv(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    gradcheck(&[3, 3], x0, |g, x| {
        let l = g.leaky_relu(x, 0.01);
        let a = g.abs(x);
        let s = g.add(l, a);
        g.sum_all(s)
    });
}

#[test]
fn gradcheck_matmul() {
    gradcheck(&[3, 4], pseudo(&[3, 4], 4), |g, x| {
        let w = g.constant(pseudo(&[4, 2], 5));
        let y = g.matmul(x, w);
        let y2 = g.mul(y, y);
        g.sum_all(y2)
    });
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    gradcheck(&[2, 4, 2, 2], pseudo(&[2, 4, 2, 2], 6), |g, x| {
        let p = g.softmax_c(x);
        let t = g.constant({
            // fixed one-hot target
            let mut t = ArrayD::zeros(IxDyn(&[2, 4, 2, 2]));
            for b in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        t[[b, (b + i + j) % 4, i, j]] = 1.0;
                    }
                }
            }
            t
        });
        let lp = g.log(g.clamp(p, 1e-7, 1.0));
        let prod = g.mul(t, lp);
        let s = g.sum_all(prod);
        g.scalar_mul(s, -1.0 / 8.0)
    });
}

#[test]
fn gradcheck_conv_via_im2col() {
    let geom = ConvGeom::new(2, 2, 4, 4, 3, 3, 1, 1);
    gradcheck(&[2, 2, 4, 4], pseudo(&[2, 2, 4, 4], 7), move |g, x| {
        let w = g.constant(pseudo(&[geom.cols(), 3], 8));
        let cols = g.im2col(x, geom);
        let m = g.matmul(cols, w);
        let y = g.rows_to_nchw(m, [2, 3, 4, 4]);
        let y2 = g.mul(y, y);
        g.mean_all(y2)
    });
}

#[test]
fn gradcheck_strided_conv_weight() {
    // gradient with respect to the weight through the same machinery
    let geom = ConvGeom::new(1, 3, 6, 6, 4, 4, 2, 1);
    gradcheck(&[geom.cols(), 2], pseudo(&[geom.cols(), 2], 9), move |g, w| {
        let x = g.constant(pseudo(&[1, 3, 6, 6], 10));
        let cols = g.im2col(x, geom);
        let m = g.matmul(cols, w);
        let y2 = g.mul(m, m);
        g.mean_all(y2)
    });
}

#[test]
fn gradcheck_concat_slice_pad() {
    gradcheck(&[2, 3, 2, 2], pseudo(&[2, 3, 2, 2], 11), |g, x| {
        let other = g.constant(pseudo(&[2, 2, 2, 2], 12));
        let cat = g.concat_c(x, other);
        let sliced = g.slice_c(cat, 1, 4);
        let padded = g.pad_c(sliced, 1, 0);
        let sq = g.mul(padded, padded);
        g.sum_all(sq)
    });
}

#[test]
fn gradcheck_broadcast_reduction() {
    gradcheck(&[2, 3, 1, 1], pseudo(&[2, 3, 1, 1], 13), |g, x| {
        let b = g.broadcast(x, &[2, 3, 4, 4]);
        let c = g.constant(pseudo(&[2, 3, 4, 4], 14));
        let m = g.mul(b, c);
        let s = g.sum_axes(m, &[0, 2, 3]);
        let sq = g.mul(s, s);
        g.sum_all(sq)
    });
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::new();
    let x = g.leaf(arr(&[2], vec![1.0, 2.0]), true);
    let d = g.detach(x);
    let y = g.mul(d, d);
    let s = g.sum_all(y);
    let gx = g.grad(s, &[x])[0];
    assert_eq!(g.value(gx).as_slice().unwrap(), &[0.0, 0.0]);
}

#[test]
fn argmax_one_hot_ties_to_lowest() {
    let g = Graph::new();
    let x = g.constant(arr(&[1, 3, 1, 1], vec![0.5, 0.5, 0.2]));
    let oh = g.argmax_one_hot_c(x);
    assert_eq!(g.value(oh).as_slice().unwrap(), &[1.0, 0.0, 0.0]);
    assert!(!g.requires_grad(oh));
}

#[test]
fn softmax_sums_to_one() {
    let g = Graph::new();
    let x = g.constant(pseudo(&[2, 12, 3, 3], 15).mapv(|v| v * 4.0));
    let p = g.softmax_c(x);
    let s = g.sum_axes(p, &[1]);
    for &v in g.value(s).iter() {
        assert!((v - 1.0).abs() < 1e-5, "pixel sum {v}");
    }
}

/// Second-order check: with f(x) = sum(x^3) on one coordinate, the "penalty"
/// q(x) = (df/dx)^2 has dq/dx = 2 * f' * f'' = 2 * 3x^2 * 6x = 36 x^3.
#[test]
fn double_backward_cubic() {
    let g = Graph::new();
    let x = g.leaf(arr(&[1], vec![0.7]), true);
    let x3 = g.mul(g.mul(x, x), x);
    let y = g.sum_all(x3);
    let dx = g.grad(y, &[x])[0];
    let q = g.sum_all(g.mul(dx, dx));
    let ddx = g.grad(q, &[x])[0];
    let expected = 36.0f32 * 0.7f32.powi(3);
    let got = g.value(ddx).as_slice().unwrap()[0];
    assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
}

/// Second-order check through the conv machinery: the gradient-penalty
/// pattern with a linear "critic" D(x) = <w, x> has inner gradient w, so the
/// penalty (|w|-1)^2 has zero gradient w.r.t. x and a known gradient w.r.t. w.
#[test]
fn double_backward_linear_critic_penalty() {
    let g = Graph::new();
    let w0 = vec![0.6, -0.8, 0.5, 0.1];
    let w = g.leaf(arr(&[4, 1], w0.clone()), true);
    let x = g.leaf(arr(&[1, 4], vec![0.3, 0.2, -0.1, 0.9]), true);
    let y = g.matmul(x, w);
    let s = g.sum_all(y);
    let gx = g.grad(s, &[x])[0];
    let sq = g.mul(gx, gx);
    let nrm = g.sqrt(g.scalar_add(g.sum_all(sq), 1e-12));
    let d = g.scalar_add(nrm, -1.0);
    let penalty = g.mul(d, d);
    let p = g.sum_all(penalty);

    let grads = g.grad(p, &[x, w]);
    // inner gradient is w itself (independent of x)
    for &v in g.value(grads[0]).iter() {
        assert!(v.abs() < 1e-6);
    }
    // analytic d penalty / d w = 2 (|w| - 1) * w / |w|
    let norm: f32 = w0.iter().map(|v| v * v).sum::<f32>().sqrt();
    let gw = g.value(grads[1]);
    for (i, &v) in gw.iter().enumerate() {
        let expected = 2.0 * (norm - 1.0) * w0[i] / norm;
        assert!((v - expected).abs() < 1e-5, "w[{i}]: {v} vs {expected}");
    }
}

#[test]
fn grad_of_unrelated_is_zero() {
    let g = Graph::new();
    let x = g.leaf(arr(&[2], vec![1.0, 2.0]), true);
    let z = g.leaf(arr(&[2], vec![3.0, 4.0]), true);
    let y = g.sum_all(g.mul(x, x));
    let gz = g.grad(y, &[z])[0];
    assert_eq!(g.value(gz).as_slice().unwrap(), &[0.0, 0.0]);
}
