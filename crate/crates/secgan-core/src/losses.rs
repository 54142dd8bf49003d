//! Loss terms for both branches: WGAN-GP adversarial losses, attribute
//! classification, RGB and mask reconstruction, and the semantic consistency
//! pair that couples the branches. All functions build graph nodes, so every
//! loss is differentiable end to end (the gradient penalty twice).

use crate::error::{Result, SecganError};
use crate::tensor::{Graph, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to [EPS, 1 - EPS] before any logarithm.
pub const PROB_EPS: f32 = 1e-7;

/// Loss term weights. `lambda_sc = 0` decouples the branches exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f32,
    pub lambda_rec: f32,
    pub lambda_gp: f32,
    pub lambda_sc: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cls: 1.0, lambda_rec: 10.0, lambda_gp: 10.0, lambda_sc: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_rec", self.lambda_rec),
            ("lambda_gp", self.lambda_gp),
            ("lambda_sc", self.lambda_sc),
        ] {
            if !(v >= 0.0) {
                return Err(SecganError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which classification loss to use. The published formula reads
/// `(1 - y) * (1 - log p)`, which is unbounded below; `Bce` is the standard
/// form used by the backbone implementations and is the default. The literal
/// variant is kept only for auditability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClsLossVariant {
    Bce,
    PaperLiteral,
}

impl Default for ClsLossVariant {
    fn default() -> Self {
        ClsLossVariant::Bce
    }
}

fn expect_same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    let sa = g.shape(a);
    let sb = g.shape(b);
    if sa != sb {
        return Err(SecganError::shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Critic loss: mean(fake) - mean(real) + lambda_gp * gp.
pub fn adv_loss_d(g: &Graph, d_real_adv: Var, d_fake_adv: Var, gp: Var, lambda_gp: f32) -> Var {
    let fake = g.mean_all(d_fake_adv);
    let real = g.mean_all(d_real_adv);
    let base = g.sub(fake, real);
    let penalty = g.scalar_mul(gp, lambda_gp);
    g.add(base, penalty)
}

/// Generator adversarial loss: -mean(fake scores).
pub fn adv_loss_g(g: &Graph, d_fake_adv: Var) -> Var {
    let m = g.mean_all(d_fake_adv);
    g.neg(m)
}

/// Per-example uniform mixing coefficients for the gradient penalty.
pub fn sample_gp_u<R: Rng>(rng: &mut R, batch: usize) -> Vec<f32> {
    (0..batch).map(|_| rng.gen::<f32>()).collect()
}

/// WGAN-GP penalty: mean over the batch of (||grad_x D(x_tilde)||_2 - 1)^2,
/// with x_tilde = u * x_in + (1 - u) * x_out mixed per example. The critic is
/// evaluated through `d_adv`, and the returned node backpropagates into the
/// critic parameters through the inner gradient.
pub fn gradient_penalty(
    g: &Graph,
    d_adv: impl FnOnce(&Graph, Var) -> Var,
    x_in: Var,
    x_out: Var,
    u: &[f32],
) -> Result<Var> {
    expect_same_shape(g, x_in, x_out, "gradient_penalty inputs")?;
    let shape = g.shape(x_in);
    let batch = shape[0];
    if u.len() != batch {
        return Err(SecganError::contract(format!(
            "need one mixing coefficient per example: {} vs batch {batch}",
            u.len()
        )));
    }
    // x_tilde is a fresh differentiation root; the mixing itself carries no
    // gradient back to either endpoint.
    let a = g.value(x_in);
    let b = g.value(x_out);
    let mut mixed = a;
    let per_ex: usize = shape[1..].iter().product();
    {
        let ms = mixed.as_slice_mut().expect("standard layout");
        let bs = b.as_slice().expect("standard layout");
        for (i, (mv, &bv)) in ms.iter_mut().zip(bs.iter()).enumerate() {
            let ui = u[i / per_ex];
            *mv = ui * *mv + (1.0 - ui) * bv;
        }
    }
    let x_tilde = g.leaf(mixed, true);
    let scores = d_adv(g, x_tilde);
    if g.shape(scores)[0] != batch {
        return Err(SecganError::shape(
            "critic scores must keep the batch dimension",
        ));
    }
    let total = g.sum_all(scores);
    let gx = g.grad(total, &[x_tilde])[0];
    let sq = g.mul(gx, gx);
    let axes: Vec<usize> = (1..shape.len()).collect();
    let per_example = g.sum_axes(sq, &axes);
    let norm = g.sqrt(g.scalar_add(per_example, 1e-12));
    let diff = g.scalar_add(norm, -1.0);
    Ok(g.mean_all(g.mul(diff, diff)))
}

/// Attribute classification loss: mean over the batch of the (negated)
/// per-attribute log-likelihood. `pred` and `target` are `[B, n]`.
pub fn cls_loss(g: &Graph, pred: Var, target: Var, variant: ClsLossVariant) -> Result<Var> {
    expect_same_shape(g, pred, target, "cls_loss")?;
    let shape = g.shape(pred);
    if shape.len() != 2 {
        return Err(SecganError::shape(format!("cls_loss expects [B, n], got {shape:?}")));
    }
    let batch = shape[0];
    let pc = g.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(pc);
    let pos = g.mul(target, log_p);
    let one_minus_t = g.scalar_add(g.neg(target), 1.0);
    let neg_term = match variant {
        ClsLossVariant::Bce => {
            let one_minus_p = g.scalar_add(g.neg(pc), 1.0);
            g.log(one_minus_p)
        }
        ClsLossVariant::PaperLiteral => g.scalar_add(g.neg(log_p), 1.0),
    };
    let neg = g.mul(one_minus_t, neg_term);
    let sum = g.sum_all(g.add(pos, neg));
    Ok(g.scalar_mul(sum, -1.0 / batch as f32))
}

/// RGB reconstruction: elementwise mean absolute difference.
pub fn rec_loss_rgb(g: &Graph, x_in: Var, x_rec: Var) -> Result<Var> {
    expect_same_shape(g, x_in, x_rec, "rec_loss_rgb")?;
    let d = g.sub(x_in, x_rec);
    Ok(g.mean_all(g.abs(d)))
}

/// Cross entropy of per-pixel probabilities against a one-hot target,
/// normalized by H*W and averaged over the batch.
fn mask_cross_entropy(g: &Graph, target_onehot: Var, probs: Var, what: &str) -> Result<Var> {
    expect_same_shape(g, target_onehot, probs, what)?;
    let shape = g.shape(probs);
    if shape.len() != 4 {
        return Err(SecganError::shape(format!("{what} expects [B, C, H, W], got {shape:?}")));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let pc = g.clamp(probs, PROB_EPS, 1.0);
    let lp = g.log(pc);
    let prod = g.mul(target_onehot, lp);
    let sum = g.sum_all(prod);
    Ok(g.scalar_mul(sum, -1.0 / (b * h * w) as f32))
}

/// Mask reconstruction (cross entropy against the input mask).
pub fn rec_loss_seg(g: &Graph, s_in: Var, s_rec: Var) -> Result<Var> {
    mask_cross_entropy(g, s_in, s_rec, "rec_loss_seg")
}

/// Semantic consistency term for the RGB generator: the semantic branch's
/// one-hot output supervises the parse of the translated image. The target
/// must be detached (no gradient may reach the semantic generator from here).
pub fn sc_loss_rgb(g: &Graph, s_out_onehot: Var, parsed: Var) -> Result<Var> {
    if g.requires_grad(s_out_onehot) {
        return Err(SecganError::contract(
            "sc_loss_rgb target must be detached from the semantic generator",
        ));
    }
    mask_cross_entropy(g, s_out_onehot, parsed, "sc_loss_rgb")
}

/// Semantic consistency term for the semantic generator: the one-hot parse of
/// the translated RGB image supervises the soft mask output. The target must
/// be detached (no gradient may reach the RGB generator from here).
pub fn sc_loss_seg(g: &Graph, parsed_onehot: Var, s_out_soft: Var) -> Result<Var> {
    if g.requires_grad(parsed_onehot) {
        return Err(SecganError::contract(
            "sc_loss_seg target must be detached from the RGB generator",
        ));
    }
    mask_cross_entropy(g, parsed_onehot, s_out_soft, "sc_loss_seg")
}

/// Scalar loss parts of one branch, as logged per step.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_d: f32,
    pub cls_d: f32,
    pub gp: f32,
    pub adv_g: f32,
    pub cls_g: f32,
    pub rec: f32,
    pub sc: f32,
}

/// Branch totals per the overall objectives.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TotalLosses {
    pub d_total: f32,
    pub g_total: f32,
}

/// Combine loss parts into the discriminator and generator objectives:
/// `L_D = adv_d + lambda_cls * cls_d` (adv_d already includes the weighted
/// penalty) and `L_G = adv_g + lambda_cls * cls_g + lambda_rec * rec +
/// lambda_sc * sc`. Non-finite parts signal divergence.
pub fn total_losses(parts: &LossParts, w: &LossWeights) -> Result<TotalLosses> {
    let vals = [
        parts.adv_d, parts.cls_d, parts.gp, parts.adv_g, parts.cls_g, parts.rec, parts.sc,
    ];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(SecganError::Diverged {
            step: 0,
            what: format!("non-finite loss part: {parts:?}"),
        });
    }
    Ok(TotalLosses {
        d_total: parts.adv_d + w.lambda_cls * parts.cls_d,
        g_total: parts.adv_g
            + w.lambda_cls * parts.cls_g
            + w.lambda_rec * parts.rec
            + w.lambda_sc * parts.sc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn arr(shape: &[usize], data: Vec<f32>) -> ArrayD<f32> {
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn adv_loss_d_examples() {
        let g = Graph::new();
        let zero = g.scalar(0.0);
        let r = g.constant(arr(&[2], vec![1.0, 1.0]));
        let f = g.constant(arr(&[2], vec![1.0, 1.0]));
        assert_eq!(g.scalar_value(adv_loss_d(&g, r, f, zero, 10.0)), 0.0);

        let r = g.constant(arr(&[1], vec![2.0]));
        let f = g.constant(arr(&[1], vec![0.0]));
        assert_eq!(g.scalar_value(adv_loss_d(&g, r, f, zero, 10.0)), -2.0);

        let r = g.constant(arr(&[2], vec![1.0, 3.0]));
        let f = g.constant(arr(&[2], vec![0.0, 2.0]));
        let gp = g.scalar(0.5);
        assert!((g.scalar_value(adv_loss_d(&g, r, f, gp, 10.0)) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn adv_loss_g_examples() {
        let g = Graph::new();
        let f = g.constant(arr(&[2], vec![0.0, 0.0]));
        assert_eq!(g.scalar_value(adv_loss_g(&g, f)), 0.0);
        let f = g.constant(arr(&[2], vec![1.0, 3.0]));
        assert_eq!(g.scalar_value(adv_loss_g(&g, f)), -2.0);
        let f = g.constant(arr(&[1], vec![-0.5]));
        assert_eq!(g.scalar_value(adv_loss_g(&g, f)), 0.5);
    }

    #[test]
    fn cls_loss_examples() {
        let g = Graph::new();
        let p = g.constant(arr(&[1, 2], vec![1.0 - PROB_EPS, PROB_EPS]));
        let t = g.constant(arr(&[1, 2], vec![1.0, 0.0]));
        let v = g.scalar_value(cls_loss(&g, p, t, ClsLossVariant::Bce).unwrap());
        assert!(v.abs() < 1e-5, "{v}");

        let p = g.constant(arr(&[1, 1], vec![0.5]));
        let t = g.constant(arr(&[1, 1], vec![1.0]));
        let v = g.scalar_value(cls_loss(&g, p, t, ClsLossVariant::Bce).unwrap());
        assert!((v - std::f32::consts::LN_2).abs() < 1e-6, "{v}");

        let p = g.constant(arr(&[1, 2], vec![0.8, 0.3]));
        let t = g.constant(arr(&[1, 2], vec![1.0, 0.0]));
        let v = g.scalar_value(cls_loss(&g, p, t, ClsLossVariant::Bce).unwrap());
        let expected = -(0.8f32.ln() + 0.7f32.ln());
        assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
    }

    #[test]
    fn cls_loss_literal_variant_differs() {
        let g = Graph::new();
        let p = g.constant(arr(&[1, 1], vec![0.3]));
        let t = g.constant(arr(&[1, 1], vec![0.0]));
        let bce = g.scalar_value(cls_loss(&g, p, t, ClsLossVariant::Bce).unwrap());
        let lit = g.scalar_value(cls_loss(&g, p, t, ClsLossVariant::PaperLiteral).unwrap());
        // literal: -(1 - log 0.3); bce: -log 0.7
        assert!((bce - (-(0.7f32.ln()))).abs() < 1e-6);
        assert!((lit - (-(1.0 - 0.3f32.ln()))).abs() < 1e-6);
        assert!((bce - lit).abs() > 0.1);
    }

    #[test]
    fn rec_loss_rgb_examples() {
        let g = Graph::new();
        let x = g.constant(arr(&[1, 3, 2, 2], vec![0.1; 12]));
        assert_eq!(g.scalar_value(rec_loss_rgb(&g, x, x).unwrap()), 0.0);

        let a = g.constant(arr(&[1, 1, 2, 2], vec![0.5; 4]));
        let b = g.constant(arr(&[1, 1, 2, 2], vec![0.0; 4]));
        assert_eq!(g.scalar_value(rec_loss_rgb(&g, a, b).unwrap()), 0.5);

        // brute-force elementwise oracle on a random-ish 2x2 pair
        let xs = vec![0.2, -0.7, 0.4, 0.9];
        let ys = vec![-0.1, 0.3, 0.4, -0.5];
        let a = g.constant(arr(&[1, 1, 2, 2], xs.clone()));
        let b = g.constant(arr(&[1, 1, 2, 2], ys.clone()));
        let oracle: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (*x as f64 - *y as f64).abs())
            .sum::<f64>()
            / 4.0;
        let v = g.scalar_value(rec_loss_rgb(&g, a, b).unwrap());
        assert!((v as f64 - oracle).abs() < 1e-6);
    }

    #[test]
    fn rec_loss_seg_examples() {
        let g = Graph::new();
        // identity: probability 1 on the true channel
        let mut t = ArrayD::zeros(IxDyn(&[1, 12, 1, 1]));
        t[[0, 3, 0, 0]] = 1.0;
        let tv = g.constant(t.clone());
        let pv = g.constant(t.clone());
        assert_eq!(g.scalar_value(rec_loss_seg(&g, tv, pv).unwrap()), 0.0);

        // uniform prediction: ln 12
        let uniform = g.constant(ArrayD::from_elem(IxDyn(&[1, 12, 1, 1]), 1.0 / 12.0));
        let v = g.scalar_value(rec_loss_seg(&g, tv, uniform).unwrap());
        assert!((v - 12f32.ln()).abs() < 1e-6, "{v}");

        // 1x2-pixel hand-expanded oracle
        let mut target = ArrayD::zeros(IxDyn(&[1, 12, 1, 2]));
        target[[0, 2, 0, 0]] = 1.0;
        target[[0, 7, 0, 1]] = 1.0;
        let mut probs = ArrayD::from_elem(IxDyn(&[1, 12, 1, 2]), 0.05);
        probs[[0, 2, 0, 0]] = 0.45;
        probs[[0, 7, 0, 1]] = 0.45;
        // normalize exactly: 11 * 0.05 + 0.45 = 1.0
        let tv = g.constant(target);
        let pv = g.constant(probs);
        let oracle = -((0.45f64.ln()) + (0.45f64.ln())) / 2.0;
        let v = g.scalar_value(rec_loss_seg(&g, tv, pv).unwrap());
        assert!((v as f64 - oracle).abs() < 1e-6, "{v} vs {oracle}");
    }

    #[test]
    fn sc_loss_examples() {
        let g = Graph::new();
        let mut t = ArrayD::zeros(IxDyn(&[1, 12, 1, 1]));
        t[[0, 3, 0, 0]] = 1.0;
        let tv = g.constant(t.clone());
        let pv = g.constant(t.clone());
        assert_eq!(g.scalar_value(sc_loss_rgb(&g, tv, pv).unwrap()), 0.0);

        let uniform = g.constant(ArrayD::from_elem(IxDyn(&[1, 12, 1, 1]), 1.0 / 12.0));
        let v = g.scalar_value(sc_loss_rgb(&g, tv, uniform).unwrap());
        assert!((v - 12f32.ln()).abs() < 1e-6);

        // one pixel, target channel 3, parsed probability 0.25 there -> ln 4
        let mut probs = ArrayD::from_elem(IxDyn(&[1, 12, 1, 1]), 0.75 / 11.0);
        probs[[0, 3, 0, 0]] = 0.25;
        let pv = g.constant(probs.clone());
        let v = g.scalar_value(sc_loss_rgb(&g, tv, pv).unwrap());
        assert!((v - 4f32.ln()).abs() < 1e-6, "{v}");

        // mirrored roles give the same value
        let v2 = g.scalar_value(sc_loss_seg(&g, tv, pv).unwrap());
        assert!((v - v2).abs() < 1e-7);
    }

    #[test]
    fn sc_loss_rejects_grad_carrying_target() {
        let g = Graph::new();
        let t = g.leaf(ArrayD::zeros(IxDyn(&[1, 12, 1, 1])), true);
        let p = g.constant(ArrayD::from_elem(IxDyn(&[1, 12, 1, 1]), 1.0 / 12.0));
        assert!(sc_loss_rgb(&g, t, p).is_err());
        assert!(sc_loss_seg(&g, t, p).is_err());
    }

    #[test]
    fn gradient_penalty_unit_linear_critic() {
        let g = Graph::new();
        let numel = 3 * 2 * 2;
        let c = 1.0 / (numel as f32).sqrt();
        let x_in = g.constant(arr(&[2, 3, 2, 2], vec![0.25; 2 * numel]));
        let x_out = g.constant(arr(&[2, 3, 2, 2], vec![-0.5; 2 * numel]));
        let gp = gradient_penalty(
            &g,
            |g, x| {
                let s = g.sum_axes(x, &[1, 2, 3]);
                g.scalar_mul(s, c)
            },
            x_in,
            x_out,
            &[0.3, 0.8],
        )
        .unwrap();
        assert!(g.scalar_value(gp).abs() < 1e-5);
    }

    #[test]
    fn gradient_penalty_norm_two_critic() {
        let g = Graph::new();
        let numel = 3 * 2 * 2;
        let a = 2.0 / (numel as f32).sqrt();
        let x_in = g.constant(arr(&[1, 3, 2, 2], vec![0.1; numel]));
        let x_out = g.constant(arr(&[1, 3, 2, 2], vec![0.9; numel]));
        let gp = gradient_penalty(
            &g,
            |g, x| {
                let s = g.sum_axes(x, &[1, 2, 3]);
                g.scalar_mul(s, a)
            },
            x_in,
            x_out,
            &[0.5],
        )
        .unwrap();
        assert!((g.scalar_value(gp) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn total_losses_examples() {
        let w = LossWeights { lambda_cls: 1.0, lambda_rec: 10.0, lambda_gp: 10.0, lambda_sc: 0.01 };
        let zero = LossParts::default();
        let t = total_losses(&zero, &w).unwrap();
        assert_eq!(t.d_total, 0.0);
        assert_eq!(t.g_total, 0.0);

        let parts = LossParts {
            adv_d: 0.0,
            cls_d: 0.0,
            gp: 0.0,
            adv_g: 1.0,
            cls_g: 1.0,
            rec: 1.0,
            sc: 1.0,
        };
        let t = total_losses(&parts, &w).unwrap();
        assert!((t.g_total - 12.01).abs() < 1e-6);

        // lambda_sc = 0 drops the coupling term
        let w0 = LossWeights { lambda_sc: 0.0, ..w };
        let t0 = total_losses(&parts, &w0).unwrap();
        assert!((t0.g_total - 12.0).abs() < 1e-6);

        let bad = LossParts { adv_d: f32::NAN, ..zero };
        assert!(total_losses(&bad, &w).is_err());
    }
}
