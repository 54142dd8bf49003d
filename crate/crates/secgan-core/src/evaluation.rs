//! Evaluation protocol: per-attribute edit accuracy through an external
//! classifier, Inception Score over shuffled splits, and Fréchet distance in
//! a pluggable embedding space averaged per attribute edit (the ssFID
//! stand-in at desk scale).

use crate::domain::{labels_to_array, reverse_attribute, AttributeLabel, AttributeSchema};
use crate::error::{Result, SecganError};
use crate::losses::{self, ClsLossVariant};
use crate::networks::NetworkHandle;
use crate::nn::{
    self, conv_fwd, conv_init, linear_fwd, linear_init, param_grads, Adam, ConvCfg, ParamStore,
    Uploaded,
};
use crate::rng::stream;
use crate::tensor::{Graph, Var};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const EVAL_CHUNK: usize = 32;

/// A translate function: (images, y_diff rows) -> translated images.
pub type TranslateFn<'a> = dyn Fn(&Array4<f32>, &Array2<f32>) -> Result<Array4<f32>> + 'a;
/// A classify function: images -> per-attribute probabilities.
pub type ClassifyFn<'a> = dyn Fn(&Array4<f32>) -> Result<Array2<f32>> + 'a;
/// An embed function: images -> embedding rows.
pub type EmbedFn<'a> = dyn Fn(&Array4<f32>) -> Result<Array2<f32>> + 'a;

// ---------------------------------------------------------------------------
// attribute classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub widths: [usize; 3],
    pub fc_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64], fc_width: 64, epochs: 10, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

/// Multi-label CNN classifier; its penultimate features double as the
/// default ssFID embedding.
#[derive(Debug, Clone)]
pub struct ClassifierHandle {
    pub resolution: usize,
    pub widths: [usize; 3],
    pub fc_width: usize,
    pub attributes: Vec<String>,
    pub store: ParamStore,
}

impl ClassifierHandle {
    pub fn build<R: Rng>(
        resolution: usize,
        widths: [usize; 3],
        fc_width: usize,
        attributes: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        if resolution % 8 != 0 {
            return Err(SecganError::Config(format!(
                "classifier resolution must be divisible by 8, got {resolution}"
            )));
        }
        let mut store = ParamStore::new();
        let mut in_c = 3;
        for (i, &out_c) in widths.iter().enumerate() {
            conv_init(&mut store, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, rng);
            in_c = out_c;
        }
        let feat = in_c * (resolution / 8) * (resolution / 8);
        linear_init(&mut store, "fc0", feat, fc_width, rng);
        linear_init(&mut store, "fc1", fc_width, attributes.len(), rng);
        Ok(Self { resolution, widths, fc_width, attributes, store })
    }

    /// Forward to (logits, penultimate features).
    fn forward(&self, g: &Graph, up: &Uploaded, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.resolution {
            return Err(SecganError::shape(format!(
                "classifier expects [B, 3, {0}, {0}], got {shape:?}",
                self.resolution
            )));
        }
        let mut t = x;
        let mut in_c = 3;
        for (i, &out_c) in self.widths.iter().enumerate() {
            t = conv_fwd(g, &self.store, up, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, t);
            t = g.leaky_relu(t, 0.01);
            in_c = out_c;
        }
        let s = g.shape(t);
        let flat = g.reshape(t, &[s[0], s[1] * s[2] * s[3]]);
        let mut feat = linear_fwd(g, &self.store, up, "fc0", flat);
        feat = g.relu(feat);
        let logits = linear_fwd(g, &self.store, up, "fc1", feat);
        Ok((logits, feat))
    }

    fn run_chunked(
        &self,
        images: &Array4<f32>,
        take_features: bool,
    ) -> Result<Array2<f32>> {
        let n = images.shape()[0];
        let cols = if take_features { self.fc_width } else { self.attributes.len() };
        let mut out = Array2::zeros((n, cols));
        let mut row = 0usize;
        for chunk_start in (0..n).step_by(EVAL_CHUNK) {
            let end = (chunk_start + EVAL_CHUNK).min(n);
            let g = Graph::new();
            let up = self.store.upload(&g, false);
            let x = g.constant(
                images
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(chunk_start..end))
                    .to_owned()
                    .into_dyn(),
            );
            let (logits, feat) = self.forward(&g, &up, x)?;
            let v = if take_features { g.value(feat) } else { g.value(g.sigmoid(logits)) };
            for bi in 0..(end - chunk_start) {
                for c in 0..cols {
                    out[[row + bi, c]] = v[[bi, c]];
                }
            }
            row += end - chunk_start;
        }
        Ok(out)
    }

    /// Per-attribute probabilities in (0, 1) for every image.
    pub fn probabilities(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        self.run_chunked(images, false)
    }

    /// Penultimate-layer features (the classifier embedding space).
    pub fn features(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        self.run_chunked(images, true)
    }

    /// Class distribution p(y|x): softmax over attribute logits, for IS.
    pub fn class_distribution(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let n = images.shape()[0];
        let k = self.attributes.len();
        let mut out = Array2::zeros((n, k));
        let mut row = 0usize;
        for chunk_start in (0..n).step_by(EVAL_CHUNK) {
            let end = (chunk_start + EVAL_CHUNK).min(n);
            let g = Graph::new();
            let up = self.store.upload(&g, false);
            let x = g.constant(
                images
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(chunk_start..end))
                    .to_owned()
                    .into_dyn(),
            );
            let (logits, _) = self.forward(&g, &up, x)?;
            let probs = g.value(g.softmax_c(logits));
            for bi in 0..(end - chunk_start) {
                for c in 0..k {
                    out[[row + bi, c]] = probs[[bi, c]];
                }
            }
            row += end - chunk_start;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "classifier",
            "resolution": self.resolution,
            "widths": self.widths,
            "fc_width": self.fc_width,
            "attributes": self.attributes,
        });
        nn::save_store(path, &meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = nn::load_store(path)?;
        if meta.get("kind").and_then(|v| v.as_str()) != Some("classifier") {
            return Err(SecganError::Checkpoint(format!(
                "{}: not a classifier checkpoint",
                path.display()
            )));
        }
        let resolution = meta["resolution"]
            .as_u64()
            .ok_or_else(|| SecganError::Checkpoint("classifier meta missing resolution".into()))?
            as usize;
        let widths_v = meta["widths"]
            .as_array()
            .ok_or_else(|| SecganError::Checkpoint("classifier meta missing widths".into()))?;
        let mut widths = [0usize; 3];
        for (i, v) in widths_v.iter().enumerate().take(3) {
            widths[i] = v.as_u64().unwrap_or(0) as usize;
        }
        let fc_width = meta["fc_width"]
            .as_u64()
            .ok_or_else(|| SecganError::Checkpoint("classifier meta missing fc_width".into()))?
            as usize;
        let attributes = meta["attributes"]
            .as_array()
            .ok_or_else(|| SecganError::Checkpoint("classifier meta missing attributes".into()))?
            .iter()
            .map(|v| v.as_str().unwrap_or("").to_string())
            .collect();
        Ok(Self { resolution, widths, fc_width, attributes, store })
    }
}

pub struct TrainedClassifier {
    pub handle: ClassifierHandle,
    /// Held-out per-attribute accuracy, aligned with the attribute list.
    pub held_out_accuracy: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Train the external attribute classifier with multi-label BCE.
pub fn train_attribute_classifier(
    train_images: &Array4<f32>,
    train_labels: &[AttributeLabel],
    val_images: &Array4<f32>,
    val_labels: &[AttributeLabel],
    attributes: &[String],
    config: &ClassifierTrainConfig,
) -> Result<TrainedClassifier> {
    if train_images.shape()[0] == 0 {
        return Err(SecganError::Dataset("classifier training set is empty".into()));
    }
    if train_images.shape()[0] != train_labels.len() {
        return Err(SecganError::shape("images/labels length mismatch"));
    }
    let n_a = attributes.len();
    let mut warnings = Vec::new();
    for (k, name) in attributes.iter().enumerate() {
        let ones: usize = train_labels.iter().map(|l| l.get(k) as usize).sum();
        if ones == 0 || ones == train_labels.len() {
            warnings.push(format!(
                "attribute '{name}' is constant in the training set; accuracy on it is vacuous"
            ));
        }
    }

    let resolution = train_images.shape()[2];
    let mut init_rng = stream(config.seed, "classifier/init");
    let mut handle = ClassifierHandle::build(
        resolution,
        config.widths,
        config.fc_width,
        attributes.to_vec(),
        &mut init_rng,
    )?;
    let mut adam = Adam::new(&handle.store, 0.9, 0.999, 1e-8, 0.0);
    let mut order_rng = stream(config.seed, "classifier/order");
    let n = train_images.shape()[0];
    let labels_arr = labels_to_array(train_labels);

    let mut indices: Vec<usize> = (0..n).collect();
    for _epoch in 0..config.epochs {
        indices.shuffle(&mut order_rng);
        for chunk in indices.chunks(config.batch_size.max(1)) {
            let b = chunk.len();
            let mut xb = Array4::zeros((b, 3, resolution, resolution));
            let mut yb = Array2::zeros((b, n_a));
            for (bi, &idx) in chunk.iter().enumerate() {
                xb.index_axis_mut(ndarray::Axis(0), bi)
                    .assign(&train_images.index_axis(ndarray::Axis(0), idx));
                for c in 0..n_a {
                    yb[[bi, c]] = labels_arr[[idx, c]];
                }
            }
            let g = Graph::new();
            let up = handle.store.upload(&g, true);
            let x = g.constant(xb.into_dyn());
            let y = g.constant(yb.into_dyn());
            let (logits, _) = handle.forward(&g, &up, x)?;
            let probs = g.sigmoid(logits);
            let loss = losses::cls_loss(&g, probs, y, ClsLossVariant::Bce)?;
            if !g.scalar_value(loss).is_finite() {
                return Err(SecganError::Diverged { step: adam.t, what: "classifier loss".into() });
            }
            let grads = param_grads(&g, loss, &handle.store, &up);
            adam.step(&mut handle.store, &grads, config.lr);
        }
    }

    let held_out_accuracy = if val_images.shape()[0] > 0 {
        per_attribute_accuracy(&handle, val_images, val_labels)?
    } else {
        vec![f64::NAN; n_a]
    };
    Ok(TrainedClassifier { handle, held_out_accuracy, warnings })
}

fn per_attribute_accuracy(
    handle: &ClassifierHandle,
    images: &Array4<f32>,
    labels: &[AttributeLabel],
) -> Result<Vec<f64>> {
    let probs = handle.probabilities(images)?;
    let n = labels.len();
    let n_a = handle.attributes.len();
    let mut acc = vec![0.0f64; n_a];
    for (i, label) in labels.iter().enumerate() {
        for k in 0..n_a {
            let pred = probs[[i, k]] > 0.5;
            if pred == (label.get(k) == 1) {
                acc[k] += 1.0;
            }
        }
    }
    Ok(acc.into_iter().map(|c| c / n as f64).collect())
}

// ---------------------------------------------------------------------------
// edit accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditAccuracy {
    pub per_attribute: Vec<f64>,
    pub mean: f64,
}

/// Reverse each attribute on every test image, classify the translations,
/// and score attribute `k` against its target value at threshold 0.5.
pub fn edit_accuracy(
    translate: &TranslateFn,
    classify: &ClassifyFn,
    images: &Array4<f32>,
    labels: &[AttributeLabel],
    schema: &AttributeSchema,
) -> Result<EditAccuracy> {
    let n = images.shape()[0];
    if n == 0 || n != labels.len() {
        return Err(SecganError::contract("edit_accuracy needs a nonempty labeled set"));
    }
    let n_a = schema.len();
    let mut per_attribute = Vec::with_capacity(n_a);
    for k in 0..n_a {
        let mut correct = 0usize;
        for chunk_start in (0..n).step_by(EVAL_CHUNK) {
            let end = (chunk_start + EVAL_CHUNK).min(n);
            let xs = images
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(chunk_start..end))
                .to_owned();
            let chunk_labels = &labels[chunk_start..end];
            let targets: Vec<AttributeLabel> = chunk_labels
                .iter()
                .map(|y| reverse_attribute(y, k, schema))
                .collect::<Result<Vec<_>>>()?;
            let mut diff = Array2::zeros((end - chunk_start, n_a));
            for (bi, (src, trg)) in chunk_labels.iter().zip(&targets).enumerate() {
                for c in 0..n_a {
                    diff[[bi, c]] = trg.get(c) as f32 - src.get(c) as f32;
                }
            }
            let translated = translate(&xs, &diff)?;
            let probs = classify(&translated)?;
            for (bi, trg) in targets.iter().enumerate() {
                let pred = probs[[bi, k]] > 0.5;
                if pred == (trg.get(k) == 1) {
                    correct += 1;
                }
            }
        }
        per_attribute.push(correct as f64 / n as f64);
    }
    let mean = per_attribute.iter().sum::<f64>() / n_a as f64;
    Ok(EditAccuracy { per_attribute, mean })
}

/// Wrap a generator handle as a translate closure (inference mode).
pub fn generator_translator(gen: &NetworkHandle) -> impl Fn(&Array4<f32>, &Array2<f32>) -> Result<Array4<f32>> + '_ {
    move |images, diff| {
        let g = Graph::new();
        let up = gen.store.upload(&g, false);
        let x = g.constant(images.clone().into_dyn());
        let y = g.constant(diff.clone().into_dyn());
        let out = gen.generator_forward(&g, &up, x, y, false, None)?;
        g.value(out)
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| SecganError::shape(format!("generator output: {e}")))
    }
}

/// Wrap a classifier handle as a classify closure.
pub fn classifier_classify(
    handle: &ClassifierHandle,
) -> impl Fn(&Array4<f32>) -> Result<Array2<f32>> + '_ {
    move |images| handle.probabilities(images)
}

// ---------------------------------------------------------------------------
// inception score
// ---------------------------------------------------------------------------

/// IS over `n_splits` seeded-shuffle subsets of per-image class
/// distributions: per split exp(mean_x KL(p(y|x) || p(y))).
pub fn inception_score_from_probs(
    probs: &Array2<f32>,
    n_splits: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = probs.shape()[0];
    if n_splits == 0 || n < n_splits {
        return Err(SecganError::contract(format!(
            "need at least {n_splits} images for {n_splits} splits, have {n}"
        )));
    }
    let k = probs.shape()[1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "is/splits");
    order.shuffle(&mut rng);

    let base = n / n_splits;
    let rem = n % n_splits;
    let mut scores = Vec::with_capacity(n_splits);
    let mut cursor = 0usize;
    for s in 0..n_splits {
        let len = base + usize::from(s < rem);
        let split = &order[cursor..cursor + len];
        cursor += len;
        let mut marginal = vec![0.0f64; k];
        for &i in split {
            for c in 0..k {
                marginal[c] += probs[[i, c]] as f64;
            }
        }
        for m in marginal.iter_mut() {
            *m /= len as f64;
        }
        let mut mean_kl = 0.0f64;
        for &i in split {
            let mut kl = 0.0f64;
            for c in 0..k {
                let p = probs[[i, c]] as f64;
                if p > 0.0 {
                    kl += p * (p.ln() - marginal[c].max(1e-12).ln());
                }
            }
            mean_kl += kl;
        }
        mean_kl /= len as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}

/// IS of a set of images under a classifier's softmaxed class distribution.
pub fn inception_score(
    images: &Array4<f32>,
    classifier: &ClassifierHandle,
    n_splits: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let probs = classifier.class_distribution(images)?;
    inception_score_from_probs(&probs, n_splits, seed)
}

// ---------------------------------------------------------------------------
// Fréchet distance
// ---------------------------------------------------------------------------

const COV_JITTER: f64 = 1e-6;

fn mean_and_cov(x: &Array2<f32>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += x[[i, j]] as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0f64; d]; d];
    let denom = (n - 1).max(1) as f64;
    for i in 0..n {
        for a in 0..d {
            let da = x[[i, a]] as f64 - mean[a];
            for b in a..d {
                cov[a][b] += da * (x[[i, b]] as f64 - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a][b] /= denom;
            cov[b][a] = cov[a][b];
        }
        cov[a][a] += COV_JITTER;
    }
    (mean, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0f64; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[i][p];
                    let miq = m[i][q];
                    m[i][p] = c * mip - s * miq;
                    m[i][q] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[p][j];
                    let mqj = m[q][j];
                    m[p][j] = c * mpj - s * mqj;
                    m[q][j] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[i][p];
                    let viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[i][i]).collect();
    (eig, v)
}

fn matmul_f64(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let k = b.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0f64; m]; n];
    for i in 0..n {
        for l in 0..k {
            let ail = a[i][l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += ail * b[l][j];
            }
        }
    }
    out
}

/// Symmetric PSD square root via eigendecomposition.
fn sqrtm_psd(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let (eig, v) = jacobi_eigen(a);
    // V * diag(sqrt(max(eig, 0))) * V^T
    let mut scaled = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            scaled[i][j] = v[i][j] * eig[j].max(0.0).sqrt();
        }
    }
    let vt: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| v[j][i]).collect()).collect();
    matmul_f64(&scaled, &vt)
}

/// Fréchet distance between two embedded sample sets:
/// ||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2)).
pub fn frechet_distance(real: &Array2<f32>, fake: &Array2<f32>) -> Result<f64> {
    if real.shape()[0] < 2 || fake.shape()[0] < 2 {
        return Err(SecganError::contract("need at least 2 samples per side"));
    }
    if real.shape()[1] != fake.shape()[1] {
        return Err(SecganError::shape(format!(
            "embedding dims differ: {} vs {}",
            real.shape()[1],
            fake.shape()[1]
        )));
    }
    let (mu_r, cov_r) = mean_and_cov(real);
    let (mu_f, cov_f) = mean_and_cov(fake);
    let d = mu_r.len();
    let mean_term: f64 = (0..d).map(|i| (mu_r[i] - mu_f[i]).powi(2)).sum();
    // Tr((S_r S_f)^(1/2)) = Tr((S_r^(1/2) S_f S_r^(1/2))^(1/2))
    let s = sqrtm_psd(&cov_r);
    let inner = matmul_f64(&matmul_f64(&s, &cov_f), &s);
    let (eig, _) = jacobi_eigen(&inner);
    let tr_sqrt: f64 = eig.iter().map(|&e| e.max(0.0).sqrt()).sum();
    let tr_r: f64 = (0..d).map(|i| cov_r[i][i]).sum();
    let tr_f: f64 = (0..d).map(|i| cov_f[i][i]).sum();
    let fd = mean_term + tr_r + tr_f - 2.0 * tr_sqrt;
    if !fd.is_finite() {
        return Err(SecganError::Other("non-finite Fréchet distance".into()));
    }
    Ok(fd)
}

/// Fixed seeded random convolutional projection: the alternative ssFID
/// embedder when no classifier is wanted.
pub struct RandomProjEmbedder {
    resolution: usize,
    store: ParamStore,
    widths: [usize; 3],
}

impl RandomProjEmbedder {
    pub fn new(resolution: usize, seed: u64) -> Result<Self> {
        if resolution % 8 != 0 {
            return Err(SecganError::Config("embedder resolution must divide by 8".into()));
        }
        let widths = [16usize, 32, 64];
        let mut rng = stream(seed, "embedder/random_proj");
        let mut store = ParamStore::new();
        let mut in_c = 3;
        for (i, &out_c) in widths.iter().enumerate() {
            conv_init(&mut store, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, &mut rng);
            in_c = out_c;
        }
        Ok(Self { resolution, store, widths })
    }

    pub fn dim(&self) -> usize {
        self.widths[2]
    }

    /// Embed images: conv stack then global average pooling.
    pub fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let n = images.shape()[0];
        if images.shape()[2] != self.resolution {
            return Err(SecganError::shape("embedder resolution mismatch"));
        }
        let mut out = Array2::zeros((n, self.dim()));
        let mut row = 0usize;
        for chunk_start in (0..n).step_by(EVAL_CHUNK) {
            let end = (chunk_start + EVAL_CHUNK).min(n);
            let g = Graph::new();
            let up = self.store.upload(&g, false);
            let mut t = g.constant(
                images
                    .slice_axis(ndarray::Axis(0), ndarray::Slice::from(chunk_start..end))
                    .to_owned()
                    .into_dyn(),
            );
            let mut in_c = 3;
            for (i, &out_c) in self.widths.iter().enumerate() {
                t = conv_fwd(&g, &self.store, &up, &format!("c{i}"), ConvCfg { in_c, out_c, k: 4, stride: 2, pad: 1 }, t);
                t = g.leaky_relu(t, 0.1);
                in_c = out_c;
            }
            let pooled = g.mean_axes(t, &[2, 3]);
            let s = g.shape(pooled);
            let flat = g.value(g.reshape(pooled, &[s[0], s[1]]));
            for bi in 0..(end - chunk_start) {
                for c in 0..self.dim() {
                    out[[row + bi, c]] = flat[[bi, c]];
                }
            }
            row += end - chunk_start;
        }
        Ok(out)
    }
}

/// ssFID protocol: Fréchet distance between real-test embeddings and each
/// attribute-reversal's translated embeddings, averaged over attributes.
pub fn ssfid_protocol(
    translate: &TranslateFn,
    embed: &EmbedFn,
    images: &Array4<f32>,
    labels: &[AttributeLabel],
    schema: &AttributeSchema,
) -> Result<f64> {
    let n = images.shape()[0];
    if n < 2 || n != labels.len() {
        return Err(SecganError::contract("ssfid needs >= 2 labeled test images"));
    }
    let real_emb = embed(images)?;
    let n_a = schema.len();
    let mut total = 0.0f64;
    for k in 0..n_a {
        let mut fake = Array4::zeros(images.raw_dim());
        for chunk_start in (0..n).step_by(EVAL_CHUNK) {
            let end = (chunk_start + EVAL_CHUNK).min(n);
            let xs = images
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(chunk_start..end))
                .to_owned();
            let mut diff = Array2::zeros((end - chunk_start, n_a));
            for (bi, y) in labels[chunk_start..end].iter().enumerate() {
                let trg = reverse_attribute(y, k, schema)?;
                for c in 0..n_a {
                    diff[[bi, c]] = trg.get(c) as f32 - y.get(c) as f32;
                }
            }
            let out = translate(&xs, &diff)?;
            fake.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(chunk_start..end))
                .assign(&out);
        }
        let fake_emb = embed(&fake)?;
        total += frechet_distance(&real_emb, &fake_emb)?;
    }
    Ok(total / n_a as f64)
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

/// A full evaluation of one method (per-attribute accuracy + quality).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub lambda_sc: f64,
    pub attributes: Vec<String>,
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub ssfid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub classifier_held_out: Vec<f64>,
}

/// Run the full metric suite for one generator: per-attribute edit accuracy
/// (mean over attributes), ssFID with the chosen embedder, and IS over the
/// pool of all translated images.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_generator(
    gen: &NetworkHandle,
    images: &Array4<f32>,
    labels: &[AttributeLabel],
    schema: &AttributeSchema,
    classifier: &ClassifierHandle,
    embed: &EmbedFn,
    n_splits: usize,
    seed: u64,
    method: &str,
    config_hash: &str,
    lambda_sc: f64,
    classifier_held_out: Vec<f64>,
) -> Result<EvalReport> {
    let translate = generator_translator(gen);
    let classify = classifier_classify(classifier);
    let acc = edit_accuracy(&translate, &classify, images, labels, schema)?;
    let ssfid = ssfid_protocol(&translate, embed, images, labels, schema)?;

    // IS over the pool of every attribute reversal
    let n = images.shape()[0];
    let n_a = schema.len();
    let mut pool_probs = Array2::zeros((n * n_a, n_a));
    let mut row = 0usize;
    for k in 0..n_a {
        for chunk_start in (0..n).step_by(EVAL_CHUNK) {
            let end = (chunk_start + EVAL_CHUNK).min(n);
            let xs = images
                .slice_axis(ndarray::Axis(0), ndarray::Slice::from(chunk_start..end))
                .to_owned();
            let mut diff = Array2::zeros((end - chunk_start, n_a));
            for (bi, y) in labels[chunk_start..end].iter().enumerate() {
                let trg = reverse_attribute(y, k, schema)?;
                for c in 0..n_a {
                    diff[[bi, c]] = trg.get(c) as f32 - y.get(c) as f32;
                }
            }
            let out = translate(&xs, &diff)?;
            let probs = classifier.class_distribution(&out)?;
            for bi in 0..(end - chunk_start) {
                for c in 0..n_a {
                    pool_probs[[row + bi, c]] = probs[[bi, c]];
                }
            }
            row += end - chunk_start;
        }
    }
    let (is_mean, is_std) = inception_score_from_probs(&pool_probs, n_splits, seed)?;

    Ok(EvalReport {
        method: method.to_string(),
        config_hash: config_hash.to_string(),
        lambda_sc,
        attributes: schema.names.clone(),
        accuracy: acc.per_attribute,
        mean_accuracy: acc.mean,
        ssfid,
        is_mean,
        is_std,
        classifier_held_out,
    })
}

impl EvalReport {
    /// Delimited table: one row per attribute plus a mean row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tattribute\taccuracy\tssfid\tis_mean\tis_std\n");
        for (name, acc) in self.attributes.iter().zip(&self.accuracy) {
            out.push_str(&format!("{}\t{}\t{:.6}\t\t\t\n", self.method, name, acc));
        }
        out.push_str(&format!(
            "{}\tmean\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.method, self.mean_accuracy, self.ssfid, self.is_mean, self.is_std
        ));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.tsv"), self.to_tsv())?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| SecganError::Other(format!("report encode: {e}")))?;
        std::fs::write(dir.join("report.json"), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        serde_json::from_str(&json)
            .map_err(|e| SecganError::Other(format!("{}: {e}", path.display())))
    }
}

/// Per-attribute bar-chart data plus a delimited table for one or more
/// methods (the accuracy-breakdown figure).
pub fn accuracy_breakdown_report(reports: &[EvalReport]) -> Result<(String, Vec<(String, Vec<(String, f64)>)>)> {
    if reports.is_empty() {
        return Err(SecganError::contract("no reports given"));
    }
    let attrs = &reports[0].attributes;
    for r in reports {
        if &r.attributes != attrs {
            return Err(SecganError::contract("reports cover different attribute sets"));
        }
        let recomputed = r.accuracy.iter().sum::<f64>() / r.accuracy.len() as f64;
        if (recomputed - r.mean_accuracy).abs() > 1e-12 {
            return Err(SecganError::contract(format!(
                "report '{}' mean {} does not match per-attribute rows ({recomputed})",
                r.method, r.mean_accuracy
            )));
        }
    }
    let mut table = String::from("attribute");
    for r in reports {
        table.push('\t');
        table.push_str(&r.method);
    }
    table.push('\n');
    for (i, attr) in attrs.iter().enumerate() {
        table.push_str(attr);
        for r in reports {
            table.push_str(&format!("\t{:.6}", r.accuracy[i]));
        }
        table.push('\n');
    }
    table.push_str("mean");
    for r in reports {
        table.push_str(&format!("\t{:.6}", r.mean_accuracy));
    }
    table.push('\n');
    let bars = reports
        .iter()
        .map(|r| {
            (
                r.method.clone(),
                attrs.iter().cloned().zip(r.accuracy.iter().copied()).collect(),
            )
        })
        .collect();
    Ok((table, bars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy_schema;

    fn label(v: &[u8]) -> AttributeLabel {
        AttributeLabel::new(v.to_vec()).unwrap()
    }

    /// Images whose first pixels carry the label bits; the oracle classifier
    /// reads them back and the oracle generator writes the target bits.
    fn encode_images(labels: &[AttributeLabel], n_a: usize, h: usize) -> Array4<f32> {
        let mut out = Array4::from_elem((labels.len(), 3, h, h), -0.5f32);
        for (i, l) in labels.iter().enumerate() {
            for k in 0..n_a {
                out[[i, 0, 0, k]] = if l.get(k) == 1 { 0.9 } else { -0.9 };
            }
        }
        out
    }

    fn oracle_classify(n_a: usize) -> impl Fn(&Array4<f32>) -> Result<Array2<f32>> {
        move |images| {
            let n = images.shape()[0];
            let mut out = Array2::zeros((n, n_a));
            for i in 0..n {
                for k in 0..n_a {
                    out[[i, k]] = if images[[i, 0, 0, k]] > 0.0 { 0.99 } else { 0.01 };
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn oracle_generator_scores_100_percent() {
        let schema = toy_schema();
        let n_a = schema.len();
        let labels = vec![
            label(&[1, 0, 0, 1, 0]),
            label(&[0, 1, 0, 0, 1]),
            label(&[0, 0, 0, 0, 0]),
        ];
        let images = encode_images(&labels, n_a, 8);
        // oracle: applies the diff to the encoded bits
        let translate = |xs: &Array4<f32>, diff: &Array2<f32>| -> Result<Array4<f32>> {
            let mut out = xs.clone();
            for i in 0..xs.shape()[0] {
                for k in 0..diff.shape()[1] {
                    if diff[[i, k]] > 0.5 {
                        out[[i, 0, 0, k]] = 0.9;
                    } else if diff[[i, k]] < -0.5 {
                        out[[i, 0, 0, k]] = -0.9;
                    }
                }
            }
            Ok(out)
        };
        let classify = oracle_classify(n_a);
        let acc = edit_accuracy(&translate, &classify, &images, &labels, &schema).unwrap();
        assert_eq!(acc.mean, 1.0);
        assert!(acc.per_attribute.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn identity_generator_scores_0_percent() {
        let schema = toy_schema();
        let n_a = schema.len();
        let labels = vec![label(&[1, 0, 0, 1, 0]), label(&[0, 0, 1, 0, 1])];
        let images = encode_images(&labels, n_a, 8);
        let translate = |xs: &Array4<f32>, _diff: &Array2<f32>| Ok(xs.clone());
        let classify = oracle_classify(n_a);
        let acc = edit_accuracy(&translate, &classify, &images, &labels, &schema).unwrap();
        assert_eq!(acc.mean, 0.0);
    }

    #[test]
    fn edit_accuracy_order_invariant() {
        let schema = toy_schema();
        let n_a = schema.len();
        let labels = vec![
            label(&[1, 0, 0, 1, 0]),
            label(&[0, 1, 0, 0, 1]),
            label(&[0, 0, 1, 1, 1]),
        ];
        let images = encode_images(&labels, n_a, 8);
        // half-broken generator: only applies positive flips
        let translate = |xs: &Array4<f32>, diff: &Array2<f32>| -> Result<Array4<f32>> {
            let mut out = xs.clone();
            for i in 0..xs.shape()[0] {
                for k in 0..diff.shape()[1] {
                    if diff[[i, k]] > 0.5 {
                        out[[i, 0, 0, k]] = 0.9;
                    }
                }
            }
            Ok(out)
        };
        let classify = oracle_classify(n_a);
        let a = edit_accuracy(&translate, &classify, &images, &labels, &schema).unwrap();

        let rev_labels: Vec<AttributeLabel> = labels.iter().rev().cloned().collect();
        let mut rev_images = Array4::zeros(images.raw_dim());
        for i in 0..3 {
            rev_images
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&images.index_axis(ndarray::Axis(0), 2 - i));
        }
        let b = edit_accuracy(&translate, &classify, &rev_images, &rev_labels, &schema).unwrap();
        assert_eq!(a.per_attribute, b.per_attribute);
    }

    #[test]
    fn inception_score_uniform_predictor_is_one() {
        let probs = Array2::from_elem((40, 5), 0.2f32);
        let (mean, std) = inception_score_from_probs(&probs, 10, 0).unwrap();
        assert!((mean - 1.0).abs() < 1e-6, "{mean}");
        assert!(std.abs() < 1e-9);
    }

    #[test]
    fn inception_score_one_hot_equals_k() {
        let k = 4;
        let mut probs = Array2::zeros((4 * 6, k));
        for i in 0..4 * 6 {
            probs[[i, i % k]] = 1.0;
        }
        let (mean, _) = inception_score_from_probs(&probs, 1, 0).unwrap();
        assert!((mean - k as f64).abs() < 1e-6, "{mean}");
    }

    #[test]
    fn inception_score_small_mixed_oracle() {
        // 4 images, 2 classes: hand-computed KL oracle
        let rows = [[0.9f32, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]];
        let mut probs = Array2::zeros((4, 2));
        for (i, r) in rows.iter().enumerate() {
            probs[[i, 0]] = r[0];
            probs[[i, 1]] = r[1];
        }
        let marginal = [
            rows.iter().map(|r| r[0] as f64).sum::<f64>() / 4.0,
            rows.iter().map(|r| r[1] as f64).sum::<f64>() / 4.0,
        ];
        let mut mean_kl = 0.0;
        for r in &rows {
            let mut kl = 0.0;
            for c in 0..2 {
                let p = r[c] as f64;
                kl += p * (p.ln() - marginal[c].ln());
            }
            mean_kl += kl;
        }
        mean_kl /= 4.0;
        let oracle = mean_kl.exp();
        let (mean, _) = inception_score_from_probs(&probs, 1, 0).unwrap();
        assert!((mean - oracle).abs() < 1e-6, "{mean} vs {oracle}");
    }

    #[test]
    fn inception_score_too_few_images() {
        let probs = Array2::from_elem((5, 3), 1.0f32 / 3.0);
        assert!(inception_score_from_probs(&probs, 10, 0).is_err());
    }

    #[test]
    fn frechet_identical_sets_zero() {
        let mut rng = stream(3, "test/emb");
        let x = Array2::from_shape_fn((64, 8), |_| rng.gen_range(-1.0f32..1.0));
        let d = frechet_distance(&x, &x).unwrap();
        assert!(d.abs() <= 1e-3, "{d}");
    }

    #[test]
    fn frechet_unit_mean_shift_is_one() {
        // 1-D, equal variance, means 0 and 1: distance = 1
        let n = 2000;
        let mut rng = stream(4, "test/emb");
        let base: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let a = Array2::from_shape_fn((n, 1), |(i, _)| base[i]);
        let b = Array2::from_shape_fn((n, 1), |(i, _)| base[i] + 1.0);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        // build exact samples with known diagonal covariance via paired points
        // x in {mu - s, mu + s} gives mean mu, sample variance 2 s^2 / (2 - 1)
        // with n = 2; use many pairs for numerical headroom instead:
        // exact construction: set of 4 points per dim combination
        let mu_r = [0.0f64, 0.0];
        let mu_f = [1.0f64, -2.0];
        let sr = [0.5f64, 1.0];
        let sf = [2.0f64, 0.25];
        let n = 8;
        // points mu ± s in each coordinate independently (orthogonal design)
        let build = |mu: [f64; 2], s: [f64; 2]| -> Array2<f32> {
            let mut x = Array2::zeros((n, 2));
            for i in 0..n {
                let sign0 = if i % 2 == 0 { 1.0 } else { -1.0 };
                let sign1 = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
                x[[i, 0]] = (mu[0] + sign0 * s[0]) as f32;
                x[[i, 1]] = (mu[1] + sign1 * s[1]) as f32;
            }
            x
        };
        let a = build(mu_r, sr);
        let b = build(mu_f, sf);
        // sample covariance of ±s design: diag(s^2 * n/(n-1))
        let corr = n as f64 / (n as f64 - 1.0);
        let var_r = [sr[0] * sr[0] * corr + 1e-6, sr[1] * sr[1] * corr + 1e-6];
        let var_f = [sf[0] * sf[0] * corr + 1e-6, sf[1] * sf[1] * corr + 1e-6];
        let mut oracle = (mu_r[0] - mu_f[0]).powi(2) + (mu_r[1] - mu_f[1]).powi(2);
        for k in 0..2 {
            oracle += var_r[k] + var_f[k] - 2.0 * (var_r[k] * var_f[k]).sqrt();
        }
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - oracle).abs() < 1e-6, "{d} vs {oracle}");
    }

    #[test]
    fn frechet_symmetry_and_dim_mismatch() {
        let mut rng = stream(5, "test/emb");
        let a = Array2::from_shape_fn((32, 4), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array2::from_shape_fn((32, 4), |_| rng.gen_range(-1.0f32..1.0) + 0.5);
        let d1 = frechet_distance(&a, &b).unwrap();
        let d2 = frechet_distance(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-9);
        let c = Array2::from_shape_fn((32, 3), |_| 0.0f32);
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn ssfid_identity_generator_near_noise_floor() {
        // identity translation: per-attribute distances equal real-vs-real 0
        let schema = toy_schema();
        let mut rng = stream(6, "test/imgs");
        let images = Array4::from_shape_fn((24, 3, 8, 8), |_| rng.gen_range(-1.0f32..1.0));
        let labels: Vec<AttributeLabel> = (0..24)
            .map(|i| {
                let mut v = vec![0u8; 5];
                v[i % 5] = 1;
                label(&v)
            })
            .collect();
        let embedder = RandomProjEmbedder::new(8, 0).unwrap();
        let embed = |x: &Array4<f32>| embedder.embed(x);
        let translate = |xs: &Array4<f32>, _d: &Array2<f32>| Ok(xs.clone());
        let d = ssfid_protocol(&translate, &embed, &images, &labels, &schema).unwrap();
        assert!(d.abs() < 1e-3, "identity generator ssfid {d}");

        // constant-output generator sits well above that floor
        let constant = |xs: &Array4<f32>, _d: &Array2<f32>| -> Result<Array4<f32>> {
            Ok(Array4::from_elem(xs.raw_dim(), 0.42f32))
        };
        let dc = ssfid_protocol(&constant, &embed, &images, &labels, &schema).unwrap();
        assert!(dc > 10.0 * (d.abs() + 1e-6), "collapsed generator ssfid {dc}");
    }

    #[test]
    fn breakdown_report_consistency() {
        let r1 = EvalReport {
            method: "baseline".into(),
            config_hash: "x".into(),
            lambda_sc: 0.0,
            attributes: vec!["a".into(), "b".into()],
            accuracy: vec![0.5, 0.7],
            mean_accuracy: 0.6,
            ssfid: 1.0,
            is_mean: 2.0,
            is_std: 0.1,
            classifier_held_out: vec![0.9, 0.9],
        };
        let mut r2 = r1.clone();
        r2.method = "secgan".into();
        r2.accuracy = vec![0.6, 0.8];
        r2.mean_accuracy = 0.7;
        let (table, bars) = accuracy_breakdown_report(&[r1.clone(), r2]).unwrap();
        assert!(table.contains("baseline\tsecgan") || table.contains("baseline"));
        assert_eq!(bars.len(), 2);
        assert_eq!(bars[0].1.len(), 2);

        let mut broken = r1;
        broken.mean_accuracy = 0.61;
        assert!(accuracy_breakdown_report(&[broken]).is_err());
    }

    #[test]
    fn classifier_single_class_warns_but_trains() {
        let images = Array4::from_elem((8, 3, 8, 8), 0.1f32);
        let labels: Vec<AttributeLabel> = (0..8).map(|_| label(&[1, 0])).collect();
        let config = ClassifierTrainConfig {
            widths: [4, 6, 8],
            fc_width: 8,
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
        };
        let attrs = vec!["on".to_string(), "off".to_string()];
        let out = train_attribute_classifier(&images, &labels, &images, &labels, &attrs, &config)
            .unwrap();
        assert_eq!(out.warnings.len(), 2);
    }
}
