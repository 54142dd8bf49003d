//! Shared value types: image batches, soft/one-hot semantic masks, attribute
//! labels and their difference vectors, and the fixed 12-segment taxonomy.
//! All values are immutable after construction and safe to share.

use crate::error::{Result, SecganError};
use ndarray::{Array2, Array4};

/// The fixed segment taxonomy, in serialization order.
pub const SEGMENT_NAMES: [&str; 12] = [
    "skin", "eyebrows", "eyes", "eyeglasses", "ears", "earrings", "nose", "mouth", "lips",
    "neck", "hair", "others",
];

pub const NUM_SEGMENTS: usize = 12;

/// Ordered list of the 12 segment names; the order is fixed for all
/// serialization (checkpoints, mask files).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentTaxonomy;

impl SegmentTaxonomy {
    pub fn names() -> &'static [&'static str; 12] {
        &SEGMENT_NAMES
    }

    pub fn index_of(name: &str) -> Option<usize> {
        SEGMENT_NAMES.iter().position(|&n| n == name)
    }

    /// Stable hash of the taxonomy, stored in parser checkpoints.
    pub fn hash() -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for name in SEGMENT_NAMES {
            hasher.update(name.as_bytes());
            hasher.update(b"\n");
        }
        format!("{:x}", hasher.finalize())
    }
}

/// Batch of RGB images, channel-first, values in [-1, 1].
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Array4<f32>,
}

impl ImageBatch {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let shape = data.shape();
        if shape[0] < 1 || shape[1] != 3 {
            return Err(SecganError::shape(format!(
                "image batch must be [B>=1, 3, H, W], got {shape:?}"
            )));
        }
        if shape[2] != shape[3] {
            return Err(SecganError::shape(format!(
                "image batch must be square, got {}x{}",
                shape[2], shape[3]
            )));
        }
        for &v in data.iter() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(SecganError::contract(format!(
                    "image value {v} outside [-1, 1]"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Batch of per-pixel probability distributions over the 12 segments.
#[derive(Debug, Clone)]
pub struct SoftMask {
    data: Array4<f32>,
}

pub const MASK_SUM_TOL: f32 = 1e-5;

impl SoftMask {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let shape = data.shape();
        if shape[1] != NUM_SEGMENTS {
            return Err(SecganError::shape(format!(
                "soft mask must have {NUM_SEGMENTS} channels, got {}",
                shape[1]
            )));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let mut sum = 0.0f32;
                    for c in 0..NUM_SEGMENTS {
                        let v = data[[bi, c, i, j]];
                        if !(0.0..=1.0).contains(&v) {
                            return Err(SecganError::contract(format!(
                                "mask probability {v} outside [0, 1]"
                            )));
                        }
                        sum += v;
                    }
                    if (sum - 1.0).abs() > MASK_SUM_TOL {
                        return Err(SecganError::contract(format!(
                            "pixel ({bi},{i},{j}) probabilities sum to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Batch of per-pixel one-hot segment indicators.
#[derive(Debug, Clone)]
pub struct OneHotMask {
    data: Array4<f32>,
}

impl OneHotMask {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        let shape = data.shape();
        if shape[1] != NUM_SEGMENTS {
            return Err(SecganError::shape(format!(
                "one-hot mask must have {NUM_SEGMENTS} channels, got {}",
                shape[1]
            )));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let mut ones = 0u32;
                    for c in 0..NUM_SEGMENTS {
                        let v = data[[bi, c, i, j]];
                        if v != 0.0 && v != 1.0 {
                            return Err(SecganError::contract(format!(
                                "one-hot entry {v} not in {{0, 1}}"
                            )));
                        }
                        ones += v as u32;
                    }
                    if ones != 1 {
                        return Err(SecganError::contract(format!(
                            "pixel ({bi},{i},{j}) has {ones} active channels"
                        )));
                    }
                }
            }
        }
        Ok(Self { data })
    }

    /// Build from per-pixel class indices.
    pub fn from_indices(indices: &Array2<u8>, batch: usize) -> Result<Self> {
        let (h, w) = (indices.shape()[0], indices.shape()[1]);
        let mut data = Array4::zeros((batch, NUM_SEGMENTS, h, w));
        for i in 0..h {
            for j in 0..w {
                let c = indices[[i, j]] as usize;
                if c >= NUM_SEGMENTS {
                    return Err(SecganError::contract(format!(
                        "class index {c} out of range"
                    )));
                }
                for b in 0..batch {
                    data[[b, c, i, j]] = 1.0;
                }
            }
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[2]
    }

    /// Class-index plane of one example, for the mask export format.
    pub fn class_indices(&self, example: usize) -> Array2<u8> {
        let (h, w) = (self.data.shape()[2], self.data.shape()[3]);
        let mut out = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                for c in 0..NUM_SEGMENTS {
                    if self.data[[example, c, i, j]] == 1.0 {
                        out[[i, j]] = c as u8;
                        break;
                    }
                }
            }
        }
        out
    }
}

/// Per-pixel argmax indicator of a soft mask; ties break to the lowest
/// channel index. The result carries no gradient by construction.
pub fn to_one_hot(m: &SoftMask) -> OneHotMask {
    let shape = m.data.shape();
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let mut out = Array4::zeros((b, NUM_SEGMENTS, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut best = 0usize;
                let mut best_v = m.data[[bi, 0, i, j]];
                for c in 1..NUM_SEGMENTS {
                    let v = m.data[[bi, c, i, j]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out[[bi, best, i, j]] = 1.0;
            }
        }
    }
    OneHotMask { data: out }
}

/// Binary attribute (or one-hot expression) label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeLabel {
    values: Vec<u8>,
}

impl AttributeLabel {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(SecganError::contract("attribute values must be 0 or 1"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, k: usize) -> u8 {
        self.values[k]
    }
}

/// Signed difference between two attribute labels, entries in {-1, 0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffLabel {
    values: Vec<i8>,
}

impl DiffLabel {
    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn zero(n: usize) -> Self {
        Self { values: vec![0; n] }
    }
}

/// y_diff = y_trg - y_src, elementwise.
pub fn label_diff(y_src: &AttributeLabel, y_trg: &AttributeLabel) -> Result<DiffLabel> {
    if y_src.len() != y_trg.len() {
        return Err(SecganError::contract(format!(
            "label length mismatch: {} vs {}",
            y_src.len(),
            y_trg.len()
        )));
    }
    let values = y_src
        .values
        .iter()
        .zip(y_trg.values.iter())
        .map(|(&s, &t)| t as i8 - s as i8)
        .collect();
    Ok(DiffLabel { values })
}

/// Attribute names plus mutually exclusive index groups (e.g. hair colours).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttributeSchema {
    pub names: Vec<String>,
    pub exclusive_groups: Vec<Vec<usize>>,
}

impl AttributeSchema {
    pub fn new(names: Vec<String>, exclusive_groups: Vec<Vec<usize>>) -> Result<Self> {
        let n = names.len();
        for group in &exclusive_groups {
            for &k in group {
                if k >= n {
                    return Err(SecganError::Config(format!(
                        "exclusive group index {k} out of range for {n} attributes"
                    )));
                }
            }
        }
        Ok(Self { names, exclusive_groups })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn group_of(&self, k: usize) -> Option<&[usize]> {
        self.exclusive_groups
            .iter()
            .find(|g| g.contains(&k))
            .map(|g| g.as_slice())
    }
}

/// Flip attribute `k`. When the flip turns a mutually exclusive attribute on,
/// the rest of its group is turned off; turning one off leaves the group off
/// (a negated hair colour becomes "no declared colour", not another colour).
pub fn reverse_attribute(
    y_src: &AttributeLabel,
    k: usize,
    schema: &AttributeSchema,
) -> Result<AttributeLabel> {
    if k >= y_src.len() {
        return Err(SecganError::contract(format!(
            "attribute index {k} out of range for {} attributes",
            y_src.len()
        )));
    }
    let mut values = y_src.values.clone();
    values[k] = 1 - values[k];
    if values[k] == 1 {
        if let Some(group) = schema.group_of(k) {
            for &other in group {
                if other != k {
                    values[other] = 0;
                }
            }
        }
    }
    Ok(AttributeLabel { values })
}

/// Labels of a batch as a `[B, n]` f32 array for the graph.
pub fn labels_to_array(labels: &[AttributeLabel]) -> Array2<f32> {
    let b = labels.len();
    let n = labels.first().map(|l| l.len()).unwrap_or(0);
    let mut out = Array2::zeros((b, n));
    for (i, l) in labels.iter().enumerate() {
        for (j, &v) in l.values().iter().enumerate() {
            out[[i, j]] = v as f32;
        }
    }
    out
}

/// Difference labels of a batch as a `[B, n]` f32 array.
pub fn diffs_to_array(diffs: &[DiffLabel]) -> Array2<f32> {
    let b = diffs.len();
    let n = diffs.first().map(|l| l.len()).unwrap_or(0);
    let mut out = Array2::zeros((b, n));
    for (i, l) in diffs.iter().enumerate() {
        for (j, &v) in l.values().iter().enumerate() {
            out[[i, j]] = v as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn label(v: &[u8]) -> AttributeLabel {
        AttributeLabel::new(v.to_vec()).unwrap()
    }

    fn plain_schema(n: usize) -> AttributeSchema {
        AttributeSchema::new((0..n).map(|i| format!("a{i}")).collect(), vec![]).unwrap()
    }

    #[test]
    fn label_diff_examples() {
        let d = label_diff(&label(&[1, 0, 1]), &label(&[0, 0, 1])).unwrap();
        assert_eq!(d.values(), &[-1, 0, 0]);
        let d = label_diff(&label(&[0, 1]), &label(&[0, 1])).unwrap();
        assert_eq!(d.values(), &[0, 0]);
        assert!(d.is_zero());
        let d = label_diff(&label(&[1, 1, 0, 0]), &label(&[0, 1, 1, 0])).unwrap();
        assert_eq!(d.values(), &[-1, 0, 1, 0]);
    }

    #[test]
    fn label_diff_length_mismatch_is_error() {
        assert!(label_diff(&label(&[1, 0]), &label(&[1, 0, 1])).is_err());
    }

    #[test]
    fn reverse_attribute_examples() {
        // hair colour group: indices 0 (blonde), 1 (brown), 2 (black)
        let schema = AttributeSchema::new(
            vec!["blonde".into(), "brown".into(), "black".into(), "glasses".into()],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        // flipping blonde on clears brown
        let y = reverse_attribute(&label(&[0, 1, 0, 0]), 0, &schema).unwrap();
        assert_eq!(y.values(), &[1, 0, 0, 0]);
        // plain bit flip
        let y = reverse_attribute(&label(&[1, 0]), 0, &plain_schema(2)).unwrap();
        assert_eq!(y.values(), &[0, 0]);
        // group all-off, flipping one on has no conflict
        let y = reverse_attribute(&label(&[0, 0, 0, 0]), 1, &schema).unwrap();
        assert_eq!(y.values(), &[0, 1, 0, 0]);
        // flipping a colour off does not turn another on
        let y = reverse_attribute(&label(&[0, 1, 0, 0]), 1, &schema).unwrap();
        assert_eq!(y.values(), &[0, 0, 0, 0]);
    }

    #[test]
    fn reverse_attribute_out_of_range() {
        assert!(reverse_attribute(&label(&[0, 1]), 5, &plain_schema(2)).is_err());
    }

    #[test]
    fn reverse_twice_restores_non_exclusive() {
        let schema = plain_schema(3);
        let y0 = label(&[1, 0, 1]);
        let y1 = reverse_attribute(&y0, 1, &schema).unwrap();
        let y2 = reverse_attribute(&y1, 1, &schema).unwrap();
        assert_eq!(y0, y2);
    }

    #[test]
    fn to_one_hot_argmax_and_ties() {
        let mut data = Array4::zeros((1, NUM_SEGMENTS, 1, 2));
        // pixel 0: max on channel 1
        data[[0, 0, 0, 0]] = 0.2;
        data[[0, 1, 0, 0]] = 0.5;
        data[[0, 2, 0, 0]] = 0.3;
        // pixel 1: tie between channels 0 and 1
        data[[0, 0, 0, 1]] = 0.5;
        data[[0, 1, 0, 1]] = 0.5;
        let m = SoftMask::new(data).unwrap();
        let oh = to_one_hot(&m);
        assert_eq!(oh.data()[[0, 1, 0, 0]], 1.0);
        assert_eq!(oh.data()[[0, 0, 0, 1]], 1.0);
        assert_eq!(oh.data()[[0, 1, 0, 1]], 0.0);
        OneHotMask::new(oh.data().clone()).unwrap();
    }

    #[test]
    fn to_one_hot_idempotent_on_one_hot() {
        let mut data = Array4::zeros((2, NUM_SEGMENTS, 2, 2));
        for b in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    data[[b, (b + i * 2 + j) % NUM_SEGMENTS, i, j]] = 1.0;
                }
            }
        }
        let soft = SoftMask::new(data.clone()).unwrap();
        let oh = to_one_hot(&soft);
        assert_eq!(oh.data(), &data);
    }

    #[test]
    fn soft_mask_validation() {
        let bad = Array4::from_elem((1, NUM_SEGMENTS, 1, 1), 0.5);
        assert!(SoftMask::new(bad).is_err());
        let good = Array4::from_elem((1, NUM_SEGMENTS, 1, 1), 1.0 / NUM_SEGMENTS as f32);
        assert!(SoftMask::new(good).is_ok());
    }

    #[test]
    fn image_batch_range_checked() {
        let bad = Array4::from_elem((1, 3, 4, 4), 1.5);
        assert!(ImageBatch::new(bad).is_err());
        let good = Array4::from_elem((1, 3, 4, 4), 0.25);
        assert!(ImageBatch::new(good).is_ok());
    }

    #[test]
    fn class_index_roundtrip() {
        let mut data = Array4::zeros((1, NUM_SEGMENTS, 2, 2));
        data[[0, 3, 0, 0]] = 1.0;
        data[[0, 11, 0, 1]] = 1.0;
        data[[0, 0, 1, 0]] = 1.0;
        data[[0, 10, 1, 1]] = 1.0;
        let oh = OneHotMask::new(data).unwrap();
        let idx = oh.class_indices(0);
        let back = OneHotMask::from_indices(&idx, 1).unwrap();
        assert_eq!(back.data(), oh.data());
    }

    #[test]
    fn taxonomy_fixed() {
        assert_eq!(SegmentTaxonomy::names().len(), 12);
        assert_eq!(SegmentTaxonomy::index_of("skin"), Some(0));
        assert_eq!(SegmentTaxonomy::index_of("others"), Some(11));
    }
}
