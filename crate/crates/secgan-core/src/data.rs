//! Dataset ingestion and the procedural toy dataset.
//!
//! Dataset root layout: `images/` + `attributes.txt`, plus `masks/` with
//! class-index PNGs when ground truth is available (toy data, parser
//! training). The annotation format is the CelebA convention: a count line,
//! a names line, then `filename v1 ... vk` rows with values in {-1, 1}.

use crate::domain::{
    reverse_attribute, AttributeLabel, AttributeSchema, SegmentTaxonomy, NUM_SEGMENTS,
};
use crate::error::{Result, SecganError};
use crate::rng::stream;
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Order-based split sizes: the first `train` records train, the next `val`
/// validate, the following `test` test (CelebA convention).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
pub struct Record {
    pub image_path: PathBuf,
    pub label: AttributeLabel,
    pub split: Split,
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct AttributeDataset {
    pub root: PathBuf,
    pub schema: AttributeSchema,
    pub resolution: usize,
    pub records: Vec<Record>,
}

/// Names that form the mutually exclusive hair-colour group when present.
const HAIR_COLOUR_NAMES: [&str; 5] =
    ["black_hair", "blond_hair", "blonde_hair", "brown_hair", "gray_hair"];

fn hair_group(names: &[String]) -> Vec<usize> {
    names
        .iter()
        .enumerate()
        .filter(|(_, n)| HAIR_COLOUR_NAMES.contains(&n.to_lowercase().as_str()))
        .map(|(i, _)| i)
        .collect()
}

/// Parse `attributes.txt` and assemble the dataset. When `selected` is given,
/// labels are projected onto those attribute columns, in the selection's
/// order. Every referenced image file must exist.
pub fn load_attribute_dataset(
    root: &Path,
    split: &SplitConfig,
    selected: Option<&[String]>,
    resolution: usize,
) -> Result<AttributeDataset> {
    let ann_path = root.join("attributes.txt");
    let text = std::fs::read_to_string(&ann_path)
        .map_err(|e| SecganError::Dataset(format!("{}: {e}", ann_path.display())))?;
    let mut lines = text.lines().enumerate();

    let (_, count_line) = lines
        .next()
        .ok_or_else(|| SecganError::Dataset("attributes.txt is empty".into()))?;
    count_line.trim().parse::<usize>().map_err(|_| {
        SecganError::Dataset(format!("line 1: expected a count, got '{count_line}'"))
    })?;
    let (_, names_line) = lines
        .next()
        .ok_or_else(|| SecganError::Dataset("attributes.txt has no attribute names".into()))?;
    let all_names: Vec<String> = names_line.split_whitespace().map(|s| s.to_string()).collect();
    if all_names.is_empty() {
        return Err(SecganError::Dataset("attribute names line is empty".into()));
    }

    let columns: Vec<usize> = match selected {
        None => (0..all_names.len()).collect(),
        Some(sel) => sel
            .iter()
            .map(|want| {
                all_names.iter().position(|n| n == want).ok_or_else(|| {
                    SecganError::Dataset(format!("selected attribute '{want}' not in file"))
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let names: Vec<String> = columns.iter().map(|&c| all_names[c].clone()).collect();
    let group = hair_group(&names);
    let groups = if group.len() >= 2 { vec![group] } else { vec![] };
    let schema = AttributeSchema::new(names, groups)?;

    let masks_dir = root.join("masks");
    let have_masks = masks_dir.is_dir();
    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let fname = parts.next().ok_or_else(|| {
            SecganError::Dataset(format!("line {}: missing filename", lineno + 1))
        })?;
        let values: Vec<&str> = parts.collect();
        if values.len() != all_names.len() {
            return Err(SecganError::Dataset(format!(
                "line {}: expected {} values, found {}",
                lineno + 1,
                all_names.len(),
                values.len()
            )));
        }
        let mut bits = Vec::with_capacity(columns.len());
        for &c in &columns {
            let v = values[c];
            let bit = match v {
                "1" => 1u8,
                "-1" | "0" => 0u8,
                other => {
                    return Err(SecganError::Dataset(format!(
                        "line {}: bad attribute value '{other}'",
                        lineno + 1
                    )))
                }
            };
            bits.push(bit);
        }
        let image_path = root.join("images").join(fname);
        if !image_path.is_file() {
            return Err(SecganError::Dataset(format!(
                "missing image file: {}",
                image_path.display()
            )));
        }
        let mask_path = if have_masks {
            let p = masks_dir.join(fname);
            p.is_file().then_some(p)
        } else {
            None
        };
        let idx = records.len();
        let split = if idx < split.train {
            Split::Train
        } else if idx < split.train + split.val {
            Split::Val
        } else if idx < split.train + split.val + split.test {
            Split::Test
        } else {
            break;
        };
        records.push(Record {
            image_path,
            label: AttributeLabel::new(bits)?,
            split,
            mask_path,
        });
    }
    if records.is_empty() {
        return Err(SecganError::Dataset("no records in attributes.txt".into()));
    }
    Ok(AttributeDataset { root: root.to_path_buf(), schema, resolution, records })
}

/// Centre-crop to the largest square, bilinear-resize to the target
/// resolution, and scale into [-1, 1] channel-first.
pub fn preprocess(img: &DynamicImage, target_resolution: usize) -> Result<Array3<f32>> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    if side < 1 {
        return Err(SecganError::Dataset("empty image".into()));
    }
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = img.crop_imm(x0, y0, side, side);
    let resized = if side as usize == target_resolution {
        cropped
    } else {
        cropped.resize_exact(target_resolution as u32, target_resolution as u32, FilterType::Triangle)
    };
    let rgb = resized.to_rgb8();
    let mut out = Array3::zeros((3, target_resolution, target_resolution));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// How to pick target labels for a batch of source labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Random permutation of the batch's own labels (training default).
    Shuffle,
    /// Reverse attribute `k` on every example (evaluation protocol).
    Reverse(usize),
    /// Uniformly random one-hot labels (expression datasets).
    RandomExpression,
}

pub fn sample_target_labels<R: Rng>(
    y_src: &[AttributeLabel],
    mode: TargetMode,
    schema: &AttributeSchema,
    rng: &mut R,
) -> Result<Vec<AttributeLabel>> {
    if y_src.is_empty() {
        return Err(SecganError::contract("empty batch"));
    }
    match mode {
        TargetMode::Shuffle => {
            let mut idx: Vec<usize> = (0..y_src.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            Ok(idx.into_iter().map(|i| y_src[i].clone()).collect())
        }
        TargetMode::Reverse(k) => y_src
            .iter()
            .map(|y| reverse_attribute(y, k, schema))
            .collect::<Result<Vec<_>>>(),
        TargetMode::RandomExpression => {
            let n = y_src[0].len();
            (0..y_src.len())
                .map(|_| {
                    let k = rng.gen_range(0..n);
                    let mut v = vec![0u8; n];
                    v[k] = 1;
                    AttributeLabel::new(v)
                })
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// toy dataset
// ---------------------------------------------------------------------------

/// Procedural face-like renders: a skin ellipse, a hair cap whose colour
/// encodes the hair attribute, optional eyeglass frames, and an open or
/// closed mouth. Every render comes with an exact one-hot mask over
/// {skin, eyeglasses, mouth, hair, others}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub canvas: usize,
    pub seed: u64,
    /// Probabilities of blonde/brown/black hair; the remainder is neutral.
    pub p_hair: [f64; 3],
    pub p_eyeglasses: f64,
    pub p_mouth_open: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            canvas: 32,
            seed: 0,
            p_hair: [0.25, 0.25, 0.25],
            p_eyeglasses: 0.5,
            p_mouth_open: 0.5,
        }
    }
}

pub fn toy_schema() -> AttributeSchema {
    AttributeSchema::new(
        vec![
            "blonde_hair".into(),
            "brown_hair".into(),
            "black_hair".into(),
            "eyeglasses".into(),
            "mouth_open".into(),
        ],
        vec![vec![0, 1, 2]],
    )
    .expect("static schema")
}

pub const TOY_ATTRS: usize = 5;

const SEG_SKIN: usize = 0;
const SEG_EYEGLASSES: usize = 3;
const SEG_MOUTH: usize = 7;
const SEG_HAIR: usize = 10;
const SEG_OTHERS: usize = 11;

#[derive(Debug, Clone)]
pub struct ToyExample {
    /// `[3, h, h]` in [-1, 1], quantized to the PNG's 8-bit grid so on-disk
    /// and in-memory datasets are identical.
    pub image: Array3<f32>,
    pub label: AttributeLabel,
    /// `[12, h, h]` exact one-hot.
    pub mask: Array3<f32>,
}

struct Geometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    bg: [f64; 3],
    hair_jitter: [f64; 3],
    noise_seed: u64,
}

fn sample_label<R: Rng>(spec: &ToySpec, rng: &mut R) -> AttributeLabel {
    let mut v = vec![0u8; TOY_ATTRS];
    let r: f64 = rng.gen();
    if r < spec.p_hair[0] {
        v[0] = 1;
    } else if r < spec.p_hair[0] + spec.p_hair[1] {
        v[1] = 1;
    } else if r < spec.p_hair[0] + spec.p_hair[1] + spec.p_hair[2] {
        v[2] = 1;
    }
    if rng.gen::<f64>() < spec.p_eyeglasses {
        v[3] = 1;
    }
    if rng.gen::<f64>() < spec.p_mouth_open {
        v[4] = 1;
    }
    AttributeLabel::new(v).expect("binary by construction")
}

fn sample_geometry<R: Rng>(spec: &ToySpec, rng: &mut R) -> Geometry {
    let h = spec.canvas as f64;
    let s = h / 32.0;
    Geometry {
        cx: h / 2.0 + rng.gen_range(-1.5..1.5) * s,
        cy: h / 2.0 + rng.gen_range(-1.0..1.0) * s,
        rx: rng.gen_range(8.5..10.5) * s,
        ry: rng.gen_range(10.5..12.5) * s,
        skin: [
            208.0 + rng.gen_range(-22.0..22.0),
            168.0 + rng.gen_range(-20.0..20.0),
            138.0 + rng.gen_range(-18.0..18.0),
        ],
        bg: [
            42.0 + rng.gen_range(-12.0..12.0),
            48.0 + rng.gen_range(-12.0..12.0),
            64.0 + rng.gen_range(-14.0..14.0),
        ],
        hair_jitter: [
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
            rng.gen_range(-10.0..10.0),
        ],
        noise_seed: rng.gen(),
    }
}

fn hair_color(label: &AttributeLabel, jitter: &[f64; 3]) -> [f64; 3] {
    let base = if label.get(0) == 1 {
        [225.0, 195.0, 90.0] // blonde
    } else if label.get(1) == 1 {
        [115.0, 72.0, 40.0] // brown
    } else if label.get(2) == 1 {
        [28.0, 24.0, 22.0] // black
    } else {
        [150.0, 126.0, 104.0] // neutral
    };
    [base[0] + jitter[0], base[1] + jitter[1], base[2] + jitter[2]]
}

/// Render one example from explicit geometry and label. Used by the dataset
/// generator and by tests that hold the base face fixed while toggling one
/// attribute.
fn render(spec: &ToySpec, geom: &Geometry, label: &AttributeLabel) -> ToyExample {
    let h = spec.canvas;
    let s = spec.canvas as f64 / 32.0;
    let mut rgb = vec![[0f64; 3]; h * h];
    let mut seg = vec![SEG_OTHERS; h * h];

    let inside = |x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64| -> bool {
        let dx = (x - cx) / rx;
        let dy = (y - cy) / ry;
        dx * dx + dy * dy <= 1.0
    };

    let hairline = geom.cy - 0.25 * geom.ry;
    let hair_c = hair_color(label, &geom.hair_jitter);
    let eye_y = geom.cy - 0.20 * geom.ry;
    let eye_dx = 0.42 * geom.rx;
    let eye_r = 1.3 * s;
    let mouth_y = geom.cy + 0.55 * geom.ry;
    let mouth_hw = 3.2 * s;
    let mouth_hh = if label.get(4) == 1 { 2.6 * s } else { 0.9 * s };
    let mouth_c = if label.get(4) == 1 { [70.0, 22.0, 26.0] } else { [150.0, 62.0, 58.0] };

    for yi in 0..h {
        for xi in 0..h {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let idx = yi * h + xi;
            let in_face = inside(x, y, geom.cx, geom.cy, geom.rx, geom.ry);
            let in_outer = inside(x, y, geom.cx, geom.cy, geom.rx + 2.0 * s, geom.ry + 2.0 * s);

            // background
            let mut color = geom.bg;
            let mut segment = SEG_OTHERS;
            // skin
            if in_face {
                color = geom.skin;
                segment = SEG_SKIN;
            }
            // hair cap: the outer ellipse above the hairline, plus the outer
            // ring down the sides of the face
            let side_ring = in_outer && !in_face && y < geom.cy + 0.35 * geom.ry;
            if (in_outer && y < hairline) || side_ring {
                color = hair_c;
                segment = SEG_HAIR;
            }
            // eyes (cosmetic; remain skin in the mask)
            let in_left_eye = inside(x, y, geom.cx - eye_dx, eye_y, eye_r, eye_r);
            let in_right_eye = inside(x, y, geom.cx + eye_dx, eye_y, eye_r, eye_r);
            if segment == SEG_SKIN && (in_left_eye || in_right_eye) {
                color = [35.0, 30.0, 30.0];
            }
            // eyeglass frames
            if label.get(3) == 1 {
                let fw = 2.9 * s;
                let fh = 2.3 * s;
                let t = 0.8 * s;
                let mut on_frame = false;
                for &ex in &[geom.cx - eye_dx, geom.cx + eye_dx] {
                    let dx = (x - ex).abs();
                    let dy = (y - eye_y).abs();
                    let in_outer_rect = dx <= fw && dy <= fh;
                    let in_inner_rect = dx <= fw - t && dy <= fh - t;
                    if in_outer_rect && !in_inner_rect {
                        on_frame = true;
                    }
                }
                // bridge between the lenses
                if (y - eye_y).abs() <= 0.5 * s && (x - geom.cx).abs() <= eye_dx - 2.9 * s + 1.0 * s
                {
                    on_frame = true;
                }
                if on_frame {
                    color = [16.0, 15.0, 15.0];
                    segment = SEG_EYEGLASSES;
                }
            }
            // mouth
            if inside(x, y, geom.cx, mouth_y, mouth_hw, mouth_hh) {
                color = mouth_c;
                segment = SEG_MOUTH;
            }
            rgb[idx] = color;
            seg[idx] = segment;
        }
    }

    // light deterministic pixel noise
    let mut noise = stream(geom.noise_seed, "toy/noise");
    let mut image = Array3::zeros((3, h, h));
    let mut mask = Array3::zeros((NUM_SEGMENTS, h, h));
    for yi in 0..h {
        for xi in 0..h {
            let idx = yi * h + xi;
            for c in 0..3 {
                let v = rgb[idx][c] + noise.gen_range(-5.0..5.0);
                let q = v.round().clamp(0.0, 255.0) as u8;
                image[[c, yi, xi]] = q as f32 / 127.5 - 1.0;
            }
            mask[[seg[idx], yi, xi]] = 1.0;
        }
    }
    ToyExample { image, label: label.clone(), mask }
}

/// Deterministically generate `n` toy examples.
pub fn generate_toy_dataset(spec: &ToySpec, n: usize) -> Result<Vec<ToyExample>> {
    if n < 1 {
        return Err(SecganError::contract("toy dataset size must be >= 1"));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = stream(spec.seed, &format!("toy/{i}"));
            let label = sample_label(spec, &mut rng);
            let geom = sample_geometry(spec, &mut rng);
            render(spec, &geom, &label)
        })
        .collect())
}

/// Same base face as example `i`, with an explicit label. Lets tests and
/// oracles toggle one attribute while holding everything else fixed.
pub fn render_toy_with_label(spec: &ToySpec, i: usize, label: &AttributeLabel) -> ToyExample {
    let mut rng = stream(spec.seed, &format!("toy/{i}"));
    let _ = sample_label(spec, &mut rng);
    let geom = sample_geometry(spec, &mut rng);
    render(spec, &geom, label)
}

fn image_to_rgb8(image: &Array3<f32>) -> RgbImage {
    let h = image.shape()[1];
    let w = image.shape()[2];
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                ((image[[0, y, x]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8,
                ((image[[1, y, x]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8,
                ((image[[2, y, x]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8,
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

fn mask_to_gray(mask: &Array3<f32>) -> GrayImage {
    let h = mask.shape()[1];
    let w = mask.shape()[2];
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = (0..NUM_SEGMENTS).find(|&c| mask[[c, y, x]] == 1.0).unwrap_or(0);
            out.put_pixel(x as u32, y as u32, image::Luma([c as u8]));
        }
    }
    out
}

/// Write a generated toy dataset in the standard root layout.
pub fn write_toy_dataset(spec: &ToySpec, n: usize, root: &Path) -> Result<()> {
    let examples = generate_toy_dataset(spec, n)?;
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    std::fs::create_dir_all(&images_dir)?;
    std::fs::create_dir_all(&masks_dir)?;
    let schema = toy_schema();
    let mut ann = String::new();
    ann.push_str(&format!("{n}\n"));
    ann.push_str(&schema.names.join(" "));
    ann.push('\n');
    for (i, ex) in examples.iter().enumerate() {
        let fname = format!("img_{i:06}.png");
        image_to_rgb8(&ex.image).save(images_dir.join(&fname))?;
        mask_to_gray(&ex.mask).save(masks_dir.join(&fname))?;
        ann.push_str(&fname);
        for &v in ex.label.values() {
            ann.push_str(if v == 1 { " 1" } else { " -1" });
        }
        ann.push('\n');
    }
    std::fs::write(root.join("attributes.txt"), ann)?;
    // taxonomy marker lets tools validate the mask encoding
    std::fs::write(root.join("taxonomy.txt"), SegmentTaxonomy::names().join("\n"))?;
    Ok(())
}

/// Load one record's pixels (preprocessed) and optional mask.
pub fn load_example(
    record: &Record,
    resolution: usize,
) -> Result<(Array3<f32>, Option<Array3<f32>>)> {
    let img = image::open(&record.image_path).map_err(|e| {
        SecganError::Dataset(format!("{}: {e}", record.image_path.display()))
    })?;
    let pixels = preprocess(&img, resolution)?;
    let mask = match &record.mask_path {
        None => None,
        Some(p) => {
            let m = image::open(p)
                .map_err(|e| SecganError::Dataset(format!("{}: {e}", p.display())))?
                .to_luma8();
            if m.width() as usize != resolution || m.height() as usize != resolution {
                return Err(SecganError::Dataset(format!(
                    "{}: mask resolution {}x{} does not match {resolution}",
                    p.display(),
                    m.width(),
                    m.height()
                )));
            }
            let mut arr = Array3::zeros((NUM_SEGMENTS, resolution, resolution));
            for (x, y, px) in m.enumerate_pixels() {
                let c = px.0[0] as usize;
                if c >= NUM_SEGMENTS {
                    return Err(SecganError::Dataset(format!(
                        "{}: class index {c} out of range",
                        p.display()
                    )));
                }
                arr[[c, y as usize, x as usize]] = 1.0;
            }
            Some(arr)
        }
    };
    Ok((pixels, mask))
}

/// Materialized split: images (and masks where present) stacked into arrays.
pub struct SplitTensors {
    pub images: Array4<f32>,
    pub labels: Vec<AttributeLabel>,
    pub masks: Option<Array4<f32>>,
}

pub fn load_split(dataset: &AttributeDataset, split: Split) -> Result<SplitTensors> {
    let records: Vec<&Record> =
        dataset.records.iter().filter(|r| r.split == split).collect();
    if records.is_empty() {
        return Err(SecganError::Dataset(format!("split {split:?} is empty")));
    }
    let r = dataset.resolution;
    let all_masks = records.iter().all(|rec| rec.mask_path.is_some());
    let mut images = Array4::zeros((records.len(), 3, r, r));
    let mut masks = if all_masks {
        Some(Array4::zeros((records.len(), NUM_SEGMENTS, r, r)))
    } else {
        None
    };
    let mut labels = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let (img, mask) = load_example(rec, r)?;
        images.index_axis_mut(ndarray::Axis(0), i).assign(&img);
        if let (Some(ms), Some(m)) = (masks.as_mut(), mask) {
            ms.index_axis_mut(ndarray::Axis(0), i).assign(&m);
        }
        labels.push(rec.label.clone());
    }
    Ok(SplitTensors { images, labels, masks })
}
