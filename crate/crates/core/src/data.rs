//! Segmentation samples, run-length masks, patch coverage and the synthetic
//! shape dataset.
//!
//! On disk a dataset is a directory with `manifest.json` plus one JSON file
//! per sample. Masks are stored as row-major run lengths that alternate
//! between zeros and ones, always starting with a (possibly empty) run of
//! zeros.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "fisa-lab/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BACKGROUND_CLASS: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask has {} pixels, expected {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    /// Decodes alternating zero/one run lengths.
    pub fn from_rle(height: usize, width: usize, rle: &[u32]) -> Result<Self> {
        let total: u64 = rle.iter().map(|&r| r as u64).sum();
        if total != (height * width) as u64 {
            return Err(Error::format(
                "rle",
                format!("run lengths sum to {total}, expected {}", height * width),
            ));
        }
        let mut bits = Vec::with_capacity(height * width);
        for (i, &run) in rle.iter().enumerate() {
            bits.extend(std::iter::repeat(i % 2 == 1).take(run as usize));
        }
        Ok(Self { height, width, bits })
    }

    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(count);
                count = 0;
                current = b;
            }
            count += 1;
        }
        runs.push(count);
        runs
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub segment_id: u32,
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub sample_id: String,
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W×3`, values in `[0, 1]`.
    pub image: Vec<f32>,
    pub segments: Vec<Segment>,
}

impl SegmentationSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let ctx = |m: String| Error::format(self.sample_id.clone(), m);
        if self.image.len() != self.height * self.width * 3 {
            return Err(ctx(format!("image has {} values, expected {}", self.image.len(), self.height * self.width * 3)));
        }
        let mut ids = BTreeSet::new();
        let mut owner = vec![false; self.height * self.width];
        for seg in &self.segments {
            if !ids.insert(seg.segment_id) {
                return Err(ctx(format!("duplicate segment id {}", seg.segment_id)));
            }
            if seg.class_id >= num_classes {
                return Err(ctx(format!("class id {} out of range", seg.class_id)));
            }
            if seg.mask.height() != self.height || seg.mask.width() != self.width {
                return Err(ctx(format!("segment {} has wrong mask shape", seg.segment_id)));
            }
            for (o, &b) in owner.iter_mut().zip(seg.mask.bits()) {
                if b && *o {
                    return Err(ctx(format!("segment {} overlaps another segment", seg.segment_id)));
                }
                *o |= b;
            }
        }
        Ok(())
    }

    /// Per-pixel ground-truth class, `None` where no segment covers the pixel.
    pub fn semantic_map(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.height * self.width];
        for seg in &self.segments {
            for (m, &b) in map.iter_mut().zip(seg.mask.bits()) {
                if b {
                    *m = Some(seg.class_id);
                }
            }
        }
        map
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    class_names: Vec<String>,
    is_thing: Vec<bool>,
}

impl LabelVocabulary {
    pub fn new(class_names: Vec<String>, is_thing: Vec<bool>) -> Result<Self> {
        if class_names.len() != is_thing.len() {
            return Err(Error::Config("class_names and is_thing differ in length".into()));
        }
        let unique: BTreeSet<&String> = class_names.iter().collect();
        if unique.len() != class_names.len() {
            return Err(Error::Config("class names must be unique".into()));
        }
        Ok(Self { class_names, is_thing })
    }

    /// The names used by the synthetic dataset: `background` then one
    /// `"<color> <shape>"` name per foreground class.
    pub fn synthetic(num_classes: usize) -> Self {
        let names = (0..num_classes).map(|c| class_signature(c, num_classes).name).collect();
        let is_thing = (0..num_classes).map(|c| c != BACKGROUND_CLASS).collect();
        Self::new(names, is_thing).expect("synthetic names are unique")
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn is_thing(&self) -> &[bool] {
        &self.is_thing
    }
}

/// Which patches of a row-major patch grid each mask touches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchCoverage {
    pub num_patches: usize,
    pub covered: Vec<Vec<bool>>,
}

impl PatchCoverage {
    pub fn from_masks(masks: &[BinaryMask], patch_size: usize) -> Result<Self> {
        let covered = masks
            .iter()
            .map(|m| rasterize_mask_to_patches(m, patch_size))
            .collect::<Result<Vec<_>>>()?;
        let num_patches = match masks.first() {
            Some(m) => (m.height() / patch_size) * (m.width() / patch_size),
            None => 0,
        };
        Ok(Self { num_patches, covered })
    }

    pub fn num_masks(&self) -> usize {
        self.covered.len()
    }
}

/// `covered[j]` is true iff at least one pixel of patch `j` (row-major over
/// the patch grid) is set.
pub fn rasterize_mask_to_patches(mask: &BinaryMask, patch_size: usize) -> Result<Vec<bool>> {
    if patch_size == 0 || mask.height() % patch_size != 0 || mask.width() % patch_size != 0 {
        return Err(Error::Shape(format!(
            "mask {}x{} is not divisible by patch size {patch_size}",
            mask.height(),
            mask.width()
        )));
    }
    let grid_w = mask.width() / patch_size;
    let mut covered = vec![false; (mask.height() / patch_size) * grid_w];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                covered[(y / patch_size) * grid_w + x / patch_size] = true;
            }
        }
    }
    Ok(covered)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub shapes_per_image: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_samples: 64, image_size: 32, num_classes: 5, shapes_per_image: 3, patch_size: 4, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub num_classes: usize,
    pub patch_size: usize,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: Option<PathBuf>,
    pub manifest: DatasetManifest,
    pub vocabulary: LabelVocabulary,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn patch_size(&self) -> usize {
        self.manifest.patch_size
    }

    /// The first `ceil(fraction·len)` samples (at least one when non-empty).
    pub fn fraction(&self, fraction: f64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("data fraction must be in (0, 1], got {fraction}")));
        }
        let n = ((self.samples.len() as f64 * fraction).ceil() as usize).clamp(1.min(self.samples.len()), self.samples.len());
        let mut out = self.clone();
        out.samples.truncate(n);
        out.manifest.samples.truncate(n);
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentFile {
    segment_id: u32,
    class_id: usize,
    rle: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct SampleFile {
    sample_id: String,
    height: usize,
    width: usize,
    image: Vec<Vec<[f32; 3]>>,
    segments: Vec<SegmentFile>,
}

impl SampleFile {
    fn from_sample(s: &SegmentationSample) -> Self {
        let image = (0..s.height)
            .map(|y| {
                (0..s.width)
                    .map(|x| {
                        let o = (y * s.width + x) * 3;
                        [s.image[o], s.image[o + 1], s.image[o + 2]]
                    })
                    .collect()
            })
            .collect();
        let segments = s
            .segments
            .iter()
            .map(|seg| SegmentFile { segment_id: seg.segment_id, class_id: seg.class_id, rle: seg.mask.to_rle() })
            .collect();
        Self { sample_id: s.sample_id.clone(), height: s.height, width: s.width, image, segments }
    }

    fn into_sample(self) -> Result<SegmentationSample> {
        let ctx = |m: String| Error::format(self.sample_id.clone(), m);
        if self.image.len() != self.height || self.image.iter().any(|r| r.len() != self.width) {
            return Err(ctx("image dimensions disagree with height/width".into()));
        }
        let image = self.image.iter().flatten().flatten().copied().collect();
        let mut segments = Vec::with_capacity(self.segments.len());
        for seg in &self.segments {
            let mask = BinaryMask::from_rle(self.height, self.width, &seg.rle).map_err(|e| {
                ctx(format!("segment {}: {e}", seg.segment_id))
            })?;
            segments.push(Segment { segment_id: seg.segment_id, class_id: seg.class_id, mask });
        }
        Ok(SegmentationSample { sample_id: self.sample_id, height: self.height, width: self.width, image, segments })
    }
}

pub fn sample_file_name(index: usize) -> String {
    format!("s{index:04}.json")
}

/// Generates the dataset in memory; a pure function of the config.
pub fn generate_samples(config: &SynthConfig) -> Result<Vec<SegmentationSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_samples).map(|i| synth_sample(config, i, &mut rng)).collect()
}

/// Generates the dataset and writes it under `out_dir`.
pub fn synthesize_dataset(config: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    let samples = generate_samples(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut names = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = sample_file_name(i);
        let path = out_dir.join(&name);
        let bytes = serde_json::to_vec(&SampleFile::from_sample(s))?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT.to_string(),
        num_classes: config.num_classes,
        patch_size: config.patch_size,
        samples: names,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        root: Some(out_dir.to_path_buf()),
        manifest,
        vocabulary: LabelVocabulary::synthetic(config.num_classes),
        samples,
    })
}

/// Loads a dataset from its manifest file, or from a directory containing one.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("unsupported format version `{}`", manifest.format_version),
        ));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for name in &manifest.samples {
        let p = root.join(name);
        let text = fs::read_to_string(&p).map_err(|e| Error::format(name.clone(), format!("cannot read sample file: {e}")))?;
        let file: SampleFile = serde_json::from_str(&text).map_err(|e| Error::format(name.clone(), e.to_string()))?;
        let sample = file.into_sample()?;
        sample.validate(manifest.num_classes)?;
        if sample.height % manifest.patch_size != 0 || sample.width % manifest.patch_size != 0 {
            return Err(Error::format(sample.sample_id.clone(), "image size not divisible by patch size"));
        }
        samples.push(sample);
    }
    Ok(Dataset { root: Some(root), vocabulary: LabelVocabulary::synthetic(manifest.num_classes), manifest, samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug)]
pub struct ClassSignature {
    pub name: String,
    pub shape: Option<ShapeKind>,
    pub color: [f32; 3],
}

const HUE_NAMES: [&str; 12] = [
    "red", "orange", "yellow", "chartreuse", "green", "spring", "cyan", "azure", "blue", "violet", "magenta", "rose",
];

/// Color and shape for each class. Foreground classes get distinct hues
/// spread around the color wheel and cycle through the three shapes.
pub fn class_signature(class_id: usize, num_classes: usize) -> ClassSignature {
    if class_id == BACKGROUND_CLASS {
        return ClassSignature { name: "background".into(), shape: None, color: [0.45, 0.45, 0.45] };
    }
    let fg = num_classes.saturating_sub(1).max(1);
    let k = class_id - 1;
    let hue = k as f64 / fg as f64 * 360.0;
    let shape = match k % 3 {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Triangle,
    };
    let shape_name = match shape {
        ShapeKind::Circle => "circle",
        ShapeKind::Rectangle => "square",
        ShapeKind::Triangle => "triangle",
    };
    let name = if fg <= HUE_NAMES.len() {
        let idx = ((hue / 30.0).round() as usize) % HUE_NAMES.len();
        format!("{} {}", HUE_NAMES[idx], shape_name)
    } else {
        format!("class {class_id} {shape_name}")
    };
    ClassSignature { name, shape: Some(shape), color: hsv_to_rgb(hue, 0.85, 0.9) }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn shape_contains(kind: ShapeKind, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Rectangle => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        ShapeKind::Triangle => {
            // apex up, base at cy + r
            if dy > r || dy < -r {
                return false;
            }
            let half = (dy + r) / 2.0;
            dx.abs() <= half
        }
    }
}

fn synth_sample(config: &SynthConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<SegmentationSample> {
    let s = config.image_size;
    let min_area = (config.patch_size * config.patch_size).max(6);
    let mut image = vec![0f32; s * s * 3];

    // textured gray background: noise plus a random stripe pattern
    let base: f64 = rng.gen_range(0.35..0.55);
    let tint: [f64; 3] = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let freq: f64 = rng.gen_range(0.3..0.9);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..s {
        for x in 0..s {
            let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq + phase;
            let stripe = 0.05 * t.sin();
            let noise: f64 = rng.gen_range(-0.06..0.06);
            for c in 0..3 {
                image[(y * s + x) * 3 + c] = (base + tint[c] + stripe + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let r_min = s as f64 / 8.0;
    let r_max = s as f64 / 4.0;
    let mut owner: Vec<Option<usize>> = vec![None; s * s];
    let mut classes = Vec::with_capacity(config.shapes_per_image);
    for shape_idx in 0..config.shapes_per_image {
        let class_id = rng.gen_range(1..config.num_classes);
        let sig = class_signature(class_id, config.num_classes);
        let kind = sig.shape.expect("foreground classes have a shape");
        let mut placed = false;
        for _attempt in 0..200 {
            let r: f64 = rng.gen_range(r_min..=r_max);
            let cx: f64 = rng.gen_range(r..=(s as f64 - r));
            let cy: f64 = rng.gen_range(r..=(s as f64 - r));
            let mut trial = owner.clone();
            for y in 0..s {
                for x in 0..s {
                    if shape_contains(kind, cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                        trial[y * s + x] = Some(shape_idx);
                    }
                }
            }
            let ok = (0..=shape_idx).all(|k| trial.iter().filter(|o| **o == Some(k)).count() >= min_area);
            if ok {
                owner = trial;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {} shapes without full occlusion in a {s}x{s} image",
                config.shapes_per_image
            )));
        }
        classes.push(class_id);
    }

    // paint shapes with per-pixel color noise
    for (i, o) in owner.iter().enumerate() {
        if let Some(k) = o {
            let color = class_signature(classes[*k], config.num_classes).color;
            for c in 0..3 {
                let noise: f64 = rng.gen_range(-0.04..0.04);
                image[i * 3 + c] = (color[c] as f64 + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }

    let mut segments = Vec::new();
    let mut next_id = 1u32;
    for comp in connected_components(&owner.iter().map(Option::is_none).collect::<Vec<_>>(), s, s) {
        segments.push(Segment { segment_id: next_id, class_id: BACKGROUND_CLASS, mask: comp });
        next_id += 1;
    }
    for (k, &class_id) in classes.iter().enumerate() {
        let mask = BinaryMask::from_fn(s, s, |y, x| owner[y * s + x] == Some(k));
        segments.push(Segment { segment_id: next_id, class_id, mask });
        next_id += 1;
    }

    Ok(SegmentationSample { sample_id: format!("s{index:04}"), height: s, width: s, image, segments })
}

/// 4-connected components of the set pixels, in row-major discovery order.
pub fn connected_components(bits: &[bool], height: usize, width: usize) -> Vec<BinaryMask> {
    let mut seen = vec![false; bits.len()];
    let mut out = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || seen[start] {
            continue;
        }
        let mut comp = BinaryMask::empty(height, width);
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / width, p % width);
            comp.set(y, x, true);
            let mut push = |q: usize| {
                if bits[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                push(p - width);
            }
            if y + 1 < height {
                push(p + width);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < width {
                push(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prelude::any, prop_assert_eq, proptest};

    #[test]
    fn rle_with_leading_empty_run_is_all_ones() {
        let m = BinaryMask::from_rle(4, 4, &[0, 16]).unwrap();
        assert_eq!(m.area(), 16);
        assert_eq!(m.to_rle(), vec![0, 16]);
    }

    #[test]
    fn rle_sum_mismatch_is_rejected() {
        assert!(matches!(BinaryMask::from_rle(4, 4, &[3, 4]), Err(Error::Format { .. })));
    }

    #[test]
    fn rasterize_examples() {
        let full = BinaryMask::full(4, 4);
        assert_eq!(rasterize_mask_to_patches(&full, 2).unwrap(), vec![true; 4]);
        let empty = BinaryMask::empty(4, 4);
        assert_eq!(rasterize_mask_to_patches(&empty, 2).unwrap(), vec![false; 4]);
        let mut single = BinaryMask::empty(4, 4);
        single.set(0, 3, true);
        assert_eq!(rasterize_mask_to_patches(&single, 2).unwrap(), vec![false, true, false, false]);
        assert!(matches!(rasterize_mask_to_patches(&BinaryMask::empty(5, 4), 2), Err(Error::Shape(_))));
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let r = LabelVocabulary::new(vec!["cat".into(), "cat".into()], vec![true, true]);
        assert!(r.is_err());
        assert_eq!(LabelVocabulary::synthetic(5).class_names()[0], "background");
    }

    #[test]
    fn synthetic_names_are_distinct_for_many_classes() {
        for k in 2..30 {
            assert_eq!(LabelVocabulary::synthetic(k).len(), k);
        }
    }

    #[test]
    fn invalid_synth_configs() {
        let mut c = SynthConfig { image_size: 30, ..Default::default() };
        assert!(c.validate().is_err());
        c.image_size = 32;
        c.num_classes = 0;
        assert!(generate_samples(&c).is_err());
    }

    #[test]
    fn small_sample_has_requested_shapes() {
        let c = SynthConfig { num_samples: 1, image_size: 32, num_classes: 3, shapes_per_image: 2, seed: 7, patch_size: 4 };
        let s = &generate_samples(&c).unwrap()[0];
        s.validate(3).unwrap();
        let fg: Vec<_> = s.segments.iter().filter(|g| g.class_id != BACKGROUND_CLASS).collect();
        assert_eq!(fg.len(), 2);
        assert!(s.segments.iter().all(|g| g.class_id < 3));
        // foreground plus background covers every pixel
        assert!(s.semantic_map().iter().all(Option::is_some));
    }

    proptest! {
        #[test]
        fn rle_roundtrip(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::from_bits(8, 8, bits.clone()).unwrap();
            let back = BinaryMask::from_rle(8, 8, &m.to_rle()).unwrap();
            prop_assert_eq!(back.bits(), &bits[..]);
            prop_assert_eq!(m.to_rle().iter().map(|&r| r as usize).sum::<usize>(), 64);
        }

        #[test]
        fn rasterize_matches_double_loop(h in 1usize..5, w in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (hh, ww) = (h * p, w * p);
            let density: f64 = rng.gen_range(0.0..0.3);
            let mask = BinaryMask::from_fn(hh, ww, |_, _| rng.gen_bool(density));
            let got = rasterize_mask_to_patches(&mask, p).unwrap();
            for py in 0..h {
                for px in 0..w {
                    let mut any = false;
                    for y in py * p..(py + 1) * p {
                        for x in px * p..(px + 1) * p {
                            any |= mask.get(y, x);
                        }
                    }
                    prop_assert_eq!(got[py * w + px], any);
                }
            }
        }
    }
}
