//! Dataset manifests, mask I/O, taxonomy mapping, vocabulary overlap and the
//! procedural synthetic dataset.
//!
//! A manifest is one JSON document:
//!
//! ```json
//! {
//!   "id": "uavid",
//!   "root": ".",
//!   "pairs": [{"image": "images/0000.png", "mask": "masks/0000.png"}],
//!   "categories": ["background", "building"],
//!   "native_resolution": [3934.81, 2160.0],
//!   "split": {"seen": ["building"], "unseen": []},
//!   "ignore_index": 255,
//!   "taxonomy_mapped": false
//! }
//! ```
//!
//! `root` is resolved against the manifest's directory and pair paths against
//! `root`; absolute paths are used as is. Masks are single-channel 8-bit PNGs
//! whose values are category indices or `ignore_index`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::costvol::{SegmentationMap, IGNORE_INDEX};
use crate::encoders::{apply_prompt_template, VisionLanguageEncoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::train::{Sample, TrainingSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

fn default_ignore() -> u8 {
    IGNORE_INDEX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub id: String,
    pub root: PathBuf,
    pub pairs: Vec<ImagePair>,
    pub categories: Vec<String>,
    /// `[width, height]`; may be fractional when it is an average over images.
    pub native_resolution: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u8,
    #[serde(default)]
    pub taxonomy_mapped: bool,
    /// Directory the manifest was loaded from.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScan {
    /// Read every mask while loading.
    Eager,
    /// Check masks when they are read.
    Lazy,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn root_dir(&self) -> PathBuf {
        self.base_dir.join(&self.root)
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root_dir().join(&self.pairs[i].image)
    }

    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.root_dir().join(&self.pairs[i].mask)
    }

    /// Pretty JSON with a trailing newline; field order is fixed.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_canonical_json())?;
        Ok(())
    }

    /// Structural checks that need no file access.
    pub fn check_structure(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.pairs.is_empty() {
            issues.push("no image/mask pairs".to_string());
        }
        if self.categories.is_empty() {
            issues.push("no categories".to_string());
        }
        if self.categories.len() > self.ignore_index as usize {
            issues.push(format!(
                "{} categories do not fit below ignore index {}",
                self.categories.len(),
                self.ignore_index
            ));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.is_empty() {
                issues.push("empty category name".to_string());
            }
            if !seen.insert(c) {
                issues.push(format!("duplicate category {c:?}"));
            }
        }
        let [w, h] = self.native_resolution;
        if !(w > 0.0 && h > 0.0) {
            issues.push(format!("native resolution {w}x{h} must be positive"));
        }
        if let Some(split) = &self.split {
            for name in split.seen.iter().chain(&split.unseen) {
                if !self.categories.contains(name) {
                    issues.push(format!("split class {name:?} is not a category"));
                }
            }
            if let Some(c) = split.seen.iter().find(|c| split.unseen.contains(c)) {
                issues.push(format!("class {c:?} is both seen and unseen"));
            }
        }
        issues
    }

    pub fn read_mask(&self, i: usize) -> Result<SegmentationMap> {
        read_mask(&self.mask_path(i), self.num_classes(), self.ignore_index)
    }

    pub fn read_image(&self, i: usize) -> Result<Array3<f64>> {
        read_image(&self.image_path(i))
    }
}

pub fn load_manifest(path: &Path, scan: MaskScan) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(issue) = m.check_structure().into_iter().next() {
        return Err(Error::data(path, issue));
    }
    for i in 0..m.pairs.len() {
        for p in [m.image_path(i), m.mask_path(i)] {
            if !p.is_file() {
                return Err(Error::data(&p, "missing file"));
            }
        }
        if scan == MaskScan::Eager {
            m.read_mask(i)?;
        }
    }
    Ok(m)
}

/// RGB image scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?.into_rgb8();
    let (w, h) = img.dimensions();
    let raw: Vec<f64> = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Array3::from_shape_vec((h as usize, w as usize, 3), raw).expect("rgb layout"))
}

pub fn write_image(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let raw: Vec<u8> = pixels.iter().copied().collect();
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("rgb layout")
        .save(path)?;
    Ok(())
}

/// Single-channel mask whose values must be `< num_classes` or `ignore_index`.
pub fn read_mask(path: &Path, num_classes: usize, ignore_index: u8) -> Result<SegmentationMap> {
    let img = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::data(path, format!("mask must be 8-bit single channel, found {:?}", img.color())));
    }
    let img = img.into_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    if let Some(pos) = raw
        .iter()
        .position(|&v| v != ignore_index && v as usize >= num_classes)
    {
        return Err(Error::data(
            path,
            format!(
                "value {} at ({}, {}) but only {num_classes} categories",
                raw[pos],
                pos / w as usize,
                pos % w as usize
            ),
        ));
    }
    Ok(SegmentationMap(
        Array2::from_shape_vec((h as usize, w as usize), raw).expect("mask layout"),
    ))
}

pub fn write_mask(path: &Path, mask: &SegmentationMap) -> Result<()> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.0.iter().copied().collect();
    image::GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("mask layout")
        .save(path)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub manifest: PathBuf,
    pub id: Option<String>,
    pub pairs: usize,
    pub categories: usize,
    /// Pixel count per category, in category order.
    pub class_pixels: Vec<(String, u64)>,
    pub ignored_pixels: u64,
    pub issues: Vec<String>,
}

impl ConformanceReport {
    pub fn ok(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Check everything and collect every problem instead of stopping at the first.
pub fn conformance_report(path: &Path) -> ConformanceReport {
    let mut report = ConformanceReport {
        manifest: path.to_path_buf(),
        id: None,
        pairs: 0,
        categories: 0,
        class_pixels: Vec::new(),
        ignored_pixels: 0,
        issues: Vec::new(),
    };
    let m: DatasetManifest = match fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(m) => m,
        Err(e) => {
            report.issues.push(format!("{}: {e}", path.display()));
            return report;
        }
    };
    let m = DatasetManifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ..m
    };
    report.id = Some(m.id.clone());
    report.pairs = m.pairs.len();
    report.categories = m.num_classes();
    report.issues.extend(m.check_structure());
    let mut counts = vec![0u64; m.num_classes()];
    for i in 0..m.pairs.len() {
        let img = m.image_path(i);
        let size = match image::image_dimensions(&img) {
            Ok(s) => Some(s),
            Err(e) => {
                report.issues.push(format!("{}: {e}", img.display()));
                None
            }
        };
        match m.read_mask(i) {
            Ok(mask) => {
                let (h, w) = mask.dim();
                if let Some((iw, ih)) = size {
                    if (iw as usize, ih as usize) != (w, h) {
                        report
                            .issues
                            .push(format!("{}: mask {w}x{h} vs image {iw}x{ih}", m.mask_path(i).display()));
                    }
                }
                for &v in mask.0.iter() {
                    if v == m.ignore_index {
                        report.ignored_pixels += 1;
                    } else {
                        counts[v as usize] += 1;
                    }
                }
            }
            Err(e) => report.issues.push(e.to_string()),
        }
    }
    report.class_pixels = m.categories.iter().cloned().zip(counts).collect();
    report
}

/// Read and encode every pair of a manifest.
pub fn encode_dataset(
    manifest: &DatasetManifest,
    encoder: &dyn VisionLanguageEncoder,
    template: &str,
) -> Result<TrainingSet> {
    let prompts = apply_prompt_template(&manifest.categories, template)?;
    let text = encoder.encode_text(&prompts)?;
    let samples = (0..manifest.pairs.len())
        .map(|i| {
            let image = manifest.read_image(i)?;
            let mask = manifest.read_mask(i)?;
            if mask.dim() != (image.dim().0, image.dim().1) {
                return Err(Error::data(manifest.mask_path(i), "mask and image sizes differ"));
            }
            let features = encoder
                .encode_image(&image)
                .map_err(|e| Error::data(manifest.image_path(i), e.to_string()))?;
            Ok(Sample { features, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSet { text, samples })
}

// ---------------------------------------------------------------- taxonomy

/// Marks a raw category whose pixels become ignore.
pub const DROP: &str = "<DROP>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Unified(String),
    Drop,
}

/// Raw category name to unified name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaxonomyMapping {
    pub entries: BTreeMap<String, Target>,
}

/// Tab-separated `raw<TAB>unified` lines; `<DROP>` as the unified name drops
/// the category; blank lines and lines starting with `#` are skipped.
pub fn parse_taxonomy(text: &str) -> Result<TaxonomyMapping> {
    let mut entries = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (raw, unified) = line
            .split_once('\t')
            .ok_or_else(|| Error::InvalidArgument(format!("taxonomy line {}: expected raw<TAB>unified", i + 1)))?;
        let (raw, unified) = (raw.trim(), unified.trim());
        if raw.is_empty() || unified.is_empty() {
            return Err(Error::InvalidArgument(format!("taxonomy line {}: empty name", i + 1)));
        }
        let target = if unified == DROP {
            Target::Drop
        } else {
            Target::Unified(unified.to_string())
        };
        if entries.insert(raw.to_string(), target).is_some() {
            return Err(Error::InvalidArgument(format!("taxonomy line {}: {raw:?} mapped twice", i + 1)));
        }
    }
    Ok(TaxonomyMapping { entries })
}

/// One name per line; blank lines and `#` comments are skipped.
pub fn parse_vocab(text: &str) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if out.iter().any(|v| v == line) {
            return Err(Error::InvalidArgument(format!("vocabulary lists {line:?} twice")));
        }
        out.push(line.to_string());
    }
    Ok(out)
}

/// Lookup table raw id -> unified id (or ignore), and the unified category list:
/// the targeted vocabulary names, in vocabulary order.
pub fn taxonomy_table(categories: &[String], mapping: &TaxonomyMapping, vocab: &[String]) -> Result<(Vec<u8>, Vec<String>)> {
    let unmapped: Vec<String> = categories
        .iter()
        .filter(|c| !mapping.entries.contains_key(*c))
        .cloned()
        .collect();
    if !unmapped.is_empty() {
        return Err(Error::UnmappedCategories(unmapped));
    }
    let targeted: BTreeSet<&str> = categories
        .iter()
        .filter_map(|c| match &mapping.entries[c] {
            Target::Unified(u) => Some(u.as_str()),
            Target::Drop => None,
        })
        .collect();
    if let Some(t) = targeted.iter().find(|t| !vocab.iter().any(|v| v == *t)) {
        return Err(Error::InvalidArgument(format!("unified name {t:?} is not in the vocabulary")));
    }
    let unified: Vec<String> = vocab.iter().filter(|v| targeted.contains(v.as_str())).cloned().collect();
    let lut = categories
        .iter()
        .map(|c| match &mapping.entries[c] {
            Target::Unified(u) => unified.iter().position(|v| v == u).expect("targeted") as u8,
            Target::Drop => IGNORE_INDEX,
        })
        .collect();
    Ok((lut, unified))
}

pub fn remap_mask(mask: &SegmentationMap, lut: &[u8], ignore_index: u8) -> SegmentationMap {
    SegmentationMap(mask.0.mapv(|v| if v == ignore_index { IGNORE_INDEX } else { lut[v as usize] }))
}

/// Rewrite every mask through the mapping into `out_dir/masks/` and write
/// `out_dir/manifest.json`. Images are referenced in place by absolute path.
pub fn map_taxonomy(
    manifest: &DatasetManifest,
    mapping: &TaxonomyMapping,
    vocab: &[String],
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let (lut, unified) = taxonomy_table(&manifest.categories, mapping, vocab)?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let out_dir_abs = out_dir.canonicalize()?;
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for i in 0..manifest.pairs.len() {
        let mask = remap_mask(&manifest.read_mask(i)?, &lut, manifest.ignore_index);
        let rel = PathBuf::from("masks").join(format!("{i:05}.png"));
        write_mask(&out_dir_abs.join(&rel), &mask)?;
        let image = manifest.image_path(i);
        let image = image.canonicalize().map_err(|e| Error::data(&image, e.to_string()))?;
        pairs.push(ImagePair { image, mask: rel });
    }
    let map_names = |names: &[String]| -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for n in names {
            if let Some(Target::Unified(u)) = mapping.entries.get(n) {
                if !out.contains(u) {
                    out.push(u.clone());
                }
            }
        }
        out
    };
    let split = manifest.split.as_ref().map(|s| Split {
        seen: map_names(&s.seen),
        unseen: map_names(&s.unseen),
    });
    let mapped = DatasetManifest {
        id: manifest.id.clone(),
        root: PathBuf::from("."),
        pairs,
        categories: unified,
        native_resolution: manifest.native_resolution,
        split,
        ignore_index: IGNORE_INDEX,
        taxonomy_mapped: true,
        base_dir: out_dir_abs.clone(),
    };
    mapped.write(&out_dir_abs.join("manifest.json"))?;
    Ok(mapped)
}

// ----------------------------------------------------------------- overlap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapEntry {
    pub dataset: String,
    pub raw_unique: usize,
    pub covered: usize,
    pub test_only: usize,
    pub coverage_ratio: f64,
}

pub fn overlap_counts(dataset: &str, train_vocab: &[String], test_categories: &[String]) -> OverlapEntry {
    let train: BTreeSet<&str> = train_vocab.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = test_categories.iter().map(String::as_str).collect();
    let covered = test.intersection(&train).count();
    let raw_unique = test.len();
    OverlapEntry {
        dataset: dataset.to_string(),
        raw_unique,
        covered,
        test_only: raw_unique - covered,
        coverage_ratio: if raw_unique == 0 {
            0.0
        } else {
            covered as f64 / raw_unique as f64
        },
    }
}

pub fn overlap_report(train_vocab: &[String], manifests: &[DatasetManifest]) -> Result<Vec<OverlapEntry>> {
    manifests
        .iter()
        .map(|m| {
            if !m.taxonomy_mapped {
                return Err(Error::InvalidArgument(format!(
                    "dataset {:?} has not been taxonomy-mapped",
                    m.id
                )));
            }
            Ok(overlap_counts(&m.id, train_vocab, &m.categories))
        })
        .collect()
}

// --------------------------------------------------------------- synthetic

/// Background first, then the foreground classes.
pub const PALETTE: [(&str, [u8; 3]); 16] = [
    ("background", [128, 128, 128]),
    ("red", [230, 25, 75]),
    ("green", [60, 180, 75]),
    ("blue", [0, 130, 200]),
    ("yellow", [255, 225, 25]),
    ("orange", [245, 130, 48]),
    ("purple", [145, 30, 180]),
    ("cyan", [70, 240, 240]),
    ("magenta", [240, 50, 230]),
    ("lime", [210, 245, 60]),
    ("pink", [250, 190, 212]),
    ("teal", [0, 128, 128]),
    ("brown", [170, 110, 40]),
    ("navy", [0, 0, 128]),
    ("maroon", [128, 0, 0]),
    ("olive", [128, 128, 0]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_images: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Including the background class.
    pub num_classes: usize,
    pub shapes_per_image: usize,
    /// The highest-indexed classes, kept out of the training images.
    pub holdout_classes: usize,
    /// Images of the test split (0 = no test split).
    pub test_images: usize,
    /// Shapes snap to this grid; use the encoder's patch stride.
    pub cell: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 32,
            size: 64,
            num_classes: 4,
            shapes_per_image: 3,
            holdout_classes: 0,
            test_images: 0,
            cell: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// Pixel bounding box `[y0, y0 + height) x [x0, x0 + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub class: u8,
    pub kind: ShapeKind,
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    /// Whether the pixel belongs to the shape. Ellipses are decided per grid
    /// cell by the cell centre, so every cell is a single colour.
    pub fn covers(&self, y: usize, x: usize, cell: usize) -> bool {
        if y < self.y0 || y >= self.y0 + self.height || x < self.x0 || x >= self.x0 + self.width {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let cy = (y / cell * cell) as f64 + cell as f64 / 2.0;
                let cx = (x / cell * cell) as f64 + cell as f64 / 2.0;
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let dy = (cy - self.y0 as f64 - ry) / ry;
                let dx = (cx - self.x0 as f64 - rx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: DatasetManifest,
    pub test: Option<DatasetManifest>,
    /// Shapes per train image, in drawing order (later shapes paint over earlier ones).
    pub train_shapes: Vec<Vec<Shape>>,
    pub test_shapes: Vec<Vec<Shape>>,
}

pub fn rasterize(size: usize, cell: usize, shapes: &[Shape]) -> SegmentationMap {
    let mut mask = Array2::zeros((size, size));
    for s in shapes {
        for y in s.y0..s.y0 + s.height {
            for x in s.x0..s.x0 + s.width {
                if s.covers(y, x, cell) {
                    mask[[y, x]] = s.class;
                }
            }
        }
    }
    SegmentationMap(mask)
}

fn random_shapes(rng: &mut rng::Rng, spec: &SyntheticSpec, classes: &[u8], forced: &[u8]) -> Vec<Shape> {
    let grid = spec.size / spec.cell;
    let min_side = (grid / 4).max(1);
    let max_side = (grid / 2).max(min_side);
    (0..spec.shapes_per_image)
        .map(|k| {
            let class = forced.get(k).copied().unwrap_or_else(|| classes[rng.gen_range(0..classes.len())]);
            let h = rng.gen_range(min_side..=max_side);
            let w = rng.gen_range(min_side..=max_side);
            let y = rng.gen_range(0..=grid - h);
            let x = rng.gen_range(0..=grid - w);
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            };
            Shape {
                class,
                kind,
                y0: y * spec.cell,
                x0: x * spec.cell,
                height: h * spec.cell,
                width: w * spec.cell,
            }
        })
        .collect()
}

fn paint(mask: &SegmentationMap) -> Array3<u8> {
    let (h, w) = mask.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| PALETTE[mask.0[[y, x]] as usize].1[c])
}

fn write_split(
    spec: &SyntheticSpec,
    dir: &Path,
    id: &str,
    count: usize,
    categories: Vec<String>,
    split: Option<Split>,
    shapes_for: &mut dyn FnMut(usize) -> Vec<Shape>,
) -> Result<(DatasetManifest, Vec<Vec<Shape>>)> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut pairs = Vec::with_capacity(count);
    let mut all = Vec::with_capacity(count);
    for i in 0..count {
        let shapes = shapes_for(i);
        let mask = rasterize(spec.size, spec.cell, &shapes);
        let pair = ImagePair {
            image: PathBuf::from("images").join(format!("{i:04}.png")),
            mask: PathBuf::from("masks").join(format!("{i:04}.png")),
        };
        write_image(&dir.join(&pair.image), &paint(&mask))?;
        write_mask(&dir.join(&pair.mask), &mask)?;
        pairs.push(pair);
        all.push(shapes);
    }
    let manifest = DatasetManifest {
        id: id.to_string(),
        root: PathBuf::from("."),
        pairs,
        categories,
        native_resolution: [spec.size as f64, spec.size as f64],
        split,
        ignore_index: IGNORE_INDEX,
        taxonomy_mapped: true,
        base_dir: dir.to_path_buf(),
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok((manifest, all))
}

/// Write the training split to `out_dir` and, when `test_images > 0`, a test
/// split to `out_dir/test`. Training images use only the non-holdout classes
/// and list only those as categories; each test image contains the holdout
/// classes first, so every holdout class appears in the test split.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticDataset> {
    if spec.num_images == 0 {
        return Err(Error::InvalidArgument("num_images must be >= 1".into()));
    }
    if spec.num_classes < 2 || spec.num_classes > PALETTE.len() {
        return Err(Error::InvalidArgument(format!(
            "num_classes must be in 2..={} (distinguishable colours), got {}",
            PALETTE.len(),
            spec.num_classes
        )));
    }
    if spec.holdout_classes + 2 > spec.num_classes {
        return Err(Error::InvalidArgument(
            "holdout leaves no foreground class for training".into(),
        ));
    }
    if spec.holdout_classes > 0 && spec.test_images == 0 {
        return Err(Error::InvalidArgument("holdout classes need test_images > 0".into()));
    }
    if spec.cell == 0 || spec.size == 0 || !spec.size.is_multiple_of(spec.cell) {
        return Err(Error::InvalidArgument(format!(
            "size {} is not divisible by cell {}",
            spec.size, spec.cell
        )));
    }
    let names: Vec<String> = PALETTE[..spec.num_classes].iter().map(|p| p.0.to_string()).collect();
    let seen_count = spec.num_classes - spec.holdout_classes;
    let seen_fg: Vec<u8> = (1..seen_count as u8).collect();
    let all_fg: Vec<u8> = (1..spec.num_classes as u8).collect();
    let holdout: Vec<u8> = (seen_count as u8..spec.num_classes as u8).collect();

    let (train, train_shapes) = write_split(
        spec,
        out_dir,
        "synthetic",
        spec.num_images,
        names[..seen_count].to_vec(),
        None,
        &mut |i| {
            let mut r = rng::stream(spec.seed, &["synth".into(), "train".into(), i.into()]);
            random_shapes(&mut r, spec, &seen_fg, &[])
        },
    )?;
    let (test, test_shapes) = if spec.test_images > 0 {
        let split = Split {
            seen: names[..seen_count].to_vec(),
            unseen: names[seen_count..].to_vec(),
        };
        let (m, s) = write_split(
            spec,
            &out_dir.join("test"),
            "synthetic-test",
            spec.test_images,
            names.clone(),
            Some(split),
            &mut |i| {
                let mut r = rng::stream(spec.seed, &["synth".into(), "test".into(), i.into()]);
                random_shapes(&mut r, spec, &all_fg, &holdout)
            },
        )?;
        (Some(m), s)
    } else {
        (None, Vec::new())
    };
    Ok(SyntheticDataset {
        train,
        test,
        train_shapes,
        test_shapes,
    })
}
