//! Text and image embedding sources.
//!
//! Real vision-language backbones plug in through [`VisionLanguageEncoder`].
//! The synthetic encoders here are deterministic test doubles: text rows are
//! drawn from a stream keyed by the prompt string, image features from a
//! stream keyed by the mean colour of each patch.

use ndarray::{Array2, Array3, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const CLASS_PLACEHOLDER: &str = "{class}";
pub const DEFAULT_TEMPLATE: &str = "a photo of {class}";

/// Class names rendered through a prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub class_names: Vec<String>,
    pub template: String,
    pub prompts: Vec<String>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// `N x C` class-prompt embeddings, rows aligned with `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub matrix: Array2<f64>,
    pub class_names: Vec<String>,
}

impl TextEmbedding {
    pub fn new(matrix: Array2<f64>, class_names: Vec<String>) -> Result<Self> {
        if matrix.nrows() != class_names.len() {
            return Err(Error::Shape(format!(
                "{} embedding rows for {} class names",
                matrix.nrows(),
                class_names.len()
            )));
        }
        if matrix.nrows() == 0 {
            return Err(Error::InvalidArgument("text embedding needs at least one class".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(Self { matrix, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Reorder rows so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let matrix = self.matrix.select(Axis(0), perm);
        let class_names = perm.iter().map(|&i| self.class_names[i].clone()).collect();
        Self { matrix, class_names }
    }
}

/// Dense `H' x W' x C` visual features.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureMap {
    pub tensor: Array3<f64>,
    /// Original image size as `(height, width)`.
    pub source_size: (usize, usize),
}

impl VisualFeatureMap {
    pub fn new(tensor: Array3<f64>, source_size: (usize, usize)) -> Result<Self> {
        let (h, w, c) = tensor.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("empty feature map {h}x{w}x{c}")));
        }
        if tensor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("visual feature map".into()));
        }
        Ok(Self { tensor, source_size })
    }

    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.tensor.dim();
        (h, w)
    }

    pub fn embed_dim(&self) -> usize {
        self.tensor.dim().2
    }

    /// Features flattened to `(H'*W') x C`, row-major over the grid.
    pub fn rows(&self) -> Array2<f64> {
        let (h, w, c) = self.tensor.dim();
        self.tensor
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .expect("standard layout")
    }
}

/// Reject a text/image pair whose embedding widths differ.
pub fn check_pairing(text: &TextEmbedding, visual: &VisualFeatureMap) -> Result<()> {
    if text.embed_dim() != visual.embed_dim() {
        return Err(Error::Shape(format!(
            "text embed_dim {} != visual embed_dim {}",
            text.embed_dim(),
            visual.embed_dim()
        )));
    }
    Ok(())
}

pub fn apply_prompt_template(class_names: &[String], template: &str) -> Result<PromptSet> {
    let found = template.matches(CLASS_PLACEHOLDER).count();
    if found != 1 {
        return Err(Error::Template {
            template: template.to_string(),
            found,
        });
    }
    if let Some(pos) = class_names.iter().position(|c| c.is_empty()) {
        return Err(Error::InvalidArgument(format!("class name #{pos} is empty")));
    }
    let prompts = class_names
        .iter()
        .map(|c| template.replace(CLASS_PLACEHOLDER, c))
        .collect();
    Ok(PromptSet {
        class_names: class_names.to_vec(),
        template: template.to_string(),
        prompts,
    })
}

fn unit_gaussian(rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

pub fn encode_text_synthetic(
    prompts: &PromptSet,
    embed_dim: usize,
    seed_namespace: &str,
) -> Result<TextEmbedding> {
    if embed_dim < 2 {
        return Err(Error::InvalidArgument(format!("embed_dim {embed_dim} < 2")));
    }
    let n = prompts.len();
    let mut matrix = Array2::zeros((n, embed_dim));
    for (i, prompt) in prompts.prompts.iter().enumerate() {
        let mut rng = rng::stream_from_bytes(seed_namespace, prompt.as_bytes());
        let row = unit_gaussian(&mut rng, embed_dim);
        matrix.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    TextEmbedding::new(matrix, prompts.class_names.clone())
}

/// Quantised patch colour; flat patches of equal colour map to equal keys.
fn patch_key(image: &Array3<f64>, y0: usize, x0: usize, k: usize) -> [i64; 3] {
    let mut sum = [0.0f64; 3];
    for y in y0..y0 + k {
        for x in x0..x0 + k {
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += image[[y, x, ch]];
            }
        }
    }
    let count = (k * k) as f64;
    sum.map(|s| (s / count * 1e6).round() as i64)
}

pub fn encode_image_synthetic(
    image: &Array3<f64>,
    embed_dim: usize,
    downsample: usize,
    seed_namespace: &str,
) -> Result<VisualFeatureMap> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::Shape(format!("expected 3 colour channels, got {ch}")));
    }
    if embed_dim < 2 {
        return Err(Error::InvalidArgument(format!("embed_dim {embed_dim} < 2")));
    }
    if downsample == 0 || h % downsample != 0 || w % downsample != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by patch stride {downsample}"
        )));
    }
    let (gh, gw) = (h / downsample, w / downsample);
    let mut tensor = Array3::zeros((gh, gw, embed_dim));
    let mut cache: std::collections::HashMap<[i64; 3], Vec<f64>> = Default::default();
    for gy in 0..gh {
        for gx in 0..gw {
            let key = patch_key(image, gy * downsample, gx * downsample, downsample);
            let feature = cache.entry(key).or_insert_with(|| {
                let mut bytes = Vec::with_capacity(24);
                for v in key {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                let mut rng = rng::stream_from_bytes(seed_namespace, &bytes);
                unit_gaussian(&mut rng, embed_dim)
            });
            for (c, v) in feature.iter().enumerate() {
                tensor[[gy, gx, c]] = *v;
            }
        }
    }
    VisualFeatureMap::new(tensor, (h, w))
}

/// Adapter slot for a real vision-language model.
///
/// `encode_image` must return a grid of `H / patch_stride() x W / patch_stride()`
/// features with the same width as the text rows. Features need not be
/// normalised; the cost volume normalises them.
pub trait VisionLanguageEncoder: Send + Sync {
    fn encode_text(&self, prompts: &PromptSet) -> Result<TextEmbedding>;
    fn encode_image(&self, image: &Array3<f64>) -> Result<VisualFeatureMap>;
    fn patch_stride(&self) -> usize;
    fn embed_dim(&self) -> usize;
}

/// The deterministic hashed encoder pair.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    pub embed_dim: usize,
    pub patch_stride: usize,
    pub seed_namespace: String,
}

impl VisionLanguageEncoder for SyntheticEncoder {
    fn encode_text(&self, prompts: &PromptSet) -> Result<TextEmbedding> {
        encode_text_synthetic(prompts, self.embed_dim, &self.seed_namespace)
    }

    fn encode_image(&self, image: &Array3<f64>) -> Result<VisualFeatureMap> {
        encode_image_synthetic(image, self.embed_dim, self.patch_stride, &self.seed_namespace)
    }

    fn patch_stride(&self) -> usize {
        self.patch_stride
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn template_renders_default_prompt() {
        let p = apply_prompt_template(&names(&["road"]), DEFAULT_TEMPLATE).unwrap();
        assert_eq!(p.prompts, vec!["a photo of road"]);
    }

    #[test]
    fn template_empty_and_identity() {
        let p = apply_prompt_template(&[], DEFAULT_TEMPLATE).unwrap();
        assert!(p.is_empty());
        let p = apply_prompt_template(&names(&["building", "car"]), "{class}").unwrap();
        assert_eq!(p.prompts, names(&["building", "car"]));
    }

    #[test]
    fn template_rejects_bad_placeholder_counts() {
        assert!(matches!(
            apply_prompt_template(&names(&["a"]), "a photo"),
            Err(Error::Template { found: 0, .. })
        ));
        assert!(matches!(
            apply_prompt_template(&names(&["a"]), "{class} and {class}"),
            Err(Error::Template { found: 2, .. })
        ));
        assert!(apply_prompt_template(&names(&[""]), "{class}").is_err());
    }

    #[test]
    fn text_rows_are_deterministic_unit_vectors() {
        let p = apply_prompt_template(&names(&["road", "tree", "road"]), DEFAULT_TEMPLATE).unwrap();
        let a = encode_text_synthetic(&p, 32, "ns").unwrap();
        let b = encode_text_synthetic(&p, 32, "ns").unwrap();
        assert_eq!(a, b);
        for row in a.matrix.rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(a.matrix.row(0), a.matrix.row(2));
        assert_ne!(a.matrix.row(0), a.matrix.row(1));
        let other = encode_text_synthetic(&p, 32, "other").unwrap();
        assert_ne!(a.matrix.row(0), other.matrix.row(0));
        assert!(encode_text_synthetic(&p, 1, "ns").is_err());
    }

    #[test]
    fn permuting_classes_permutes_rows() {
        let classes = names(&["a", "b", "c", "d"]);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<String> = perm.iter().map(|&i| classes[i].clone()).collect();
        let e = encode_text_synthetic(&apply_prompt_template(&classes, "{class}").unwrap(), 16, "ns").unwrap();
        let ep = encode_text_synthetic(&apply_prompt_template(&permuted, "{class}").unwrap(), 16, "ns").unwrap();
        assert_eq!(ep, e.permuted(&perm));
    }

    #[test]
    fn uniform_image_gives_constant_features() {
        let mut img = Array3::zeros((8, 12, 3));
        img.slice_mut(ndarray::s![.., .., 0]).fill(0.25);
        let f = encode_image_synthetic(&img, 16, 4, "ns").unwrap();
        assert_eq!(f.grid(), (2, 3));
        let first = f.tensor.slice(ndarray::s![0, 0, ..]).to_owned();
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(f.tensor.slice(ndarray::s![y, x, ..]), first);
            }
        }
        assert_eq!(f, encode_image_synthetic(&img, 16, 4, "ns").unwrap());
    }

    #[test]
    fn two_colour_image_enumeration() {
        // left half red, right half blue -> 2x2 grid with two distinct rows
        let mut img = Array3::zeros((8, 8, 3));
        for y in 0..8 {
            for x in 0..8 {
                if x < 4 {
                    img[[y, x, 0]] = 1.0;
                } else {
                    img[[y, x, 2]] = 1.0;
                }
            }
        }
        let f = encode_image_synthetic(&img, 8, 4, "ns").unwrap();
        let mut distinct = HashSet::new();
        for y in 0..2 {
            for x in 0..2 {
                let bits: Vec<u64> = f.tensor.slice(ndarray::s![y, x, ..]).iter().map(|v| v.to_bits()).collect();
                distinct.insert(bits);
            }
        }
        assert_eq!(distinct.len(), 2);
        assert_eq!(f.tensor.slice(ndarray::s![0, 0, ..]), f.tensor.slice(ndarray::s![1, 0, ..]));
        assert_eq!(f.tensor.slice(ndarray::s![0, 1, ..]), f.tensor.slice(ndarray::s![1, 1, ..]));
    }

    #[test]
    fn rejects_indivisible_image() {
        let img = Array3::zeros((10, 8, 3));
        assert!(matches!(encode_image_synthetic(&img, 8, 4, "ns"), Err(Error::Shape(_))));
    }
}
