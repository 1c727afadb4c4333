//! Pixel-text cost volume, cost aggregation and decoding.
//!
//! Token layout used throughout: a volume over an `h x w` grid and `n` class
//! slots is stored as a `(h * w * n) x d` matrix with row `(y * w + x) * n + c`.
//! Every learnable map here is shared across class slots, so permuting the
//! class axis of the input permutes the output the same way.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::encoders::{check_pairing, TextEmbedding, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_grad, join, resize_bilinear, resize_bilinear_backward, slice1, slice1_mut, Attention, AttentionCache,
    Linear, matmul, Neighborhood, Parameters,
};
use crate::rng::Rng;

pub const COST_EPS: f64 = 1e-8;
pub const IGNORE_INDEX: u8 = 255;

/// Raw cosine costs, `H' x W' x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub tensor: Array3<f64>,
}

impl CostVolume {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.tensor.dim()
    }

    /// Costs as a `(H'*W') x N` matrix.
    pub fn rows(&self) -> ArrayView2<'_, f64> {
        let (h, w, n) = self.tensor.dim();
        self.tensor
            .view()
            .into_shape_with_order((h * w, n))
            .expect("standard layout")
    }
}

/// Norms kept for the cost backward pass.
pub struct CostCache {
    v_unit: Array2<f64>,
    t_unit: Array2<f64>,
    v_norm: Array1<f64>,
    t_norm: Array1<f64>,
}

fn unit_rows(x: ArrayView2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let mut unit = x.to_owned();
    let mut norms = Array1::zeros(x.nrows());
    for (mut row, n) in unit.rows_mut().into_iter().zip(norms.iter_mut()) {
        let norm = row.dot(&row).sqrt();
        *n = norm;
        let denom = norm.max(eps);
        row.mapv_inplace(|v| v / denom);
    }
    (unit, norms)
}

/// `C[i, j] = v_i . t_j / (max(|v_i|, eps) max(|t_j|, eps))` on row matrices.
pub fn cost_forward(v: ArrayView2<f64>, t: ArrayView2<f64>, eps: f64) -> (Array2<f64>, CostCache) {
    let (v_unit, v_norm) = unit_rows(v, eps);
    let (t_unit, t_norm) = unit_rows(t, eps);
    let cost = matmul(v_unit.view(), t_unit.t());
    (
        cost,
        CostCache {
            v_unit,
            t_unit,
            v_norm,
            t_norm,
        },
    )
}

fn unit_backward(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: Array2<f64>, eps: f64) -> Array2<f64> {
    let mut dx = d_unit;
    for ((mut d, u), &n) in dx.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        if n > eps {
            let proj = d.dot(&u);
            d.scaled_add(-proj, &u);
            d.mapv_inplace(|v| v / n);
        } else {
            d.mapv_inplace(|v| v / eps);
        }
    }
    dx
}

/// Returns `(dL/dv, dL/dt)`.
pub fn cost_backward(cache: &CostCache, d_cost: ArrayView2<f64>, eps: f64) -> (Array2<f64>, Array2<f64>) {
    let d_vu = matmul(d_cost.view(), cache.t_unit.view());
    let d_tu = matmul(d_cost.t(), cache.v_unit.view());
    (
        unit_backward(&cache.v_unit, &cache.v_norm, d_vu, eps),
        unit_backward(&cache.t_unit, &cache.t_norm, d_tu, eps),
    )
}

pub fn build_cost_volume(v_hat: &VisualFeatureMap, t_hat: &TextEmbedding, eps: f64) -> Result<CostVolume> {
    check_pairing(t_hat, v_hat)?;
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("cost eps must be positive, got {eps}")));
    }
    let (h, w) = v_hat.grid();
    let rows = v_hat.rows();
    let (cost, _) = cost_forward(rows.view(), t_hat.matrix.view(), eps);
    let n = t_hat.num_classes();
    Ok(CostVolume {
        tensor: cost.into_shape_with_order((h, w, n)).expect("same size"),
    })
}

/// Embedded cost volume, `(h*w*n) x d` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CostFeatureVolume {
    pub data: Array2<f64>,
    pub h: usize,
    pub w: usize,
    pub n: usize,
}

impl CostFeatureVolume {
    pub fn feature_dim(&self) -> usize {
        self.data.ncols()
    }

    /// Permute class slots: slot `i` of the result is slot `perm[i]` of `self`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        let mut data = Array2::zeros(self.data.dim());
        for p in 0..self.h * self.w {
            for (i, &src) in perm.iter().enumerate() {
                data.row_mut(p * self.n + i).assign(&self.data.row(p * self.n + src));
            }
        }
        Self { data, ..*self }
    }

    fn as_grid(&self) -> ArrayView3<'_, f64> {
        self.data
            .view()
            .into_shape_with_order((self.h, self.w, self.n * self.feature_dim()))
            .expect("standard layout")
    }
}

/// Affine lift of each scalar cost to `d` channels, shared over all entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEmbedding {
    pub w: Array1<f64>,
    pub b: Array1<f64>,
}

impl CostEmbedding {
    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Array1::zeros(dim),
            b: Array1::zeros(dim),
        }
    }

    pub fn init(rng: &mut Rng, dim: usize) -> Self {
        Self {
            w: crate::nn::normal_array1(rng, dim, 1.0),
            b: crate::nn::normal_array1(rng, dim, 0.1),
        }
    }

    /// `cost` is `(h*w) x n`.
    pub fn forward(&self, cost: ArrayView2<f64>, h: usize, w: usize) -> CostFeatureVolume {
        let n = cost.ncols();
        let d = self.w.len();
        let mut data = Array2::zeros((cost.len(), d));
        for (mut row, &c) in data.rows_mut().into_iter().zip(cost.iter()) {
            row.assign(&self.b);
            row.scaled_add(c, &self.w);
        }
        CostFeatureVolume { data, h, w, n }
    }

    /// Returns `dL/dcost` as `(h*w) x n`.
    pub fn backward(&self, cost: ArrayView2<f64>, d_feat: ArrayView2<f64>, grad: &mut CostEmbedding) -> Array2<f64> {
        let mut d_cost = Array2::zeros(cost.dim());
        for ((d_row, &c), dc) in d_feat.rows().into_iter().zip(cost.iter()).zip(d_cost.iter_mut()) {
            grad.w.scaled_add(c, &d_row);
            grad.b += &d_row;
            *dc = d_row.dot(&self.w);
        }
        d_cost
    }
}

impl Parameters for CostEmbedding {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), self.w.shape(), slice1(&self.w));
        f(&join(prefix, "b"), self.b.shape(), slice1(&self.b));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice1_mut(&mut self.w));
        f(&join(prefix, "b"), slice1_mut(&mut self.b));
    }
}

pub fn embed_cost(cost: &CostVolume, embedding: &CostEmbedding) -> Result<CostFeatureVolume> {
    if embedding.w.len() != embedding.b.len() || embedding.w.is_empty() {
        return Err(Error::Shape("cost embedding weight and bias widths differ".into()));
    }
    if cost.tensor.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost volume".into()));
    }
    let (h, w, _) = cost.dim();
    Ok(embedding.forward(cost.rows(), h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    pub num_blocks: usize,
    pub feature_dim: usize,
    /// Odd side length of the spatial attention window.
    pub window: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            feature_dim: 64,
            window: 5,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("window must be odd, got {}", self.window)));
        }
        Ok(())
    }
}

/// One residual spatial mixer followed by one residual class mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationBlock {
    pub spatial: Attention,
    pub class: Attention,
}

impl AggregationBlock {
    pub fn zeros(dim: usize) -> Self {
        Self {
            spatial: Attention::zeros(dim),
            class: Attention::zeros(dim),
        }
    }

    pub fn init(rng: &mut Rng, dim: usize) -> Self {
        Self {
            spatial: Attention::init(rng, dim, 0.5),
            class: Attention::init(rng, dim, 0.5),
        }
    }
}

impl Parameters for AggregationBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.class.visit(&join(prefix, "class"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.class.visit_mut(&join(prefix, "class"), f);
    }
}

struct SubStep {
    input: Array2<f64>,
    cache: AttentionCache,
}

pub struct AggregateCache {
    spatial_nb: Neighborhood,
    class_nb: Neighborhood,
    steps: Vec<(SubStep, SubStep)>,
}

fn check_window(h: usize, w: usize, window: usize) -> Result<()> {
    if window > h || window > w {
        return Err(Error::InvalidArgument(format!(
            "aggregation window {window} exceeds the {h}x{w} cost grid"
        )));
    }
    Ok(())
}

pub fn aggregate_forward(
    input: &CostFeatureVolume,
    blocks: &[AggregationBlock],
    window: usize,
) -> Result<(CostFeatureVolume, AggregateCache)> {
    let (h, w, n) = (input.h, input.w, input.n);
    if !blocks.is_empty() {
        check_window(h, w, window)?;
    }
    let spatial_nb = Neighborhood::spatial(h, w, n, window);
    let class_nb = Neighborhood::classwise(h * w, n);
    let mut x = input.data.clone();
    let mut steps = Vec::with_capacity(blocks.len());
    for block in blocks {
        let (out, cache) = block.spatial.forward(x.view(), &spatial_nb);
        let s = SubStep { input: x, cache };
        x = &s.input + &out;
        let (out, cache) = block.class.forward(x.view(), &class_nb);
        let c = SubStep { input: x, cache };
        x = &c.input + &out;
        steps.push((s, c));
    }
    Ok((
        CostFeatureVolume { data: x, h, w, n },
        AggregateCache {
            spatial_nb,
            class_nb,
            steps,
        },
    ))
}

pub fn aggregate_backward(
    blocks: &[AggregationBlock],
    cache: &AggregateCache,
    d_out: Array2<f64>,
    grads: &mut [AggregationBlock],
) -> Array2<f64> {
    let mut d = d_out;
    for ((block, grad), (s, c)) in blocks.iter().zip(grads.iter_mut()).zip(&cache.steps).rev() {
        let dx = block.class.backward(c.input.view(), &cache.class_nb, &c.cache, d.view(), &mut grad.class);
        d += &dx;
        let dx = block
            .spatial
            .backward(s.input.view(), &cache.spatial_nb, &s.cache, d.view(), &mut grad.spatial);
        d += &dx;
    }
    d
}

pub fn aggregate(
    input: &CostFeatureVolume,
    config: &AggregatorConfig,
    blocks: &[AggregationBlock],
) -> Result<CostFeatureVolume> {
    config.validate()?;
    if blocks.len() != config.num_blocks {
        return Err(Error::Shape(format!(
            "{} aggregation blocks for num_blocks = {}",
            blocks.len(),
            config.num_blocks
        )));
    }
    if input.feature_dim() != config.feature_dim {
        return Err(Error::Shape(format!(
            "feature volume width {} vs config {}",
            input.feature_dim(),
            config.feature_dim
        )));
    }
    Ok(aggregate_forward(input, blocks, config.window)?.0)
}

/// Per-class logits at image resolution, `H x W x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub tensor: Array3<f64>,
    pub class_names: Vec<String>,
}

/// Upsampling decoder: each stage is a pointwise linear map, a 2x bilinear
/// upsample and GELU, applied per class slot with shared weights. A linear
/// head produces one logit per class slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub stages: Vec<Linear>,
    pub head: Linear,
}

impl Decoder {
    pub fn zeros(dim: usize, stages: usize) -> Self {
        Self {
            stages: (0..stages).map(|_| Linear::zeros(dim, dim)).collect(),
            head: Linear::zeros(dim, 1),
        }
    }

    pub fn init(rng: &mut Rng, dim: usize, stages: usize) -> Self {
        Self {
            stages: (0..stages).map(|_| Linear::init(rng, dim, dim, 1.0)).collect(),
            head: Linear::init(rng, dim, 1, 1.0),
        }
    }

    /// Number of stages run for a grid/target pair: double while the result
    /// still fits inside the target and the target is more than 2x away.
    pub fn stages_for(&self, grid: (usize, usize), target: (usize, usize)) -> usize {
        let (mut h, mut w) = grid;
        let mut count = 0;
        while count < self.stages.len()
            && (target.0 > 2 * h || target.1 > 2 * w)
            && 2 * h <= target.0
            && 2 * w <= target.1
        {
            h *= 2;
            w *= 2;
            count += 1;
        }
        count
    }
}

impl Parameters for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

struct StageCache {
    input: Array2<f64>,
    grid: (usize, usize),
    pre_act: Array2<f64>,
}

pub struct DecodeCache {
    stages: Vec<StageCache>,
    head_input: Array2<f64>,
    head_grid: (usize, usize),
    n: usize,
}

fn grid_view(x: &Array2<f64>, h: usize, w: usize) -> ArrayView3<'_, f64> {
    let k = x.len() / (h * w);
    x.view().into_shape_with_order((h, w, k)).expect("standard layout")
}

fn tokens(x: Array3<f64>, d: usize) -> Array2<f64> {
    let len = x.len();
    x.into_shape_with_order((len / d, d)).expect("standard layout")
}

pub fn decode_forward(
    input: &CostFeatureVolume,
    decoder: &Decoder,
    target: (usize, usize),
) -> Result<(Array3<f64>, DecodeCache)> {
    let (h0, w0, n) = (input.h, input.w, input.n);
    if target.0 < h0 || target.1 < w0 {
        return Err(Error::InvalidArgument(format!(
            "decode target {}x{} is smaller than the {h0}x{w0} grid",
            target.0, target.1
        )));
    }
    let d = input.feature_dim();
    let count = decoder.stages_for((h0, w0), target);
    let mut x = input.data.clone();
    let (mut h, mut w) = (h0, w0);
    let mut stages = Vec::with_capacity(count);
    for stage in &decoder.stages[..count] {
        // pointwise map before the (linear) upsample: same result, 4x fewer rows
        let y = stage.forward(x.view());
        let up = tokens(resize_bilinear(grid_view(&y, h, w), 2 * h, 2 * w), d);
        let next = up.mapv(gelu);
        stages.push(StageCache {
            input: x,
            grid: (h, w),
            pre_act: up,
        });
        x = next;
        h *= 2;
        w *= 2;
    }
    // the head is affine, so applying it before the final bilinear resize is
    // the same as resizing the features first
    let small = decoder.head.forward(x.view());
    let small = small.into_shape_with_order((h, w, n)).expect("standard layout");
    let logits = resize_bilinear(small.view(), target.0, target.1);
    Ok((
        logits,
        DecodeCache {
            stages,
            head_input: x,
            head_grid: (h, w),
            n,
        },
    ))
}

/// Returns `dL/d(input tokens)`.
pub fn decode_backward(decoder: &Decoder, cache: &DecodeCache, d_logits: ArrayView3<f64>, grad: &mut Decoder) -> Array2<f64> {
    let (h, w) = cache.head_grid;
    let d_small = resize_bilinear_backward(d_logits, h, w);
    let d_small = d_small
        .into_shape_with_order((h * w * cache.n, 1))
        .expect("standard layout");
    let mut d = decoder.head.backward(cache.head_input.view(), d_small.view(), &mut grad.head);
    for (i, sc) in cache.stages.iter().enumerate().rev() {
        let dim = d.ncols();
        let mut d_up = d;
        ndarray::Zip::from(&mut d_up).and(&sc.pre_act).for_each(|g, &u| *g *= gelu_grad(u));
        let (sh, sw) = sc.grid;
        let d_y = tokens(resize_bilinear_backward(grid_view(&d_up, 2 * sh, 2 * sw), sh, sw), dim);
        d = decoder.stages[i].backward(sc.input.view(), d_y.view(), &mut grad.stages[i]);
    }
    d
}

pub fn decode(input: &CostFeatureVolume, target: (usize, usize), decoder: &Decoder, class_names: &[String]) -> Result<Logits> {
    if class_names.len() != input.n {
        return Err(Error::Shape(format!(
            "{} class names for {} class slots",
            class_names.len(),
            input.n
        )));
    }
    let (tensor, _) = decode_forward(input, decoder, target)?;
    Ok(Logits {
        tensor,
        class_names: class_names.to_vec(),
    })
}

/// Per-pixel class indices; 255 marks ignore in ground-truth maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap(pub Array2<u8>);

impl SegmentationMap {
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Argmax over classes; ties go to the lowest index.
pub fn predict(logits: &Logits) -> Result<SegmentationMap> {
    let (h, w, n) = logits.tensor.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot predict with zero classes".into()));
    }
    if n > IGNORE_INDEX as usize {
        return Err(Error::InvalidArgument(format!("{n} classes do not fit an 8-bit map")));
    }
    let mut out = Array2::zeros((h, w));
    for ((y, x), slot) in out.indexed_iter_mut() {
        let mut best = 0usize;
        let mut best_v = logits.tensor[[y, x, 0]];
        for c in 1..n {
            let v = logits.tensor[[y, x, c]];
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        *slot = best as u8;
    }
    Ok(SegmentationMap(out))
}

/// Convenience: cost grid volume as the `h x w x n` array of a feature volume's slot `channel`.
pub fn feature_channel(volume: &CostFeatureVolume, channel: usize) -> Array3<f64> {
    let col = volume.data.column(channel).to_owned();
    col.into_shape_with_order((volume.h, volume.w, volume.n)).expect("standard layout")
}

/// View of the embedded volume as `h x w x (n*d)`.
pub fn feature_grid(volume: &CostFeatureVolume) -> ArrayView3<'_, f64> {
    volume.as_grid()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{array, Array3};
    use rand::Rng as _;

    fn vfm(rows: Array2<f64>, h: usize, w: usize) -> VisualFeatureMap {
        let c = rows.ncols();
        VisualFeatureMap::new(rows.into_shape_with_order((h, w, c)).unwrap(), (h, w)).unwrap()
    }

    fn text(rows: Array2<f64>) -> TextEmbedding {
        let n = rows.nrows();
        TextEmbedding::new(rows, (0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn cosine_hand_cases() {
        let v = vfm(array![[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]], 1, 3);
        let t = text(array![[1.0, 1.0], [3.0, 4.0], [0.0, 2.0]]);
        let c = build_cost_volume(&v, &t, COST_EPS).unwrap();
        assert!((c.tensor[[0, 0, 0]] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!((c.tensor[[0, 2, 1]] - 1.0).abs() < 1e-6);
        assert!(c.tensor[[0, 0, 2]].abs() < 1e-6);
    }

    #[test]
    fn zero_vectors_do_not_produce_nan() {
        let v = vfm(array![[0.0, 0.0], [1.0, 0.0]], 1, 2);
        let t = text(array![[0.0, 0.0]]);
        let c = build_cost_volume(&v, &t, COST_EPS).unwrap();
        assert!(c.tensor.iter().all(|v| *v == 0.0));
        let bad = text(array![[1.0, 0.0, 0.0]]);
        assert!(matches!(build_cost_volume(&v, &bad, COST_EPS), Err(Error::Shape(_))));
    }

    #[test]
    fn embed_affine() {
        let emb = CostEmbedding {
            w: array![1.0, -2.0, 0.5, 4.0],
            b: array![0.1, 0.2, 0.3, 0.4],
        };
        let cost = CostVolume {
            tensor: Array3::from_elem((1, 2, 1), 0.5),
        };
        let f = embed_cost(&cost, &emb).unwrap();
        let expected = [0.6, -0.8, 0.55, 2.4];
        for r in 0..2 {
            for (a, b) in f.data.row(r).iter().zip(expected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let zero = embed_cost(&cost, &CostEmbedding::zeros(4)).unwrap();
        assert!(zero.data.iter().all(|v| *v == 0.0));
    }

    fn random_volume(seed: u64, h: usize, w: usize, n: usize, d: usize) -> CostFeatureVolume {
        let mut r = rng::stream(seed, &["vol".into()]);
        CostFeatureVolume {
            data: Array2::from_shape_simple_fn((h * w * n, d), || r.gen_range(-1.0..1.0)),
            h,
            w,
            n,
        }
    }

    #[test]
    fn empty_and_zero_aggregators_are_identity() {
        let vol = random_volume(1, 4, 4, 3, 8);
        let cfg = AggregatorConfig {
            num_blocks: 0,
            feature_dim: 8,
            window: 3,
        };
        assert_eq!(aggregate(&vol, &cfg, &[]).unwrap(), vol);
        let cfg = AggregatorConfig { num_blocks: 2, ..cfg };
        let blocks = vec![AggregationBlock::zeros(8), AggregationBlock::zeros(8)];
        assert_eq!(aggregate(&vol, &cfg, &blocks).unwrap(), vol);
    }

    #[test]
    fn aggregator_class_equivariance() {
        let vol = random_volume(2, 5, 5, 4, 8);
        let mut r = rng::stream(2, &["blocks".into()]);
        let blocks: Vec<_> = (0..2).map(|_| AggregationBlock::init(&mut r, 8)).collect();
        let cfg = AggregatorConfig {
            num_blocks: 2,
            feature_dim: 8,
            window: 3,
        };
        let perm = [3usize, 1, 0, 2];
        let a = aggregate(&vol, &cfg, &blocks).unwrap().permute_classes(&perm);
        let b = aggregate(&vol.permute_classes(&perm), &cfg, &blocks).unwrap();
        let diff = (&a.data - &b.data).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn window_larger_than_grid_rejected() {
        let vol = random_volume(3, 4, 4, 2, 8);
        let mut r = rng::stream(3, &["blocks".into()]);
        let cfg = AggregatorConfig {
            num_blocks: 1,
            feature_dim: 8,
            window: 5,
        };
        let blocks = vec![AggregationBlock::init(&mut r, 8)];
        assert!(matches!(aggregate(&vol, &cfg, &blocks), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn decoder_shapes_and_stage_rule() {
        let mut r = rng::stream(4, &["dec".into()]);
        let dec = Decoder::init(&mut r, 8, 2);
        assert_eq!(dec.stages_for((8, 8), (64, 64)), 2);
        assert_eq!(dec.stages_for((8, 8), (16, 16)), 0);
        assert_eq!(dec.stages_for((8, 8), (17, 17)), 1);
        assert_eq!(dec.stages_for((4, 4), (4, 4)), 0);
        let vol = random_volume(4, 3, 5, 2, 8);
        let names = vec!["a".to_string(), "b".to_string()];
        let l = decode(&vol, (13, 21), &dec, &names).unwrap();
        assert_eq!(l.tensor.dim(), (13, 21, 2));
        assert!(decode(&vol, (2, 21), &dec, &names).is_err());
    }

    #[test]
    fn decoder_constant_input_constant_output() {
        let mut r = rng::stream(5, &["dec".into()]);
        let dec = Decoder::init(&mut r, 8, 2);
        let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let mut data = Array2::zeros((4 * 4 * 2, 8));
        for mut r in data.rows_mut() {
            r.assign(&ndarray::ArrayView1::from(&row));
        }
        let vol = CostFeatureVolume { data, h: 4, w: 4, n: 2 };
        let l = decode(&vol, (16, 16), &dec, &["a".into(), "b".into()]).unwrap();
        let first = l.tensor[[0, 0, 0]];
        assert!(l.tensor.slice(ndarray::s![.., .., 0]).iter().all(|v| (v - first).abs() < 1e-5));
    }

    #[test]
    fn decoder_class_equivariance() {
        let mut r = rng::stream(6, &["dec".into()]);
        let dec = Decoder::init(&mut r, 8, 1);
        let vol = random_volume(6, 4, 4, 3, 8);
        let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let perm = [2usize, 0, 1];
        let a = decode(&vol, (8, 8), &dec, &names).unwrap();
        let b = decode(&vol.permute_classes(&perm), (8, 8), &dec, &names).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            let diff = (&a.tensor.slice(ndarray::s![.., .., src]) - &b.tensor.slice(ndarray::s![.., .., i]))
                .mapv(f64::abs)
                .fold(0.0f64, |m, v| m.max(*v));
            assert!(diff < 1e-5);
        }
    }

    #[test]
    fn predict_rules() {
        let names = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        let one = Logits {
            tensor: Array3::from_shape_fn((2, 3, 1), |(y, x, _)| (y * 3 + x) as f64),
            class_names: names(1),
        };
        assert!(predict(&one).unwrap().0.iter().all(|v| *v == 0));
        let mut t = Array3::zeros((1, 1, 4));
        t[[0, 0, 1]] = 2.0;
        t[[0, 0, 3]] = 2.0;
        let tied = Logits {
            tensor: t,
            class_names: names(4),
        };
        assert_eq!(predict(&tied).unwrap().0[[0, 0]], 1);
    }

    #[test]
    fn predict_matches_exhaustive_scan() {
        let mut r = rng::stream(7, &["pred".into()]);
        let tensor = Array3::from_shape_simple_fn((6, 5, 4), || r.gen_range(-3.0..3.0));
        let logits = Logits {
            tensor: tensor.clone(),
            class_names: (0..4).map(|i| i.to_string()).collect(),
        };
        let map = predict(&logits).unwrap();
        for y in 0..6 {
            for x in 0..5 {
                let mut best = 0;
                for c in 0..4 {
                    if tensor[[y, x, c]] > tensor[[y, x, best]] {
                        best = c;
                    }
                }
                assert_eq!(map.0[[y, x]] as usize, best);
            }
        }
    }
}
