//! Semantic perturbation modules.
//!
//! Text-SPM adds one learnable, reparameterised residual `|sigma| * z + mu`
//! (shared across class rows) to the class embeddings. Image-SPM predicts a
//! per-position `(mu, sigma)` from the visual feature and a pooled text cue
//! and adds `|sigma| * z + mu` to every visual feature. Both are exact
//! identities in [`SpmMode::Eval`].

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::encoders::{TextEmbedding, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::nn::{abs_grad, join, normal_array1, sigmoid, slice1, slice1_mut, Linear, Parameters};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    Laplace,
    Uniform,
    StudentT,
}

impl NoiseFamily {
    pub const ALL: [NoiseFamily; 4] = [
        NoiseFamily::Gaussian,
        NoiseFamily::Laplace,
        NoiseFamily::Uniform,
        NoiseFamily::StudentT,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Laplace => "laplace",
            NoiseFamily::Uniform => "uniform",
            NoiseFamily::StudentT => "student_t",
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "normal" => Ok(NoiseFamily::Gaussian),
            "laplace" => Ok(NoiseFamily::Laplace),
            "uniform" => Ok(NoiseFamily::Uniform),
            "student_t" | "student-t" | "t" => Ok(NoiseFamily::StudentT),
            other => Err(Error::InvalidArgument(format!("unknown noise family {other:?}"))),
        }
    }
}

fn default_true() -> bool {
    true
}

/// Stochastic source for the perturbation modules.
///
/// With `standardized` every family has mean 0 and variance 1. Without it:
/// standard normal, Laplace(0, 1), U(-1, 1), and plain Student-t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    #[serde(default = "default_true")]
    pub standardized: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl NoiseSpec {
    pub fn gaussian() -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            df: None,
            standardized: true,
        }
    }

    pub fn student_t(df: f64, standardized: bool) -> Self {
        Self {
            family: NoiseFamily::StudentT,
            df: Some(df),
            standardized,
        }
    }

    pub fn of(family: NoiseFamily) -> Self {
        match family {
            NoiseFamily::StudentT => Self::student_t(10.0, true),
            f => Self {
                family: f,
                df: None,
                standardized: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.family, self.df) {
            (NoiseFamily::StudentT, None) => Err(Error::InvalidArgument(
                "student_t noise needs a degrees-of-freedom value".into(),
            )),
            (NoiseFamily::StudentT, Some(df)) if !df.is_finite() || df <= 0.0 => {
                Err(Error::InvalidArgument(format!("student_t df must be positive, got {df}")))
            }
            (NoiseFamily::StudentT, Some(df)) if self.standardized && df <= 2.0 => Err(Error::InvalidArgument(
                format!("standardized student_t needs df > 2 for finite variance, got {df}"),
            )),
            _ => Ok(()),
        }
    }

    fn sampler(&self) -> Result<Sampler> {
        self.validate()?;
        Ok(match self.family {
            NoiseFamily::Gaussian => Sampler::Gaussian,
            NoiseFamily::Laplace => Sampler::Laplace {
                scale: if self.standardized { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 },
            },
            NoiseFamily::Uniform => Sampler::Uniform {
                half_width: if self.standardized { 3f64.sqrt() } else { 1.0 },
            },
            NoiseFamily::StudentT => {
                let df = self.df.expect("validated");
                Sampler::StudentT {
                    dist: StudentT::new(df).map_err(|e| Error::InvalidArgument(e.to_string()))?,
                    scale: if self.standardized { ((df - 2.0) / df).sqrt() } else { 1.0 },
                }
            }
        })
    }
}

enum Sampler {
    Gaussian,
    Laplace { scale: f64 },
    Uniform { half_width: f64 },
    StudentT { dist: StudentT<f64>, scale: f64 },
}

impl Sampler {
    fn draw(&self, rng: &mut Rng) -> f64 {
        match self {
            Sampler::Gaussian => StandardNormal.sample(rng),
            Sampler::Laplace { scale } => {
                let a: f64 = Exp1.sample(rng);
                let b: f64 = Exp1.sample(rng);
                scale * (a - b)
            }
            Sampler::Uniform { half_width } => rng.gen_range(-*half_width..*half_width),
            Sampler::StudentT { dist, scale } => scale * dist.sample(rng),
        }
    }
}

/// I.i.d. draws of the given shape.
pub fn sample_noise(spec: &NoiseSpec, shape: &[usize], rng: &mut Rng) -> Result<ArrayD<f64>> {
    if shape.is_empty() {
        return Err(Error::Shape("noise shape must have at least one dimension".into()));
    }
    let sampler = spec.sampler()?;
    Ok(ArrayD::from_shape_simple_fn(IxDyn(shape), || sampler.draw(rng)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpmMode {
    Train,
    Eval,
}

/// Learnable text perturbation `(mu, sigma)`, both of width `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSpmParams {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
    pub init_scale: f64,
}

impl TextSpmParams {
    pub fn embed_dim(&self) -> usize {
        self.mu.len()
    }

    fn check_finite(&self) -> Result<()> {
        if self.mu.iter().chain(self.sigma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text SPM parameters".into()));
        }
        Ok(())
    }
}

impl Parameters for TextSpmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "mu"), self.mu.shape(), slice1(&self.mu));
        f(&join(prefix, "sigma"), self.sigma.shape(), slice1(&self.sigma));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "mu"), slice1_mut(&mut self.mu));
        f(&join(prefix, "sigma"), slice1_mut(&mut self.sigma));
    }
}

/// Text-guided cross-attention predicting the visual perturbation.
///
/// Queries come from each visual feature, key and value from the mean of the
/// perturbed text rows, all projected to `C / r`. With a single key a softmax
/// is identically one, so the query-key score goes through a sigmoid gate and
/// the query is kept as a residual: `h_i = q_i + sigmoid(q_i . k / sqrt(d)) v`.
/// `out` maps `h_i` to `2C` channels split into `(mu, sigma_raw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSpmParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub reduction_ratio: usize,
}

impl ImageSpmParams {
    pub fn embed_dim(&self) -> usize {
        self.q.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.q.output_dim()
    }

    fn check_finite(&self) -> Result<()> {
        let mut bad = false;
        self.visit("", &mut |_, _, d| bad |= d.iter().any(|v| !v.is_finite()));
        if bad {
            return Err(Error::NonFinite("image SPM parameters".into()));
        }
        Ok(())
    }
}

impl Parameters for ImageSpmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// `mu_txt, sigma_txt ~ N(0, sigma_t^2)`; cross-attention weights
/// `N(0, 1/C)`; output projection zero (standard deviation `out_init_std`,
/// normally 0).
pub fn init_spm_params(
    embed_dim: usize,
    sigma_t: f64,
    reduction_ratio: usize,
    out_init_std: f64,
    rng: &mut Rng,
) -> Result<(TextSpmParams, ImageSpmParams)> {
    if embed_dim < 2 {
        return Err(Error::InvalidArgument(format!("embed_dim {embed_dim} < 2")));
    }
    if reduction_ratio == 0 || reduction_ratio > embed_dim {
        return Err(Error::InvalidArgument(format!(
            "reduction ratio {reduction_ratio} must be in 1..={embed_dim}"
        )));
    }
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma_t must be >= 0, got {sigma_t}")));
    }
    let text = TextSpmParams {
        mu: normal_array1(rng, embed_dim, sigma_t),
        sigma: normal_array1(rng, embed_dim, sigma_t),
        init_scale: sigma_t,
    };
    let hidden = embed_dim / reduction_ratio;
    let mut out = Linear::zeros(hidden, 2 * embed_dim);
    if out_init_std > 0.0 {
        out.w = crate::nn::normal_array2(rng, hidden, 2 * embed_dim, out_init_std);
    }
    let image = ImageSpmParams {
        q: Linear::init(rng, embed_dim, hidden, 1.0),
        k: Linear::init(rng, embed_dim, hidden, 1.0),
        v: Linear::init(rng, embed_dim, hidden, 1.0),
        out,
        reduction_ratio,
    };
    Ok((text, image))
}

/// `T + |sigma| * z + mu`, one `z` of width `C` broadcast over all rows.
pub fn text_spm_apply(t: &Array2<f64>, params: &TextSpmParams, z: &Array1<f64>) -> Result<Array2<f64>> {
    let c = t.ncols();
    if params.embed_dim() != c || z.len() != c {
        return Err(Error::Shape(format!(
            "text SPM width {} / noise width {} vs embeddings {c}",
            params.embed_dim(),
            z.len()
        )));
    }
    params.check_finite()?;
    let eps: Array1<f64> = params
        .sigma
        .iter()
        .zip(z)
        .zip(&params.mu)
        .map(|((s, z), m)| s.abs() * z + m)
        .collect();
    Ok(t + &eps)
}

/// Gradients of [`text_spm_apply`] w.r.t. `(mu, sigma)` given `dL/dT_hat`.
pub fn text_spm_backward(params: &TextSpmParams, z: &Array1<f64>, d_out: ArrayView2<f64>, grad: &mut TextSpmParams) {
    let col = d_out.sum_axis(Axis(0));
    grad.mu += &col;
    for ((g, d), (s, zv)) in grad.sigma.iter_mut().zip(&col).zip(params.sigma.iter().zip(z)) {
        *g += d * zv * abs_grad(*s);
    }
}

pub fn text_spm_forward(
    t: &TextEmbedding,
    params: &TextSpmParams,
    spec: &NoiseSpec,
    mode: SpmMode,
    rng: &mut Rng,
) -> Result<TextEmbedding> {
    params.check_finite()?;
    match mode {
        SpmMode::Eval => Ok(t.clone()),
        SpmMode::Train => {
            let z = sample_noise(spec, &[t.embed_dim()], rng)?
                .into_dimensionality()
                .expect("1-d");
            let matrix = text_spm_apply(&t.matrix, params, &z)?;
            TextEmbedding::new(matrix, t.class_names.clone())
        }
    }
}

/// Intermediate values kept for the Image-SPM backward pass.
pub struct ImageSpmCache {
    cue: Array1<f64>,
    q: Array2<f64>,
    k: Array1<f64>,
    v: Array1<f64>,
    gate: Array1<f64>,
    hidden: Array2<f64>,
    sigma_raw: Array2<f64>,
}

/// Column mean with each column summed in sorted order, so any permutation of
/// the rows gives a bit-identical cue.
fn order_free_mean(rows: ArrayView2<f64>) -> Array1<f64> {
    let n = rows.nrows() as f64;
    let mut buf = Vec::with_capacity(rows.nrows());
    rows.columns()
        .into_iter()
        .map(|col| {
            buf.clear();
            buf.extend(col.iter().copied());
            buf.sort_by(f64::total_cmp);
            buf.iter().sum::<f64>() / n
        })
        .collect()
}

/// Perturb `P x C` visual rows given the perturbed text rows and noise `z` (`P x C`).
pub fn image_spm_apply(
    visual: ArrayView2<f64>,
    t_hat: ArrayView2<f64>,
    params: &ImageSpmParams,
    z: ArrayView2<f64>,
) -> Result<(Array2<f64>, ImageSpmCache)> {
    let c = visual.ncols();
    if t_hat.ncols() != c || params.embed_dim() != c || z.dim() != visual.dim() {
        return Err(Error::Shape(format!(
            "image SPM: visual {:?}, text {:?}, params C={}, noise {:?}",
            visual.dim(),
            t_hat.dim(),
            params.embed_dim(),
            z.dim()
        )));
    }
    params.check_finite()?;
    let cue = order_free_mean(t_hat);
    let cue2 = cue.view().insert_axis(Axis(0));
    let q = params.q.forward(visual);
    let k = params.k.forward(cue2).row(0).to_owned();
    let v = params.v.forward(cue2).row(0).to_owned();
    let scale = 1.0 / (k.len() as f64).sqrt();
    let gate: Array1<f64> = q.rows().into_iter().map(|qi| sigmoid(qi.dot(&k) * scale)).collect();
    let mut hidden = q.clone();
    for (mut row, g) in hidden.rows_mut().into_iter().zip(&gate) {
        row.scaled_add(*g, &v);
    }
    let o = params.out.forward(hidden.view());
    let mu = o.slice(s![.., ..c]);
    let sigma_raw = o.slice(s![.., c..]).to_owned();
    let mut out = visual.to_owned();
    ndarray::Zip::from(&mut out)
        .and(&sigma_raw)
        .and(z)
        .and(mu)
        .for_each(|o, s, z, m| *o = *o + s.abs() * z + m);
    Ok((
        out,
        ImageSpmCache {
            cue,
            q,
            k,
            v,
            gate,
            hidden,
            sigma_raw,
        },
    ))
}

/// Backward of [`image_spm_apply`]. Accumulates weight gradients and returns
/// `dL/dT_hat` contributed through the pooled cue. The visual input is frozen.
pub fn image_spm_backward(
    visual: ArrayView2<f64>,
    num_classes: usize,
    params: &ImageSpmParams,
    cache: &ImageSpmCache,
    z: ArrayView2<f64>,
    d_out: ArrayView2<f64>,
    grad: &mut ImageSpmParams,
) -> Array2<f64> {
    let (p, c) = d_out.dim();
    let mut d_o = Array2::zeros((p, 2 * c));
    d_o.slice_mut(s![.., ..c]).assign(&d_out);
    ndarray::Zip::from(d_o.slice_mut(s![.., c..]))
        .and(d_out)
        .and(z)
        .and(&cache.sigma_raw)
        .for_each(|g, d, z, s| *g = d * z * abs_grad(*s));
    let d_hidden = params.out.backward(cache.hidden.view(), d_o.view(), &mut grad.out);

    let h = cache.k.len();
    let scale = 1.0 / (h as f64).sqrt();
    let mut d_q = d_hidden.clone();
    let mut d_k = Array1::<f64>::zeros(h);
    let mut d_v = Array1::<f64>::zeros(h);
    for i in 0..p {
        let dh = d_hidden.row(i);
        let g = cache.gate[i];
        d_v.scaled_add(g, &dh);
        let d_score = dh.dot(&cache.v) * g * (1.0 - g) * scale;
        d_q.row_mut(i).scaled_add(d_score, &cache.k);
        d_k.scaled_add(d_score, &cache.q.row(i));
    }
    params.q.accumulate(visual, d_q.view(), &mut grad.q);
    let cue2 = cache.cue.view().insert_axis(Axis(0));
    let d_cue = params.k.backward(cue2, d_k.view().insert_axis(Axis(0)), &mut grad.k)
        + params.v.backward(cue2, d_v.view().insert_axis(Axis(0)), &mut grad.v);
    let per_row = d_cue.row(0).mapv(|v| v / num_classes as f64);
    let mut d_t = Array2::zeros((num_classes, c));
    for mut row in d_t.rows_mut() {
        row.assign(&per_row);
    }
    d_t
}

pub fn image_spm_forward(
    visual: &VisualFeatureMap,
    t_hat: &TextEmbedding,
    params: &ImageSpmParams,
    spec: &NoiseSpec,
    mode: SpmMode,
    rng: &mut Rng,
) -> Result<VisualFeatureMap> {
    crate::encoders::check_pairing(t_hat, visual)?;
    if params.embed_dim() != visual.embed_dim() {
        return Err(Error::Shape(format!(
            "image SPM width {} vs features {}",
            params.embed_dim(),
            visual.embed_dim()
        )));
    }
    params.check_finite()?;
    match mode {
        SpmMode::Eval => Ok(visual.clone()),
        SpmMode::Train => {
            let (h, w) = visual.grid();
            let c = visual.embed_dim();
            let rows = visual.rows();
            let z: Array2<f64> = sample_noise(spec, &[h * w, c], rng)?
                .into_dimensionality()
                .expect("2-d");
            let (out, _) = image_spm_apply(rows.view(), t_hat.matrix.view(), params, z.view())?;
            let tensor = out.into_shape_with_order((h, w, c)).expect("same size");
            VisualFeatureMap::new(tensor, visual.source_size)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{array, Array3};

    fn moments(x: &ArrayD<f64>) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn gaussian_moments() {
        let mut r = rng::stream(1, &["g".into()]);
        let x = sample_noise(&NoiseSpec::gaussian(), &[1_000_000], &mut r).unwrap();
        let (m, v) = moments(&x);
        assert!(m.abs() <= 0.01, "{m}");
        assert!((v - 1.0).abs() <= 0.02, "{v}");
    }

    #[test]
    fn standardized_uniform_support() {
        let mut r = rng::stream(2, &["u".into()]);
        let x = sample_noise(&NoiseSpec::of(NoiseFamily::Uniform), &[200_000], &mut r).unwrap();
        let bound = 3f64.sqrt();
        assert!(x.iter().all(|v| v.abs() <= bound));
        let (_, v) = moments(&x);
        assert!((v - 1.0).abs() <= 0.02, "{v}");
    }

    #[test]
    fn student_t_validation() {
        let mut r = rng::stream(3, &["t".into()]);
        assert!(sample_noise(&NoiseSpec::student_t(2.0, true), &[4], &mut r).is_err());
        assert!(sample_noise(&NoiseSpec::student_t(2.0, false), &[4], &mut r).is_ok());
        let no_df = NoiseSpec {
            family: NoiseFamily::StudentT,
            df: None,
            standardized: true,
        };
        assert!(no_df.validate().is_err());
        assert!(sample_noise(&NoiseSpec::gaussian(), &[], &mut r).is_err());
    }

    #[test]
    fn noise_spec_serde() {
        let spec = NoiseSpec::student_t(10.0, false);
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(s, r#"{"family":"student_t","df":10.0,"standardized":false}"#);
        let back: NoiseSpec = serde_json::from_str(r#"{"family":"laplace"}"#).unwrap();
        assert_eq!(back, NoiseSpec::of(NoiseFamily::Laplace));
        assert_eq!("student-t".parse::<NoiseFamily>().unwrap(), NoiseFamily::StudentT);
    }

    #[test]
    fn init_shapes_and_zero_scale() {
        let mut r = rng::stream(0, &["init".into()]);
        let (t, i) = init_spm_params(512, 0.0, 2, 0.0, &mut r).unwrap();
        assert!(t.mu.iter().all(|v| *v == 0.0) && t.sigma.iter().all(|v| *v == 0.0));
        assert_eq!(i.hidden_dim(), 256);
        assert!(i.out.w.iter().all(|v| *v == 0.0) && i.out.b.iter().all(|v| *v == 0.0));
        assert!(init_spm_params(8, 0.02, 9, 0.0, &mut r).is_err());
        assert!(init_spm_params(8, 0.02, 0, 0.0, &mut r).is_err());
        assert!(init_spm_params(8, -1.0, 2, 0.0, &mut r).is_err());
    }

    #[test]
    fn init_scale_statistics() {
        let mut entries = Vec::new();
        for seed in 0..20u64 {
            let mut r = rng::stream(seed, &["init".into()]);
            let (t, _) = init_spm_params(512, 0.02, 2, 0.0, &mut r).unwrap();
            entries.extend(t.mu.iter().chain(t.sigma.iter()).copied());
        }
        let n = entries.len() as f64;
        let mean = entries.iter().sum::<f64>() / n;
        let std = (entries.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.02).abs() <= 0.15 * 0.02, "{std}");
    }

    #[test]
    fn text_spm_hand_example() {
        let t = array![[1.0, 0.0]];
        let params = TextSpmParams {
            mu: array![0.1, -0.1],
            sigma: array![0.5, 0.5],
            init_scale: 0.0,
        };
        let out = text_spm_apply(&t, &params, &array![1.0, 1.0]).unwrap();
        assert!((out[[0, 0]] - 1.6).abs() < 1e-12);
        assert!((out[[0, 1]] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn text_spm_modes() {
        let mut r = rng::stream(5, &["t".into()]);
        let (p, _) = init_spm_params(4, 0.3, 2, 0.0, &mut r).unwrap();
        let t = TextEmbedding::new(array![[1.0, 2.0, 3.0, 4.0], [0.0, 1.0, 0.0, 1.0]], vec!["a".into(), "b".into()])
            .unwrap();
        let out = text_spm_forward(&t, &p, &NoiseSpec::gaussian(), SpmMode::Eval, &mut r).unwrap();
        assert_eq!(out, t);
        // the same draw is added to every row
        let out = text_spm_forward(&t, &p, &NoiseSpec::gaussian(), SpmMode::Train, &mut r).unwrap();
        let d0 = &out.matrix.row(0) - &t.matrix.row(0);
        let d1 = &out.matrix.row(1) - &t.matrix.row(1);
        for (a, b) in d0.iter().zip(&d1) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = TextSpmParams {
            mu: Array1::zeros(4),
            sigma: Array1::zeros(4),
            init_scale: 0.0,
        };
        let out = text_spm_forward(&t, &zero, &NoiseSpec::gaussian(), SpmMode::Train, &mut r).unwrap();
        assert_eq!(out, t);
        let mut bad = p.clone();
        bad.mu[0] = f64::NAN;
        assert!(matches!(
            text_spm_forward(&t, &bad, &NoiseSpec::gaussian(), SpmMode::Eval, &mut r),
            Err(Error::NonFinite(_))
        ));
    }

    fn toy_inputs(seed: u64) -> (VisualFeatureMap, TextEmbedding, ImageSpmParams) {
        let mut r = rng::stream(seed, &["toy".into()]);
        let v = Array3::from_shape_simple_fn((3, 3, 8), || r.gen_range(-1.0..1.0));
        let t = Array2::from_shape_simple_fn((4, 8), || r.gen_range(-1.0..1.0));
        let (_, mut i) = init_spm_params(8, 0.02, 2, 0.0, &mut r).unwrap();
        i.out.w = crate::nn::normal_array2(&mut r, 4, 16, 0.5);
        i.out.b = normal_array1(&mut r, 16, 0.5);
        (
            VisualFeatureMap::new(v, (6, 6)).unwrap(),
            TextEmbedding::new(t, (0..4).map(|i| format!("c{i}")).collect()).unwrap(),
            i,
        )
    }

    #[test]
    fn image_spm_eval_identity_and_zero_init() {
        let (v, t, p) = toy_inputs(1);
        let mut r = rng::stream(1, &["n".into()]);
        let out = image_spm_forward(&v, &t, &p, &NoiseSpec::gaussian(), SpmMode::Eval, &mut r).unwrap();
        assert_eq!(out, v);
        let mut r = rng::stream(2, &["init".into()]);
        let (_, fresh) = init_spm_params(8, 0.02, 2, 0.0, &mut r).unwrap();
        let out = image_spm_forward(&v, &t, &fresh, &NoiseSpec::gaussian(), SpmMode::Train, &mut r).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn image_spm_cue_is_order_free() {
        let (v, t, p) = toy_inputs(2);
        let spec = NoiseSpec::of(NoiseFamily::Laplace);
        let mut r1 = rng::stream(9, &["n".into()]);
        let mut r2 = rng::stream(9, &["n".into()]);
        let a = image_spm_forward(&v, &t, &p, &spec, SpmMode::Train, &mut r1).unwrap();
        let permuted = t.permuted(&[2, 0, 3, 1]);
        let b = image_spm_forward(&v, &permuted, &p, &spec, SpmMode::Train, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, v);
    }

    #[test]
    fn image_spm_dimension_mismatch() {
        let (v, _, p) = toy_inputs(3);
        let t = TextEmbedding::new(Array2::ones((2, 6)), vec!["a".into(), "b".into()]).unwrap();
        let mut r = rng::stream(0, &[]);
        assert!(matches!(
            image_spm_forward(&v, &t, &p, &NoiseSpec::gaussian(), SpmMode::Eval, &mut r),
            Err(Error::Shape(_))
        ));
    }
}
