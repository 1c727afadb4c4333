//! Minimal layer primitives with hand-written backward passes.
//!
//! Everything runs in `f64`. Token matrices are `T x D` with one row per
//! token; neighbourhoods for attention are given explicitly as CSR lists so
//! the same kernel serves both spatial-window and class-wise mixing.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::Rng;

/// Visit every learnable tensor in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    /// All parameters concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _, _| out.push(name.to_string()));
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, d| d.iter_mut().for_each(|v| *v = value));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

pub(crate) fn normal_array2(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    if std == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub(crate) fn normal_array1(rng: &mut Rng, len: usize, std: f64) -> Array1<f64> {
    if std == 0.0 {
        return Array1::zeros(len);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Array1::from_shape_simple_fn(len, || dist.sample(rng))
}

/// `a . b` into a fresh row-major array, whatever the input layouts.
pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    c
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    /// Weights `N(0, gain / sqrt(in))`, zero bias.
    pub fn init(rng: &mut Rng, input: usize, output: usize, gain: f64) -> Self {
        Self {
            w: normal_array2(rng, input, output, gain / (input as f64).sqrt()),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = matmul(x, self.w.view());
        y += &self.b;
        y
    }

    /// Accumulate parameter gradients into `grad` and return `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        self.accumulate(x, dy, grad);
        matmul(dy, self.w.t())
    }

    /// Parameter gradients only (for layers whose input is frozen).
    pub fn accumulate(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w"), self.w.shape(), slice2(&self.w));
        f(&join(prefix, "b"), self.b.shape(), slice1(&self.b));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "w"), slice2_mut(&mut self.w));
        f(&join(prefix, "b"), slice1_mut(&mut self.b));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of `|x|`, with 0 at the kink.
pub fn abs_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-token neighbour lists in CSR form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhood {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl Neighborhood {
    pub fn num_tokens(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, t: usize) -> &[u32] {
        &self.indices[self.offsets[t]..self.offsets[t + 1]]
    }

    fn range(&self, t: usize) -> std::ops::Range<usize> {
        self.offsets[t]..self.offsets[t + 1]
    }

    /// Tokens laid out as `(y * w + x) * n + class`; each token sees the same
    /// class inside a `window x window` box clipped at the grid border.
    pub fn spatial(h: usize, w: usize, n: usize, window: usize) -> Self {
        let r = (window / 2) as isize;
        let mut offsets = Vec::with_capacity(h * w * n + 1);
        let mut indices = Vec::with_capacity(h * w * n * window * window);
        offsets.push(0);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for c in 0..n {
                    for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                        for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                            indices.push(((yy as usize * w + xx as usize) * n + c) as u32);
                        }
                    }
                    offsets.push(indices.len());
                }
            }
        }
        Self { offsets, indices }
    }

    /// Each token sees every class slot at its own position.
    pub fn classwise(positions: usize, n: usize) -> Self {
        let mut offsets = Vec::with_capacity(positions * n + 1);
        let mut indices = Vec::with_capacity(positions * n * n);
        offsets.push(0);
        for p in 0..positions {
            for _ in 0..n {
                indices.extend((0..n).map(|c| (p * n + c) as u32));
                offsets.push(indices.len());
            }
        }
        Self { offsets, indices }
    }
}

/// Single-head dot-product attention restricted to a neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<f64>,
    ctx: Array2<f64>,
}

impl Attention {
    pub fn zeros(dim: usize) -> Self {
        Self {
            q: Linear::zeros(dim, dim),
            k: Linear::zeros(dim, dim),
            v: Linear::zeros(dim, dim),
            o: Linear::zeros(dim, dim),
        }
    }

    pub fn init(rng: &mut Rng, dim: usize, out_gain: f64) -> Self {
        Self {
            q: Linear::init(rng, dim, dim, 1.0),
            k: Linear::init(rng, dim, dim, 1.0),
            v: Linear::init(rng, dim, dim, 1.0),
            o: Linear::init(rng, dim, dim, out_gain),
        }
    }

    /// Returns the attention branch output (the caller adds the residual).
    pub fn forward(&self, x: ArrayView2<f64>, nb: &Neighborhood) -> (Array2<f64>, AttentionCache) {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let d = q.ncols();
        let scale = 1.0 / (d as f64).sqrt();
        let tokens = x.nrows();
        let mut weights = vec![0.0; nb.indices.len()];
        let mut ctx = Array2::zeros((tokens, d));
        for t in 0..tokens {
            let range = nb.range(t);
            let qt = q.row(t);
            let w = &mut weights[range.clone()];
            let mut max = f64::NEG_INFINITY;
            for (slot, &j) in w.iter_mut().zip(&nb.indices[range.clone()]) {
                *slot = qt.dot(&k.row(j as usize)) * scale;
                max = max.max(*slot);
            }
            let mut sum = 0.0;
            for slot in w.iter_mut() {
                *slot = (*slot - max).exp();
                sum += *slot;
            }
            let mut ct = ctx.row_mut(t);
            for (slot, &j) in w.iter_mut().zip(&nb.indices[range]) {
                *slot /= sum;
                ct.scaled_add(*slot, &v.row(j as usize));
            }
        }
        let out = self.o.forward(ctx.view());
        (out, AttentionCache { q, k, v, weights, ctx })
    }

    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        nb: &Neighborhood,
        cache: &AttentionCache,
        dout: ArrayView2<f64>,
        grad: &mut Attention,
    ) -> Array2<f64> {
        let dctx = self.o.backward(cache.ctx.view(), dout, &mut grad.o);
        let (tokens, d) = cache.q.dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut dq = Array2::zeros((tokens, d));
        let mut dk = Array2::zeros((tokens, d));
        let mut dv = Array2::zeros((tokens, d));
        let mut da = Vec::new();
        for t in 0..tokens {
            let range = nb.range(t);
            let idx = &nb.indices[range.clone()];
            let w = &cache.weights[range];
            let dct = dctx.row(t);
            da.clear();
            let mut dot = 0.0;
            for (&a, &j) in w.iter().zip(idx) {
                let g = dct.dot(&cache.v.row(j as usize));
                dot += a * g;
                da.push(g);
                dv.row_mut(j as usize).scaled_add(a, &dct);
            }
            let qt = cache.q.row(t);
            let mut dqt = dq.row_mut(t);
            for ((&a, &j), &g) in w.iter().zip(idx).zip(&da) {
                let ds = a * (g - dot) * scale;
                dqt.scaled_add(ds, &cache.k.row(j as usize));
                dk.row_mut(j as usize).scaled_add(ds, &qt);
            }
        }
        let mut dx = self.q.backward(x, dq.view(), &mut grad.q);
        dx += &self.k.backward(x, dk.view(), &mut grad.k);
        dx += &self.v.backward(x, dv.view(), &mut grad.v);
        dx
    }
}

impl Parameters for Attention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}

/// Half-pixel bilinear sampling taps for one axis: `(lo, hi, frac)`.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of `h x w x k` to `oh x ow x k` (half-pixel centres, edge clamp).
pub fn resize_bilinear(x: ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, k) = x.dim();
    if (h, w) == (oh, ow) {
        return x.to_owned();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut out = Array3::zeros((oh, ow, k));
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let mut dst = out.slice_mut(ndarray::s![oy, ox, ..]);
            dst.scaled_add((1.0 - fy) * (1.0 - fx), &x.slice(ndarray::s![y0, x0, ..]));
            dst.scaled_add((1.0 - fy) * fx, &x.slice(ndarray::s![y0, x1, ..]));
            dst.scaled_add(fy * (1.0 - fx), &x.slice(ndarray::s![y1, x0, ..]));
            dst.scaled_add(fy * fx, &x.slice(ndarray::s![y1, x1, ..]));
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_backward(dy: ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (oh, ow, k) = dy.dim();
    if (h, w) == (oh, ow) {
        return dy.to_owned();
    }
    let ty = axis_taps(h, oh);
    let tx = axis_taps(w, ow);
    let mut dx = Array3::zeros((h, w, k));
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = dy.slice(ndarray::s![oy, ox, ..]);
            dx.slice_mut(ndarray::s![y0, x0, ..]).scaled_add((1.0 - fy) * (1.0 - fx), &g);
            dx.slice_mut(ndarray::s![y0, x1, ..]).scaled_add((1.0 - fy) * fx, &g);
            dx.slice_mut(ndarray::s![y1, x0, ..]).scaled_add(fy * (1.0 - fx), &g);
            dx.slice_mut(ndarray::s![y1, x1, ..]).scaled_add(fy * fx, &g);
        }
    }
    dx
}

/// Small uniform jitter helper used by tests and gradient checks.
pub fn uniform_array2(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(lo..hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn taps_identity_and_doubling() {
        let t = axis_taps(4, 8);
        // half-pixel: output 0 maps to source -0.25 -> clamped to 0
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[7], (3, 3, 0.0));
    }

    #[test]
    fn resize_constant_is_constant() {
        let x = Array3::from_elem((3, 5, 2), 0.7);
        let y = resize_bilinear(x.view(), 7, 11);
        assert!(y.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut r = rng::stream(3, &["resize".into()]);
        let x = Array3::from_shape_simple_fn((3, 4, 2), || r.gen_range(-1.0..1.0));
        let dy = Array3::from_shape_simple_fn((8, 7, 2), || r.gen_range(-1.0..1.0));
        let y = resize_bilinear(x.view(), 8, 7);
        let dx = resize_bilinear_backward(dy.view(), 3, 4);
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn neighborhoods() {
        let nb = Neighborhood::spatial(3, 3, 2, 3);
        // corner token sees a 2x2 block of its class
        assert_eq!(nb.neighbors(0), &[0, 2, 6, 8]);
        // centre token of class 1 sees 9 tokens
        assert_eq!(nb.neighbors((4 * 2) + 1).len(), 9);
        let nb = Neighborhood::classwise(2, 3);
        assert_eq!(nb.neighbors(4), &[3, 4, 5]);
    }
}
