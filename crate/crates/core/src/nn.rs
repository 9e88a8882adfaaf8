//! Minimal dense/conv layers with hand-written backward passes.
//!
//! Layers are plain parameter structs. `forward` returns the output together
//! with whatever the backward pass needs; `backward` takes that cache, the
//! upstream gradient and an optional gradient accumulator of the same type as
//! the layer. Passing `None` propagates input gradients without touching any
//! parameter gradient, which is how frozen networks are differentiated through.
//!
//! Activations are row-major `(batch, features)` matrices. Convolutions use
//! NHWC rows, i.e. one image per row laid out as `(y, x, channel)`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A structured set of parameter tensors visited in a fixed order.
pub trait ParamSet<T: Real> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    fn flatten(&self) -> Vec<T> {
        self.tensors().into_iter().flat_map(|t| t.iter().copied()).collect()
    }

    fn shape_signature(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("parameter structure mismatch: {0}")]
pub struct StructureMismatch(pub String);

/// Copies `src` into `dst`; both must have the same structure.
pub fn copy_params<T: Real>(dst: &mut dyn ParamSet<T>, src: &dyn ParamSet<T>) -> Result<(), StructureMismatch> {
    check_same_structure(&*dst, src)?;
    for (d, s) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        d.copy_from_slice(s);
    }
    Ok(())
}

pub fn check_same_structure<T: Real>(a: &dyn ParamSet<T>, b: &dyn ParamSet<T>) -> Result<(), StructureMismatch> {
    let (sa, sb) = (a.shape_signature(), b.shape_signature());
    if sa != sb {
        return Err(StructureMismatch(format!(
            "{} tensors ({} scalars) vs {} tensors ({} scalars)",
            sa.len(),
            sa.iter().sum::<usize>(),
            sb.len(),
            sb.iter().sum::<usize>()
        )));
    }
    Ok(())
}

pub fn max_abs<T: Real>(p: &dyn ParamSet<T>) -> T {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .fold(T::zero(), |m, v| m.max(v.abs()))
}

pub fn sq_norm<T: Real>(p: &dyn ParamSet<T>) -> T {
    p.tensors().iter().flat_map(|t| t.iter()).map(|v| *v * *v).sum()
}

pub fn uniform_array2<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::c(rng.random_range(-bound..bound)))
}

pub fn uniform_array1<T: Real, R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Array1<T> {
    Array1::from_shape_fn(n, |_| T::c(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `(out, in)`
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: uniform_array2(output, input, bound, rng),
            b: uniform_array1(output, bound, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Input gradient; accumulates parameter gradients into `grad` when given.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: Option<&mut Linear<T>>) -> Array2<T> {
        if let Some(g) = grad {
            self.accumulate(x, dy, g);
        }
        dy.dot(&self.w)
    }

    pub fn accumulate(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) {
        general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

impl<T: Real> ParamSet<T> for Linear<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![slice(&self.w), slice1(&self.b)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w.as_slice_memory_order_mut().expect("contiguous"),
            self.b.as_slice_memory_order_mut().expect("contiguous"),
        ]
    }
}

pub(crate) fn slice<T>(a: &Array2<T>) -> &[T] {
    a.as_slice_memory_order().expect("contiguous")
}

pub(crate) fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice_memory_order().expect("contiguous")
}

/// Spatial geometry of one NHWC image row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d<T> {
    /// `(out_channels, k * k * in_channels)`, patch order `(ky, kx, c)`.
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub kernel: usize,
    pub stride: usize,
    pub input: Shape3,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(input: Shape3, out_channels: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        assert!(input.h >= kernel && input.w >= kernel, "kernel larger than input");
        let fan_in = kernel * kernel * input.c;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: uniform_array2(out_channels, fan_in, bound, rng),
            b: uniform_array1(out_channels, bound, rng),
            kernel,
            stride,
            input,
        }
    }

    pub fn output_shape(&self) -> Shape3 {
        Shape3 {
            h: (self.input.h - self.kernel) / self.stride + 1,
            w: (self.input.w - self.kernel) / self.stride + 1,
            c: self.w.nrows(),
        }
    }

    /// Patch rows for images `images` of `x`, written into `cols`.
    fn im2col_into(&self, x: ArrayView2<T>, images: std::ops::Range<usize>, cols: &mut Vec<T>) {
        let out = self.output_shape();
        let (k, s, inp) = (self.kernel, self.stride, self.input);
        let patch = k * k * inp.c;
        let len = k * inp.c;
        cols.clear();
        cols.reserve(images.len() * out.h * out.w * patch);
        for b in images {
            let src = x.row(b).to_slice().expect("contiguous input rows");
            for oy in 0..out.h {
                for ox in 0..out.w {
                    for ky in 0..k {
                        let start = ((oy * s + ky) * inp.w + ox * s) * inp.c;
                        cols.extend_from_slice(&src[start..start + len]);
                    }
                }
            }
        }
    }

    /// Scatters patch gradients of images starting at `first` back into `dx`.
    fn col2im_add(&self, dcols: &[T], first: usize, dx: &mut Array2<T>) {
        let out = self.output_shape();
        let (k, s, inp) = (self.kernel, self.stride, self.input);
        let patch = k * k * inp.c;
        let len = k * inp.c;
        let per_image = out.h * out.w * patch;
        for (i, src) in dcols.chunks_exact(per_image).enumerate() {
            let mut row = dx.row_mut(first + i);
            let img = row.as_slice_mut().expect("contiguous");
            let mut base = 0;
            for oy in 0..out.h {
                for ox in 0..out.w {
                    for ky in 0..k {
                        let start = ((oy * s + ky) * inp.w + ox * s) * inp.c;
                        for (d, v) in img[start..start + len].iter_mut().zip(&src[base + ky * len..base + (ky + 1) * len]) {
                            *d += *v;
                        }
                    }
                    base += patch;
                }
            }
        }
    }

    /// Images per chunk so that one chunk of patch rows stays cache-sized.
    fn chunk_images(&self) -> usize {
        let out = self.output_shape();
        let per_image = out.h * out.w * self.kernel * self.kernel * self.input.c;
        ((1 << 19) / per_image.max(1)).max(1)
    }

    /// NHWC output rows. Patches are built chunk by chunk and not kept.
    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        assert_eq!(x.ncols(), self.input.len(), "conv input width");
        let batch = x.nrows();
        let out = self.output_shape();
        let positions = out.h * out.w;
        let patch = self.w.ncols();
        let mut y = Array2::<T>::zeros((batch * positions, out.c));
        let mut cols = Vec::new();
        let step = self.chunk_images();
        for first in (0..batch).step_by(step) {
            let last = (first + step).min(batch);
            self.im2col_into(x, first..last, &mut cols);
            let rows = (last - first) * positions;
            let c = ArrayView2::from_shape((rows, patch), &cols).expect("patch matrix");
            let mut dst = y.slice_mut(ndarray::s![first * positions..last * positions, ..]);
            dst.assign(&self.b.broadcast((rows, out.c)).expect("bias broadcast"));
            general_mat_mul(T::one(), &c, &self.w.t(), T::one(), &mut dst);
        }
        y.into_shape_with_order((batch, out.len())).expect("reshape conv output")
    }

    /// Accumulates parameter gradients given the layer input `x`; returns the
    /// input gradient only when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: ArrayView2<T>,
        dy: &Array2<T>,
        mut grad: Option<&mut Conv2d<T>>,
        need_input_grad: bool,
    ) -> Option<Array2<T>> {
        let batch = dy.nrows();
        let out = self.output_shape();
        let positions = out.h * out.w;
        let patch = self.w.ncols();
        let dy2 = dy
            .view()
            .into_shape_with_order((batch * positions, out.c))
            .expect("reshape conv grad");
        if let Some(g) = grad.as_deref_mut() {
            g.b += &dy2.sum_axis(Axis(0));
        }
        let mut dx = need_input_grad.then(|| Array2::<T>::zeros((batch, self.input.len())));
        let mut cols = Vec::new();
        let mut dcols = Array2::<T>::zeros((0, patch));
        let step = self.chunk_images();
        for first in (0..batch).step_by(step) {
            let last = (first + step).min(batch);
            let rows = (last - first) * positions;
            let dyc = dy2.slice(ndarray::s![first * positions..last * positions, ..]);
            if let Some(g) = grad.as_deref_mut() {
                self.im2col_into(x, first..last, &mut cols);
                let c = ArrayView2::from_shape((rows, patch), &cols).expect("patch matrix");
                general_mat_mul(T::one(), &dyc.t(), &c, T::one(), &mut g.w);
            }
            if let Some(dx) = dx.as_mut() {
                if dcols.nrows() != rows {
                    dcols = Array2::zeros((rows, patch));
                }
                general_mat_mul(T::one(), &dyc, &self.w, T::zero(), &mut dcols);
                self.col2im_add(dcols.as_slice().expect("contiguous"), first, dx);
            }
        }
        dx
    }
}

impl<T: Real> ParamSet<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![slice(&self.w), slice1(&self.b)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w.as_slice_memory_order_mut().expect("contiguous"),
            self.b.as_slice_memory_order_mut().expect("contiguous"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::c(x.ncols() as f64);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).sum::<T>() / d;
            *is = T::one() / (var + T::c(LN_EPS)).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &self.gain + &self.bias;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: Option<&mut LayerNorm<T>>) -> Array2<T> {
        if let Some(g) = grad {
            g.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
            g.bias += &dy.sum_axis(Axis(0));
        }
        let d = T::c(dy.ncols() as f64);
        let dxhat = &dy * &self.gain;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), is) in dx
            .outer_iter_mut()
            .zip(dxhat.outer_iter())
            .zip(cache.xhat.outer_iter())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| *a * *b).sum::<T>() / d;
            for ((o, gi), xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = *is * (*gi - mean_g - *xi * mean_gx);
            }
        }
        dx
    }
}

impl<T: Real> ParamSet<T> for LayerNorm<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![slice1(&self.gain), slice1(&self.bias)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.gain.as_slice_memory_order_mut().expect("contiguous"),
            self.bias.as_slice_memory_order_mut().expect("contiguous"),
        ]
    }
}

pub fn relu<T: Real>(x: Array2<T>) -> Array2<T> {
    x.mapv_into(|v| v.max(T::zero()))
}

/// Gradient of relu given its output.
pub fn relu_backward<T: Real>(y: &Array2<T>, mut dy: Array2<T>) -> Array2<T> {
    ndarray::Zip::from(&mut dy).and(y).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dy
}

/// Gradient of tanh given its output.
pub fn tanh_backward<T: Real>(y: &Array2<T>, mut dy: Array2<T>) -> Array2<T> {
    ndarray::Zip::from(&mut dy).and(y).for_each(|d, &o| *d *= T::one() - o * o);
    dy
}

/// Two-hidden-layer relu MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub l1: Linear<T>,
    pub l2: Linear<T>,
    pub l3: Linear<T>,
}

pub struct MlpCache<T> {
    x: Array2<T>,
    h1: Array2<T>,
    h2: Array2<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            l1: Linear::new(input, hidden, rng),
            l2: Linear::new(hidden, hidden, rng),
            l3: Linear::new(hidden, output, rng),
        }
    }

    pub fn forward(&self, x: Array2<T>) -> (Array2<T>, MlpCache<T>) {
        let h1 = relu(self.l1.forward(x.view()));
        let h2 = relu(self.l2.forward(h1.view()));
        let y = self.l3.forward(h2.view());
        (y, MlpCache { x, h1, h2 })
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: ArrayView2<T>, mut grad: Option<&mut Mlp<T>>) -> Array2<T> {
        let dh2 = self.l3.backward(cache.h2.view(), dy, grad.as_deref_mut().map(|g| &mut g.l3));
        let dh2 = relu_backward(&cache.h2, dh2);
        let dh1 = self.l2.backward(cache.h1.view(), dh2.view(), grad.as_deref_mut().map(|g| &mut g.l2));
        let dh1 = relu_backward(&cache.h1, dh1);
        self.l1.backward(cache.x.view(), dh1.view(), grad.map(|g| &mut g.l1))
    }
}

impl<T: Real> ParamSet<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.l1.tensors();
        v.extend(self.l2.tensors());
        v.extend(self.l3.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.l1.tensors_mut();
        v.extend(self.l2.tensors_mut());
        v.extend(self.l3.tensors_mut());
        v
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, params: &dyn ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, params: &mut dyn ParamSet<T>, grads: &dyn ParamSet<T>) {
        self.step += 1;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        let lr = T::c(self.lr);
        let eps = T::c(self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// First-moment buffers followed by second-moment buffers.
    pub fn buffers(&self) -> Vec<&[T]> {
        self.m.iter().chain(&self.v).map(|b| b.as_slice()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.m.iter_mut().chain(self.v.iter_mut()).map(|b| b.as_mut_slice()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    /// Central differences of `f` with respect to every scalar of `p`.
    fn numeric_grad<P: ParamSet<f64> + Clone>(p: &P, f: &dyn Fn(&P) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let n = p.num_params();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut plus = p.clone();
            let mut minus = p.clone();
            nth(&mut plus, k, h);
            nth(&mut minus, k, -h);
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out
    }

    fn nth<P: ParamSet<f64>>(p: &mut P, mut k: usize, delta: f64) {
        for t in p.tensors_mut() {
            if k < t.len() {
                t[k] += delta;
                return;
            }
            k -= t.len();
        }
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng();
        let lin = Linear::<f64>::new(4, 3, &mut r);
        let x = uniform_array2::<f64, _>(5, 4, 1.0, &mut r);
        let weights = uniform_array2::<f64, _>(5, 3, 1.0, &mut r);
        let loss = |l: &Linear<f64>| (l.forward(x.view()) * &weights).sum();
        let mut g = lin.clone();
        g.fill_zero();
        lin.backward(x.view(), weights.view(), Some(&mut g));
        assert_close(&g.flatten(), &numeric_grad(&lin, &loss), 1e-6);
    }

    #[test]
    fn conv_matches_direct_convolution_and_gradients() {
        let mut r = rng();
        let input = Shape3 { h: 7, w: 6, c: 2 };
        let conv = Conv2d::<f64>::new(input, 3, 3, 2, &mut r);
        let x = uniform_array2::<f64, _>(2, input.len(), 1.0, &mut r);
        let y = conv.forward(x.view());
        let out = conv.output_shape();
        assert_eq!((out.h, out.w, out.c), (3, 2, 3));
        // direct loop oracle
        for b in 0..2 {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    for oc in 0..out.c {
                        let mut acc = conv.b[oc];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                for c in 0..2 {
                                    let xi = ((oy * 2 + ky) * input.w + ox * 2 + kx) * input.c + c;
                                    acc += x[[b, xi]] * conv.w[[oc, (ky * 3 + kx) * 2 + c]];
                                }
                            }
                        }
                        let yi = (oy * out.w + ox) * out.c + oc;
                        assert!((y[[b, yi]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
        let weights = uniform_array2::<f64, _>(2, out.len(), 1.0, &mut r);
        let mut g = conv.clone();
        g.fill_zero();
        let dx = conv.backward(x.view(), &weights, Some(&mut g), true).unwrap();
        let loss = |c: &Conv2d<f64>| (c.forward(x.view()) * &weights).sum();
        assert_close(&g.flatten(), &numeric_grad(&conv, &loss), 1e-6);
        // input gradient
        let h = 1e-6;
        for k in [0, 5, 17, input.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[1, k]] += h;
            xm[[1, k]] -= h;
            let num = ((conv.forward(xp.view()) * &weights).sum() - (conv.forward(xm.view()) * &weights).sum()) / (2.0 * h);
            assert!((num - dx[[1, k]]).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_gradients() {
        let mut r = rng();
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gain = uniform_array1(5, 1.0, &mut r);
        ln.bias = uniform_array1(5, 1.0, &mut r);
        let x = uniform_array2::<f64, _>(3, 5, 2.0, &mut r);
        let weights = uniform_array2::<f64, _>(3, 5, 1.0, &mut r);
        let (_, cache) = ln.forward(x.view());
        let mut g = ln.clone();
        g.fill_zero();
        let dx = ln.backward(&cache, weights.view(), Some(&mut g));
        let loss = |l: &LayerNorm<f64>| (l.forward(x.view()).0 * &weights).sum();
        assert_close(&g.flatten(), &numeric_grad(&ln, &loss), 1e-6);
        let h = 1e-6;
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[[2, 3]] += h;
        xm[[2, 3]] -= h;
        let num = ((ln.forward(xp.view()).0 * &weights).sum() - (ln.forward(xm.view()).0 * &weights).sum()) / (2.0 * h);
        assert!((num - dx[[2, 3]]).abs() < 1e-6);
    }

    #[test]
    fn mlp_gradients() {
        let mut r = rng();
        let mlp = Mlp::<f64>::new(3, 6, 2, &mut r);
        let x = uniform_array2::<f64, _>(4, 3, 1.0, &mut r);
        let weights = uniform_array2::<f64, _>(4, 2, 1.0, &mut r);
        let (_, cache) = mlp.forward(x.clone());
        let mut g = mlp.clone();
        g.fill_zero();
        mlp.backward(&cache, weights.view(), Some(&mut g));
        let loss = |m: &Mlp<f64>| (m.forward(x.clone()).0 * &weights).sum();
        assert_close(&g.flatten(), &numeric_grad(&mlp, &loss), 1e-5);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut r = rng();
        let mut lin = Linear::<f64>::new(2, 2, &mut r);
        let before = lin.flatten();
        let mut g = lin.clone();
        for t in g.tensors_mut() {
            t.fill(3.0);
        }
        let mut opt = Adam::new(0.1, &lin);
        opt.update(&mut lin, &g);
        for (a, b) in lin.flatten().iter().zip(before) {
            assert!((b - a - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let mut r = rng();
        let a = Linear::<f64>::new(2, 3, &mut r);
        let mut b = Linear::<f64>::new(3, 3, &mut r);
        assert!(copy_params(&mut b, &a).is_err());
    }
}
