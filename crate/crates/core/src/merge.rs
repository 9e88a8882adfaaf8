//! View fusion.
//!
//! [`Merger`] turns per-view encoder features into the state representation
//! the actor and critic consume. Summation is the default: the merged vector
//! has the width of a single view's features, so the same downstream networks
//! accept any subset of views. The remaining strategies exist for comparison.
//!
//! The free functions at the bottom operate on plain vectors and are the
//! reference definitions of each strategy.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::MergeStrategy;
use crate::nn::{relu, relu_backward, LayerNorm, LayerNormCache, Linear, ParamSet, Real};

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("cannot merge an empty list of views")]
    Empty,
    #[error("feature length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{strategy} expects all {expected} views, got {got}")]
    Arity { strategy: MergeStrategy, expected: usize, got: usize },
    #[error("spatial size mismatch between views: {0:?} vs {1:?}")]
    SpatialMismatch((usize, usize), (usize, usize)),
    #[error("merge strategy {0} cannot fuse a subset of views")]
    SubsetUnsupported(MergeStrategy),
}

/// Actor/critic state for a batch.
///
/// `PerView` is only produced by the Q-mean strategy, whose critic scores each
/// view separately and averages.
#[derive(Debug, Clone, PartialEq)]
pub enum Merged<T> {
    Flat(Array2<T>),
    PerView(Vec<Array2<T>>),
}

impl<T: Real> Merged<T> {
    pub fn batch(&self) -> usize {
        match self {
            Merged::Flat(x) => x.nrows(),
            Merged::PerView(v) => v[0].nrows(),
        }
    }

    /// Features seen by the actor: the flat state, or the mean over views.
    pub fn pooled(&self) -> Array2<T> {
        match self {
            Merged::Flat(x) => x.clone(),
            Merged::PerView(v) => {
                let mut acc = v[0].clone();
                for x in &v[1..] {
                    acc += x;
                }
                acc / T::c(v.len() as f64)
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Merged::Flat(x) => Merged::Flat(Array2::zeros(x.raw_dim())),
            Merged::PerView(v) => Merged::PerView(v.iter().map(|x| Array2::zeros(x.raw_dim())).collect()),
        }
    }

    /// Adds a gradient with respect to `pooled()` back onto this layout.
    pub fn add_pooled_grad(&mut self, d: &Array2<T>) {
        match self {
            Merged::Flat(x) => *x += d,
            Merged::PerView(v) => {
                let scale = T::one() / T::c(v.len() as f64);
                for x in v {
                    x.scaled_add(scale, d);
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Merged<T>) {
        match (self, other) {
            (Merged::Flat(a), Merged::Flat(b)) => *a += b,
            (Merged::PerView(a), Merged::PerView(b)) => {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            _ => panic!("merged layout mismatch"),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Merged::Flat(x) => x.iter().all(|v| v.is_finite()),
            Merged::PerView(v) => v.iter().all(|x| x.iter().all(|v| v.is_finite())),
        }
    }
}

/// Single-head attention pooling with a learned query over view tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPool<T> {
    pub query: Array1<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
}

pub struct AttentionPoolCache<T> {
    tokens: Vec<Array2<T>>,
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    /// `(batch, n_tokens)`
    weights: Array2<T>,
    pooled: Array2<T>,
}

impl<T: Real> AttentionPool<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            query: crate::nn::uniform_array1(dim, bound, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            out: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(&self, tokens: &[ArrayView2<T>]) -> (Array2<T>, AttentionPoolCache<T>) {
        let batch = tokens[0].nrows();
        let n = tokens.len();
        let scale = T::one() / T::c(self.query.len() as f64).sqrt();
        let keys: Vec<Array2<T>> = tokens.iter().map(|x| self.key.forward(*x)).collect();
        let values: Vec<Array2<T>> = tokens.iter().map(|x| self.value.forward(*x)).collect();
        let mut weights = Array2::zeros((batch, n));
        for (i, k) in keys.iter().enumerate() {
            weights.column_mut(i).assign(&(k.dot(&self.query) * scale));
        }
        softmax_rows(&mut weights);
        let mut pooled = Array2::zeros((batch, self.query.len()));
        for (i, v) in values.iter().enumerate() {
            pooled += &(v * &weights.column(i).insert_axis(Axis(1)));
        }
        let y = self.out.forward(pooled.view());
        let tokens = tokens.iter().map(|x| x.to_owned()).collect();
        (y, AttentionPoolCache { tokens, keys, values, weights, pooled })
    }

    pub fn backward(&self, cache: &AttentionPoolCache<T>, dy: ArrayView2<T>, mut grad: Option<&mut Self>) -> Vec<Array2<T>> {
        let scale = T::one() / T::c(self.query.len() as f64).sqrt();
        let dpooled = self.out.backward(cache.pooled.view(), dy, grad.as_deref_mut().map(|g| &mut g.out));
        let n = cache.tokens.len();
        // d weights_i = <dpooled, v_i>
        let mut dw = Array2::zeros(cache.weights.raw_dim());
        for i in 0..n {
            let col = (&dpooled * &cache.values[i]).sum_axis(Axis(1));
            dw.column_mut(i).assign(&col);
        }
        let dscores = softmax_rows_backward(&cache.weights, &dw);
        let mut dx = Vec::with_capacity(n);
        let mut dquery = Array1::zeros(self.query.len());
        for i in 0..n {
            let a = cache.weights.column(i).insert_axis(Axis(1));
            let dv = &dpooled * &a;
            let ds = dscores.column(i).insert_axis(Axis(1)).to_owned() * scale;
            // score_i = scale * k_i . q
            let dk = ds.dot(&self.query.view().insert_axis(Axis(0)));
            dquery += &(cache.keys[i].t().dot(&ds.column(0)));
            let mut g = self.value.backward(cache.tokens[i].view(), dv.view(), grad.as_deref_mut().map(|g| &mut g.value));
            g += &self.key.backward(cache.tokens[i].view(), dk.view(), grad.as_deref_mut().map(|g| &mut g.key));
            dx.push(g);
        }
        if let Some(g) = grad {
            g.query += &dquery;
        }
        dx
    }
}

impl<T: Real> ParamSet<T> for AttentionPool<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = vec![crate::nn::slice1(&self.query)];
        v.extend(self.key.tensors());
        v.extend(self.value.tensors());
        v.extend(self.out.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = vec![self.query.as_slice_memory_order_mut().expect("contiguous")];
        v.extend(self.key.tensors_mut());
        v.extend(self.value.tensors_mut());
        v.extend(self.out.tensors_mut());
        v
    }
}

fn softmax_rows<T: Real>(x: &mut Array2<T>) {
    for mut row in x.outer_iter_mut() {
        let m = row.fold(T::neg_infinity(), |a, b| a.max(*b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Gradient of row-wise softmax given its output `p` and upstream `dp`.
fn softmax_rows_backward<T: Real>(p: &Array2<T>, dp: &Array2<T>) -> Array2<T> {
    let dot = (p * dp).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(dp - &dot)
}

/// Pre-norm transformer block over view tokens followed by mean pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitBlock<T> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

pub struct VitCache<T> {
    n: usize,
    x: Array2<T>,
    ln1: LayerNormCache<T>,
    xn: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// per batch element, `(n, n)` attention weights
    attn: Vec<Array2<T>>,
    ctx: Array2<T>,
    ln2: LayerNormCache<T>,
    hn: Array2<T>,
    f1: Array2<T>,
}

impl<T: Real> VitBlock<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, ff_dim: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            ff1: Linear::new(dim, ff_dim, rng),
            ff2: Linear::new(ff_dim, dim, rng),
        }
    }

    /// Token-level block output, rows ordered `(batch, token)`.
    fn block(&self, tokens: &[ArrayView2<T>]) -> (Array2<T>, VitCache<T>) {
        let n = tokens.len();
        let batch = tokens[0].nrows();
        let dim = tokens[0].ncols();
        let mut x = Array2::zeros((batch * n, dim));
        for (i, t) in tokens.iter().enumerate() {
            for b in 0..batch {
                x.row_mut(b * n + i).assign(&t.row(b));
            }
        }
        let (xn, ln1) = self.ln1.forward(x.view());
        let q = self.q.forward(xn.view());
        let k = self.k.forward(xn.view());
        let v = self.v.forward(xn.view());
        let scale = T::one() / T::c(dim as f64).sqrt();
        let mut ctx = Array2::zeros((batch * n, dim));
        let mut attn = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = s![b * n..(b + 1) * n, ..];
            let mut a = q.slice(rows).dot(&k.slice(rows).t()) * scale;
            softmax_rows(&mut a);
            ctx.slice_mut(rows).assign(&a.dot(&v.slice(rows)));
            attn.push(a);
        }
        let h = &x + &self.o.forward(ctx.view());
        let (hn, ln2) = self.ln2.forward(h.view());
        let f1 = relu(self.ff1.forward(hn.view()));
        let z = &h + &self.ff2.forward(f1.view());
        (z, VitCache { n, x, ln1, xn, q, k, v, attn, ctx, ln2, hn, f1 })
    }

    pub fn forward(&self, tokens: &[ArrayView2<T>]) -> (Array2<T>, VitCache<T>) {
        let n = tokens.len();
        let batch = tokens[0].nrows();
        let (z, cache) = self.block(tokens);
        let pooled = z
            .into_shape_with_order((batch, n, tokens[0].ncols()))
            .expect("token layout")
            .mean_axis(Axis(1))
            .expect("non-empty");
        (pooled, cache)
    }

    pub fn backward(&self, cache: &VitCache<T>, dy: ArrayView2<T>, mut grad: Option<&mut Self>) -> Vec<Array2<T>> {
        let n = cache.n;
        let batch = dy.nrows();
        let dim = dy.ncols();
        let inv_n = T::one() / T::c(n as f64);
        let mut dz = Array2::zeros((batch * n, dim));
        for b in 0..batch {
            for i in 0..n {
                dz.row_mut(b * n + i).assign(&(&dy.row(b) * inv_n));
            }
        }
        // z = h + ff2(relu(ff1(ln2(h))))
        let df1 = self.ff2.backward(cache.f1.view(), dz.view(), grad.as_deref_mut().map(|g| &mut g.ff2));
        let df1 = relu_backward(&cache.f1, df1);
        let dhn = self.ff1.backward(cache.hn.view(), df1.view(), grad.as_deref_mut().map(|g| &mut g.ff1));
        let mut dh = dz;
        dh += &self.ln2.backward(&cache.ln2, dhn.view(), grad.as_deref_mut().map(|g| &mut g.ln2));
        // h = x + o(ctx)
        let dctx = self.o.backward(cache.ctx.view(), dh.view(), grad.as_deref_mut().map(|g| &mut g.o));
        let scale = T::one() / T::c(dim as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..batch {
            let rows = s![b * n..(b + 1) * n, ..];
            let a = &cache.attn[b];
            let dctx_b = dctx.slice(rows);
            dv.slice_mut(rows).assign(&a.t().dot(&dctx_b));
            let da = dctx_b.dot(&cache.v.slice(rows).t());
            let ds = softmax_rows_backward(a, &da) * scale;
            dq.slice_mut(rows).assign(&ds.dot(&cache.k.slice(rows)));
            dk.slice_mut(rows).assign(&ds.t().dot(&cache.q.slice(rows)));
        }
        let mut dxn = self.q.backward(cache.xn.view(), dq.view(), grad.as_deref_mut().map(|g| &mut g.q));
        dxn += &self.k.backward(cache.xn.view(), dk.view(), grad.as_deref_mut().map(|g| &mut g.k));
        dxn += &self.v.backward(cache.xn.view(), dv.view(), grad.as_deref_mut().map(|g| &mut g.v));
        let mut dx = dh;
        dx += &self.ln1.backward(&cache.ln1, dxn.view(), grad.map(|g| &mut g.ln1));
        let _ = &cache.x;
        (0..n)
            .map(|i| {
                let mut out = Array2::zeros((batch, dim));
                for b in 0..batch {
                    out.row_mut(b).assign(&dx.row(b * n + i));
                }
                out
            })
            .collect()
    }
}

impl<T: Real> ParamSet<T> for VitBlock<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.ln1.tensors();
        for l in [&self.q, &self.k, &self.v, &self.o] {
            v.extend(l.tensors());
        }
        v.extend(self.ln2.tensors());
        v.extend(self.ff1.tensors());
        v.extend(self.ff2.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.ln1.tensors_mut();
        v.extend(self.q.tensors_mut());
        v.extend(self.k.tensors_mut());
        v.extend(self.v.tensors_mut());
        v.extend(self.o.tensors_mut());
        v.extend(self.ln2.tensors_mut());
        v.extend(self.ff1.tensors_mut());
        v.extend(self.ff2.tensors_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MergeParams<T> {
    None,
    Attention(AttentionPool<T>),
    Vit(VitBlock<T>),
}

/// A merge strategy together with its learned parameters (if any).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merger<T> {
    pub strategy: MergeStrategy,
    pub n_views: usize,
    pub params: MergeParams<T>,
}

pub enum MergeCache<T> {
    Sum { n: usize },
    Concat { widths: Vec<usize> },
    Identity,
    Attention(AttentionPoolCache<T>),
    Vit(VitCache<T>),
    PerView,
}

impl<T: Real> Merger<T> {
    pub fn new<R: Rng + ?Sized>(strategy: MergeStrategy, n_views: usize, feature_dim: usize, ff_dim: usize, rng: &mut R) -> Self {
        let params = match strategy {
            MergeStrategy::Attention => MergeParams::Attention(AttentionPool::new(feature_dim, rng)),
            MergeStrategy::VitLayer => MergeParams::Vit(VitBlock::new(feature_dim, ff_dim, rng)),
            _ => MergeParams::None,
        };
        Self { strategy, n_views, params }
    }

    /// Width of the flat state produced from `feature_dim`-wide view features.
    pub fn output_dim(&self, feature_dim: usize) -> usize {
        match self.strategy {
            MergeStrategy::Concat => self.n_views * feature_dim,
            _ => feature_dim,
        }
    }

    /// Number of encoder passes per timestep: frame stacking encodes one
    /// channel-stacked image, everything else encodes each view.
    pub fn encoder_tokens(&self) -> usize {
        if self.strategy == MergeStrategy::FrameStack {
            1
        } else {
            self.n_views
        }
    }

    /// Fuses the encoded views in `views` (indices into the configured views).
    pub fn forward(&self, features: &[ArrayView2<T>]) -> Result<(Merged<T>, MergeCache<T>), MergeError> {
        if features.is_empty() {
            return Err(MergeError::Empty);
        }
        let width = features[0].ncols();
        for f in features {
            if f.ncols() != width {
                return Err(MergeError::LengthMismatch { expected: width, got: f.ncols() });
            }
        }
        Ok(match (&self.params, self.strategy) {
            (MergeParams::Attention(p), _) => {
                let (y, c) = p.forward(features);
                (Merged::Flat(y), MergeCache::Attention(c))
            }
            (MergeParams::Vit(p), _) => {
                let (y, c) = p.forward(features);
                (Merged::Flat(y), MergeCache::Vit(c))
            }
            (_, MergeStrategy::Sum) => {
                let mut acc = features[0].to_owned();
                for f in &features[1..] {
                    acc += f;
                }
                (Merged::Flat(acc), MergeCache::Sum { n: features.len() })
            }
            (_, MergeStrategy::Concat) => {
                if features.len() != self.n_views {
                    return Err(MergeError::Arity {
                        strategy: self.strategy,
                        expected: self.n_views,
                        got: features.len(),
                    });
                }
                let y = concatenate(Axis(1), features).expect("equal batch sizes");
                (Merged::Flat(y), MergeCache::Concat { widths: vec![width; features.len()] })
            }
            (_, MergeStrategy::FrameStack) => {
                if features.len() != 1 {
                    return Err(MergeError::SubsetUnsupported(self.strategy));
                }
                (Merged::Flat(features[0].to_owned()), MergeCache::Identity)
            }
            (_, MergeStrategy::QMean) => (
                Merged::PerView(features.iter().map(|f| f.to_owned()).collect()),
                MergeCache::PerView,
            ),
            (MergeParams::None, MergeStrategy::Attention | MergeStrategy::VitLayer) => {
                unreachable!("attention strategies carry parameters")
            }
        })
    }

    /// Per-input gradients; accumulates into `grad` for learned strategies.
    pub fn backward(&self, cache: &MergeCache<T>, d: &Merged<T>, grad: Option<&mut Merger<T>>) -> Vec<Array2<T>> {
        match (cache, d) {
            (MergeCache::Sum { n }, Merged::Flat(d)) => vec![d.clone(); *n],
            (MergeCache::Concat { widths }, Merged::Flat(d)) => {
                let mut start = 0;
                widths
                    .iter()
                    .map(|w| {
                        let part = d.slice(s![.., start..start + w]).to_owned();
                        start += w;
                        part
                    })
                    .collect()
            }
            (MergeCache::Identity, Merged::Flat(d)) => vec![d.clone()],
            (MergeCache::Attention(c), Merged::Flat(d)) => {
                let (MergeParams::Attention(p), g) = (&self.params, grad) else { unreachable!() };
                let g = g.map(|g| match &mut g.params {
                    MergeParams::Attention(a) => a,
                    _ => unreachable!(),
                });
                p.backward(c, d.view(), g)
            }
            (MergeCache::Vit(c), Merged::Flat(d)) => {
                let (MergeParams::Vit(p), g) = (&self.params, grad) else { unreachable!() };
                let g = g.map(|g| match &mut g.params {
                    MergeParams::Vit(a) => a,
                    _ => unreachable!(),
                });
                p.backward(c, d.view(), g)
            }
            (MergeCache::PerView, Merged::PerView(d)) => d.clone(),
            _ => panic!("merge cache and gradient layouts disagree"),
        }
    }
}

impl<T: Real> ParamSet<T> for Merger<T> {
    fn tensors(&self) -> Vec<&[T]> {
        match &self.params {
            MergeParams::None => vec![],
            MergeParams::Attention(p) => p.tensors(),
            MergeParams::Vit(p) => p.tensors(),
        }
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        match &mut self.params {
            MergeParams::None => vec![],
            MergeParams::Attention(p) => p.tensors_mut(),
            MergeParams::Vit(p) => p.tensors_mut(),
        }
    }
}

fn check_lengths(features: &[Vec<f64>]) -> Result<usize, MergeError> {
    let first = features.first().ok_or(MergeError::Empty)?;
    for f in features {
        if f.len() != first.len() {
            return Err(MergeError::LengthMismatch { expected: first.len(), got: f.len() });
        }
    }
    Ok(first.len())
}

/// Elementwise sum, accumulated in list order.
pub fn merge_sum(features: &[Vec<f64>]) -> Result<Vec<f64>, MergeError> {
    let dim = check_lengths(features)?;
    let mut out = vec![0.0; dim];
    for f in features {
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    Ok(out)
}

pub fn merge_concat(features: &[Vec<f64>], n_views: usize) -> Result<Vec<f64>, MergeError> {
    check_lengths(features)?;
    if features.len() != n_views {
        return Err(MergeError::Arity { strategy: MergeStrategy::Concat, expected: n_views, got: features.len() });
    }
    Ok(features.concat())
}

/// Channel-stacks CHW view tensors given as `(channels, height, width, data)`.
pub fn merge_frame_stack(views: &[(usize, usize, usize, Vec<f32>)]) -> Result<(usize, usize, usize, Vec<f32>), MergeError> {
    let first = views.first().ok_or(MergeError::Empty)?;
    let mut channels = 0;
    let mut data = Vec::new();
    for (c, h, w, d) in views {
        if (*h, *w) != (first.1, first.2) {
            return Err(MergeError::SpatialMismatch((first.1, first.2), (*h, *w)));
        }
        channels += c;
        data.extend_from_slice(d);
    }
    Ok((channels, first.1, first.2, data))
}

pub fn merge_attention(pool: &AttentionPool<f64>, features: &[Vec<f64>]) -> Result<Vec<f64>, MergeError> {
    check_lengths(features)?;
    let rows: Vec<Array2<f64>> = features.iter().map(|f| Array2::from_shape_vec((1, f.len()), f.clone()).expect("row")).collect();
    let views: Vec<ArrayView2<f64>> = rows.iter().map(|r| r.view()).collect();
    Ok(pool.forward(&views).0.row(0).to_vec())
}

pub fn merge_vit_layer(block: &VitBlock<f64>, features: &[Vec<f64>]) -> Result<Vec<f64>, MergeError> {
    check_lengths(features)?;
    let rows: Vec<Array2<f64>> = features.iter().map(|f| Array2::from_shape_vec((1, f.len()), f.clone()).expect("row")).collect();
    let views: Vec<ArrayView2<f64>> = rows.iter().map(|r| r.view()).collect();
    Ok(block.forward(&views).0.row(0).to_vec())
}

pub fn q_mean(q_values: &[f64]) -> Result<f64, MergeError> {
    if q_values.is_empty() {
        return Err(MergeError::Empty);
    }
    Ok(q_values.iter().sum::<f64>() / q_values.len() as f64)
}
