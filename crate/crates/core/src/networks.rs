//! Encoder, actor, critic, temperature and image augmentation.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EncoderArch;
use crate::merge::Merged;
use crate::nn::{self, relu, relu_backward, tanh_backward, Conv2d, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, ParamSet, Real, Shape3};

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: (usize, usize, usize), got: (usize, usize, usize) },
    #[error("input {h}x{w} is too small for the conv stack")]
    TooSmall { h: usize, w: usize },
    #[error(transparent)]
    Structure(#[from] nn::StructureMismatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl EncoderArch {
    pub fn conv_specs(self) -> Vec<ConvSpec> {
        let c = |filters, kernel, stride| ConvSpec { filters, kernel, stride };
        match self {
            EncoderArch::Dqn => vec![c(32, 8, 4), c(64, 4, 2), c(64, 3, 1)],
            EncoderArch::Desk => vec![c(16, 4, 4), c(32, 3, 1)],
        }
    }
}

/// Shared per-view image encoder: conv stack, linear projection, layer norm
/// and tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder<T> {
    pub convs: Vec<Conv2d<T>>,
    pub proj: Linear<T>,
    pub norm: LayerNorm<T>,
    /// `(channels, height, width)` of one input tensor.
    pub input: (usize, usize, usize),
}

pub struct EncoderCache<T> {
    /// Input of every conv layer, then the final conv activation.
    acts: Vec<Array2<T>>,
    norm: LayerNormCache<T>,
    out: Array2<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(specs: &[ConvSpec], input: (usize, usize, usize), feature_dim: usize, rng: &mut R) -> Result<Self, NetworkError> {
        let (c, h, w) = input;
        let mut shape = Shape3 { h, w, c };
        let mut convs = Vec::with_capacity(specs.len());
        for spec in specs {
            if shape.h < spec.kernel || shape.w < spec.kernel {
                return Err(NetworkError::TooSmall { h, w });
            }
            let conv = Conv2d::new(shape, spec.filters, spec.kernel, spec.stride, rng);
            shape = conv.output_shape();
            convs.push(conv);
        }
        Ok(Self {
            convs,
            proj: Linear::new(shape.len(), feature_dim, rng),
            norm: LayerNorm::new(feature_dim),
            input,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.out_dim()
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }

    /// CHW rows in `[0, 1]` to centered HWC rows.
    fn to_hwc(&self, x: ArrayView2<T>) -> Array2<T> {
        let (c, h, w) = self.input;
        let half = T::c(0.5);
        let hw = h * w;
        let mut out = Vec::with_capacity(x.nrows() * c * hw);
        for src in x.outer_iter() {
            let src = src.to_slice().expect("contiguous rows");
            let planes: Vec<&[T]> = src.chunks_exact(hw).collect();
            for p in 0..hw {
                out.extend(planes.iter().map(|plane| plane[p] - half));
            }
        }
        Array2::from_shape_vec((x.nrows(), c * hw), out).expect("same size")
    }

    pub fn check_input(&self, x: ArrayView2<T>) -> Result<(), NetworkError> {
        if x.ncols() != self.input_len() {
            return Err(NetworkError::Shape {
                expected: self.input,
                got: (x.ncols() / (self.input.1 * self.input.2).max(1), self.input.1, self.input.2),
            });
        }
        Ok(())
    }

    /// Encodes a batch of `(channels * H * W)` rows.
    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, EncoderCache<T>) {
        assert_eq!(x.ncols(), self.input_len(), "encoder input width");
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        acts.push(self.to_hwc(x));
        for conv in &self.convs {
            let y = relu(conv.forward(acts.last().expect("input").view()));
            acts.push(y);
        }
        let z = self.proj.forward(acts.last().expect("conv output").view());
        let (n, norm) = self.norm.forward(z.view());
        let out = n.mapv_into(|v| v.tanh());
        (out.clone(), EncoderCache { acts, norm, out })
    }

    pub fn encode(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &EncoderCache<T>, d_features: Array2<T>, grad: &mut Encoder<T>) {
        let dn = tanh_backward(&cache.out, d_features);
        let dz = self.norm.backward(&cache.norm, dn.view(), Some(&mut grad.norm));
        let last = cache.acts.last().expect("at least one conv");
        let mut dh = self.proj.backward(last.view(), dz.view(), Some(&mut grad.proj));
        for i in (0..self.convs.len()).rev() {
            dh = relu_backward(&cache.acts[i + 1], dh);
            let need_input = i > 0;
            match self.convs[i].backward(cache.acts[i].view(), &dh, Some(&mut grad.convs[i]), need_input) {
                Some(dx) => dh = dx,
                None => break,
            }
        }
    }
}

impl<T: Real> ParamSet<T> for Encoder<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = self.convs.iter().flat_map(|c| c.tensors()).collect();
        v.extend(self.proj.tensors());
        v.extend(self.norm.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = self.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        v.extend(self.proj.tensors_mut());
        v.extend(self.norm.tensors_mut());
        v
    }
}

pub struct PolicyOutput<T, C> {
    pub action: Array2<T>,
    pub log_prob: Array1<T>,
    pub cache: C,
}

/// Stochastic policy over `[-1, 1]^action_dim` driven by external noise.
pub trait PolicyNet<T: Real> {
    type Cache;
    fn action_dim(&self) -> usize;
    /// Zero `noise` gives the deterministic (mean) action.
    fn policy_forward(&self, state: &Merged<T>, proprio: ArrayView2<T>, noise: ArrayView2<T>) -> PolicyOutput<T, Self::Cache>;
    /// Gradient with respect to the state; parameter gradients go to `grad`.
    fn policy_backward(&self, cache: &Self::Cache, d_action: ArrayView2<T>, d_log_prob: ArrayView1<T>, grad: Option<&mut Self>) -> Merged<T>;
}

/// State-action value function with one or more heads.
pub trait QNet<T: Real> {
    type Cache;
    fn q_forward(&self, state: &Merged<T>, proprio: ArrayView2<T>, action: ArrayView2<T>) -> (Vec<Array1<T>>, Self::Cache);
    /// Gradients with respect to state and action.
    fn q_backward(&self, cache: &Self::Cache, d_q: &[Array1<T>], grad: Option<&mut Self>) -> (Merged<T>, Array2<T>);
}

/// Tanh-squashed diagonal Gaussian policy head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor<T> {
    pub trunk: Mlp<T>,
    pub log_std_bounds: (f64, f64),
    pub state_dim: usize,
}

pub struct ActorCache<T> {
    mlp: MlpCache<T>,
    per_view: Option<usize>,
    squashed_raw: Array2<T>,
    std: Array2<T>,
    noise: Array2<T>,
    tanh_u: Array2<T>,
}

fn log_one_minus_tanh_sq<T: Real>(u: T) -> T {
    // log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    let two = T::c(2.0);
    let x = -two * u;
    let softplus = if x > T::zero() { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    two * (T::c(std::f64::consts::LN_2) - u - softplus)
}

impl<T: Real> Actor<T> {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, proprio_dim: usize, hidden: usize, action_dim: usize, log_std_bounds: (f64, f64), rng: &mut R) -> Self {
        Self {
            trunk: Mlp::new(state_dim + proprio_dim, hidden, 2 * action_dim, rng),
            log_std_bounds,
            state_dim,
        }
    }
}

impl<T: Real> PolicyNet<T> for Actor<T> {
    type Cache = ActorCache<T>;

    fn action_dim(&self) -> usize {
        self.trunk.l3.out_dim() / 2
    }

    fn policy_forward(&self, state: &Merged<T>, proprio: ArrayView2<T>, noise: ArrayView2<T>) -> PolicyOutput<T, ActorCache<T>> {
        let per_view = match state {
            Merged::PerView(v) => Some(v.len()),
            Merged::Flat(_) => None,
        };
        let features = state.pooled();
        let input = concatenate(Axis(1), &[features.view(), proprio]).expect("batch sizes agree");
        let (out, mlp) = self.trunk.forward(input);
        let a = self.action_dim();
        let mu = out.slice(s![.., ..a]).to_owned();
        let squashed_raw = out.slice(s![.., a..]).mapv(|v| v.tanh());
        let (lo, hi) = (T::c(self.log_std_bounds.0), T::c(self.log_std_bounds.1));
        let half_range = T::c(0.5) * (hi - lo);
        let log_std = squashed_raw.mapv(|t| lo + half_range * (t + T::one()));
        let std = log_std.mapv(|v| v.exp());
        let u = &mu + &(&std * &noise);
        let tanh_u = u.mapv(|v| v.tanh());
        let limit = T::one() - T::epsilon();
        let action = tanh_u.mapv(|v| v.max(-limit).min(limit));
        let log_norm = T::c(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut log_prob = Array1::zeros(u.nrows());
        for b in 0..u.nrows() {
            let mut acc = T::zero();
            for j in 0..a {
                let e = noise[[b, j]];
                acc = acc - T::c(0.5) * e * e - log_std[[b, j]] - log_norm - log_one_minus_tanh_sq(u[[b, j]]);
            }
            log_prob[b] = acc;
        }
        PolicyOutput {
            action,
            log_prob,
            cache: ActorCache { mlp, per_view, squashed_raw, std, noise: noise.to_owned(), tanh_u },
        }
    }

    fn policy_backward(&self, cache: &ActorCache<T>, d_action: ArrayView2<T>, d_log_prob: ArrayView1<T>, grad: Option<&mut Self>) -> Merged<T> {
        let a = self.action_dim();
        let batch = d_action.nrows();
        let (lo, hi) = (T::c(self.log_std_bounds.0), T::c(self.log_std_bounds.1));
        let half_range = T::c(0.5) * (hi - lo);
        let mut d_out = Array2::zeros((batch, 2 * a));
        let two = T::c(2.0);
        for b in 0..batch {
            for j in 0..a {
                let t = cache.tanh_u[[b, j]];
                // d/du log(1 - tanh^2 u) = -2 tanh u, entering log_prob with a minus sign
                let du = d_action[[b, j]] * (T::one() - t * t) + two * t * d_log_prob[b];
                let d_log_std = du * cache.std[[b, j]] * cache.noise[[b, j]] - d_log_prob[b];
                let r = cache.squashed_raw[[b, j]];
                d_out[[b, j]] = du;
                d_out[[b, a + j]] = d_log_std * half_range * (T::one() - r * r);
            }
        }
        let d_in = self.trunk.backward(&cache.mlp, d_out.view(), grad.map(|g| &mut g.trunk));
        let d_features = d_in.slice(s![.., ..self.state_dim]).to_owned();
        match cache.per_view {
            None => Merged::Flat(d_features),
            Some(n) => {
                let scale = T::one() / T::c(n as f64);
                Merged::PerView(vec![d_features * scale; n])
            }
        }
    }
}

impl<T: Real> ParamSet<T> for Actor<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.trunk.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.trunk.tensors_mut()
    }
}

/// One or two independent Q heads over `[state, proprio, action]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic<T> {
    pub heads: Vec<Mlp<T>>,
    pub state_dim: usize,
    pub action_dim: usize,
}

pub struct CriticCache<T> {
    /// `[view][head]`; a flat state is a single view.
    caches: Vec<Vec<MlpCache<T>>>,
    per_view: bool,
}

impl<T: Real> Critic<T> {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, proprio_dim: usize, action_dim: usize, hidden: usize, twin: bool, rng: &mut R) -> Self {
        let n_heads = if twin { 2 } else { 1 };
        Self {
            heads: (0..n_heads).map(|_| Mlp::new(state_dim + proprio_dim + action_dim, hidden, 1, rng)).collect(),
            state_dim,
            action_dim,
        }
    }

    fn forward_flat(&self, state: ArrayView2<T>, proprio: ArrayView2<T>, action: ArrayView2<T>) -> (Vec<Array1<T>>, Vec<MlpCache<T>>) {
        let input = concatenate(Axis(1), &[state, proprio, action]).expect("batch sizes agree");
        self.heads
            .iter()
            .map(|h| {
                let (q, c) = h.forward(input.clone());
                (q.column(0).to_owned(), c)
            })
            .unzip()
    }
}

impl<T: Real> QNet<T> for Critic<T> {
    type Cache = CriticCache<T>;

    fn q_forward(&self, state: &Merged<T>, proprio: ArrayView2<T>, action: ArrayView2<T>) -> (Vec<Array1<T>>, CriticCache<T>) {
        match state {
            Merged::Flat(x) => {
                let (qs, c) = self.forward_flat(x.view(), proprio, action);
                (qs, CriticCache { caches: vec![c], per_view: false })
            }
            Merged::PerView(views) => {
                let n = T::c(views.len() as f64);
                let mut sums: Vec<Array1<T>> = vec![Array1::zeros(action.nrows()); self.heads.len()];
                let mut caches = Vec::with_capacity(views.len());
                for v in views {
                    let (qs, c) = self.forward_flat(v.view(), proprio, action);
                    for (s, q) in sums.iter_mut().zip(qs) {
                        *s += &q;
                    }
                    caches.push(c);
                }
                (sums.into_iter().map(|s| s / n).collect(), CriticCache { caches, per_view: true })
            }
        }
    }

    fn q_backward(&self, cache: &CriticCache<T>, d_q: &[Array1<T>], mut grad: Option<&mut Self>) -> (Merged<T>, Array2<T>) {
        let n_views = cache.caches.len();
        let scale = T::one() / T::c(n_views as f64);
        let batch = d_q[0].len();
        let mut d_states = Vec::with_capacity(n_views);
        let mut d_action = Array2::zeros((batch, self.action_dim));
        for view_caches in &cache.caches {
            let mut d_input: Option<Array2<T>> = None;
            for (h, (head, c)) in self.heads.iter().zip(view_caches).enumerate() {
                let dq = (&d_q[h] * scale).insert_axis(Axis(1));
                let g = grad.as_deref_mut().map(|g| &mut g.heads[h]);
                let d = head.backward(c, dq.view(), g);
                d_input = Some(match d_input {
                    Some(acc) => acc + d,
                    None => d,
                });
            }
            let d_input = d_input.expect("at least one head");
            let width = d_input.ncols();
            d_states.push(d_input.slice(s![.., ..self.state_dim]).to_owned());
            d_action += &d_input.slice(s![.., width - self.action_dim..]);
        }
        let d_state = if cache.per_view {
            Merged::PerView(d_states)
        } else {
            Merged::Flat(d_states.pop().expect("one view"))
        };
        (d_state, d_action)
    }
}

impl<T: Real> ParamSet<T> for Critic<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.heads.iter().flat_map(|h| h.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.heads.iter_mut().flat_map(|h| h.tensors_mut()).collect()
    }
}

/// Entropy temperature stored as its logarithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Temperature<T> {
    pub log_value: Array1<T>,
}

impl<T: Real> Temperature<T> {
    pub fn new(init: f64) -> Self {
        Self { log_value: Array1::from_elem(1, T::c(init.ln())) }
    }

    pub fn value(&self) -> T {
        self.log_value[0].exp()
    }
}

impl<T: Real> ParamSet<T> for Temperature<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![nn::slice1(&self.log_value)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.log_value.as_slice_memory_order_mut().expect("contiguous")]
    }
}

/// Shifted views plus the sampling offset `(dx, dy)` used for every
/// `[view][batch element]`.
pub struct ShiftOutput<T> {
    pub views: Vec<Array2<T>>,
    pub offsets: Vec<Vec<(i32, i32)>>,
}

/// Random integer translation with replicate padding.
///
/// One offset in `[-pad, pad]^2` is drawn per batch element and applied to
/// every view and every stacked frame of that element: output pixel `(y, x)`
/// reads input pixel `(clamp(y + dy), clamp(x + dx))`.
pub fn random_shift<T: Real, R: Rng + ?Sized>(views: &[Array2<T>], chw: (usize, usize, usize), pad: usize, rng: &mut R) -> ShiftOutput<T> {
    let batch = views.first().map_or(0, |v| v.nrows());
    if pad == 0 {
        return ShiftOutput { views: views.to_vec(), offsets: vec![vec![(0, 0); batch]; views.len()] };
    }
    let p = pad as i32;
    let offsets: Vec<(i32, i32)> = (0..batch).map(|_| (rng.random_range(-p..=p), rng.random_range(-p..=p))).collect();
    let (c, h, w) = chw;
    let shifted = views
        .iter()
        .map(|v| {
            let mut out = Array2::zeros(v.raw_dim());
            for (b, (src, mut dst)) in v.outer_iter().zip(out.outer_iter_mut()).enumerate() {
                let (dx, dy) = offsets[b];
                let src = src.to_slice().expect("contiguous");
                let dst = dst.as_slice_mut().expect("contiguous");
                let shift = dx.unsigned_abs() as usize;
                for ch in 0..c {
                    for y in 0..h {
                        let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                        let row = &src[(ch * h + sy) * w..(ch * h + sy + 1) * w];
                        let out_row = &mut dst[(ch * h + y) * w..(ch * h + y + 1) * w];
                        shift_row(row, out_row, dx, shift.min(w));
                    }
                }
            }
            out
        })
        .collect();
    ShiftOutput { views: shifted, offsets: vec![offsets; views.len()] }
}

/// `out[x] = row[clamp(x + dx)]`, where `shift = |dx|` is at most the row width.
fn shift_row<T: Copy>(row: &[T], out: &mut [T], dx: i32, shift: usize) {
    let w = row.len();
    if dx >= 0 {
        out[..w - shift].copy_from_slice(&row[shift..]);
        out[w - shift..].fill(row[w - 1]);
    } else {
        out[shift..].copy_from_slice(&row[..w - shift]);
        out[..shift].fill(row[0]);
    }
}

/// `target <- (1 - tau) * target + tau * online`, scalar by scalar.
pub fn soft_update<T: Real>(target: &mut dyn ParamSet<T>, online: &dyn ParamSet<T>, tau: f64) -> Result<(), NetworkError> {
    nn::check_same_structure(&*target, online)?;
    let tau = T::c(tau);
    let keep = T::one() - tau;
    for (t, o) in target.tensors_mut().into_iter().zip(online.tensors()) {
        for (a, b) in t.iter_mut().zip(o) {
            *a = keep * *a + tau * *b;
        }
    }
    Ok(())
}
