//! Stream-weighted actor, critic and temperature objectives.
//!
//! A *stream* is one state representation of the batch fed to the actor and
//! critic: the merged features of all views, or the features of a single view.
//! Every objective is a weighted sum of per-stream losses. The functions here
//! are generic over [`QNet`] and [`PolicyNet`] so they can be driven by small
//! closed-form networks in tests.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::merge::Merged;
use crate::networks::{PolicyNet, QNet};
use crate::nn::Real;

fn min_heads<T: Real>(qs: &[Array1<T>]) -> Array1<T> {
    let mut m = qs[0].clone();
    for q in &qs[1..] {
        m.zip_mut_with(q, |a, &b| *a = a.min(b));
    }
    m
}

fn mean<T: Real>(x: &Array1<T>) -> T {
    x.sum() / T::c(x.len() as f64)
}

/// `[alpha, (1 - alpha) / n, ..., (1 - alpha) / n]` for the merged stream
/// followed by `n` single-view streams.
pub fn mad_weights<T: Real>(alpha: f64, n_views: usize) -> Vec<T> {
    let mut w = vec![T::c(alpha)];
    w.extend(std::iter::repeat_n(T::c((1.0 - alpha) / n_views as f64), n_views));
    w
}

/// Soft Bellman target `r + discount * (1 - done) * (min_h Qbar_h(s', a') - temperature * log pi(a'|s'))`
/// with `a'` drawn from the policy at `next_state` using `noise`.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_targets<T: Real, P: PolicyNet<T>, Q: QNet<T>>(
    policy: &P,
    target_critic: &Q,
    next_state: &Merged<T>,
    next_proprio: ArrayView2<T>,
    reward: ArrayView1<T>,
    done: ArrayView1<T>,
    discount: T,
    temperature: T,
    noise: ArrayView2<T>,
) -> Array1<T> {
    let out = policy.policy_forward(next_state, next_proprio, noise);
    let (qs, _) = target_critic.q_forward(next_state, next_proprio, out.action.view());
    let v = min_heads(&qs) - &(out.log_prob * temperature);
    let mut y = reward.to_owned();
    for b in 0..y.len() {
        y[b] += discount * (T::one() - done[b]) * v[b];
    }
    y
}

pub struct CriticLoss<T> {
    pub total: T,
    /// Unweighted loss of each stream.
    pub streams: Vec<T>,
    /// Mean online Q over heads and batch, per stream.
    pub q_means: Vec<T>,
    /// Gradient of `total` with respect to each stream's state; empty unless
    /// gradients were requested.
    pub d_states: Vec<Merged<T>>,
}

/// `sum_s w_s * sum_h mean_b (Q_h(state_s, a) - y_s)^2`.
///
/// With `grad` given, parameter gradients are accumulated into it and the
/// state gradients of every stream are returned.
pub fn critic_loss<T: Real, Q: QNet<T>>(
    critic: &Q,
    states: &[&Merged<T>],
    proprio: ArrayView2<T>,
    action: ArrayView2<T>,
    targets: &[&Array1<T>],
    weights: &[T],
    mut grad: Option<&mut Q>,
) -> CriticLoss<T> {
    assert_eq!(states.len(), weights.len(), "one weight per stream");
    assert_eq!(states.len(), targets.len(), "one target per stream");
    let batch = T::c(action.nrows() as f64);
    let mut out = CriticLoss { total: T::zero(), streams: vec![], q_means: vec![], d_states: vec![] };
    for ((state, y), &w) in states.iter().zip(targets).zip(weights) {
        let (qs, cache) = critic.q_forward(state, proprio, action);
        let residuals: Vec<Array1<T>> = qs.iter().map(|q| q - *y).collect();
        let loss: T = residuals.iter().map(|r| mean(&r.mapv(|v| v * v))).sum();
        out.q_means.push(qs.iter().map(mean).sum::<T>() / T::c(qs.len() as f64));
        out.streams.push(loss);
        out.total += w * loss;
        if let Some(g) = grad.as_deref_mut() {
            let scale = T::c(2.0) * w / batch;
            let d_q: Vec<Array1<T>> = residuals.iter().map(|r| r * scale).collect();
            let (d_state, _) = critic.q_backward(&cache, &d_q, Some(g));
            out.d_states.push(d_state);
        }
    }
    out
}

pub struct ActorLoss<T> {
    pub total: T,
    pub streams: Vec<T>,
    /// Log-probabilities of the sampled actions, per stream.
    pub log_probs: Vec<Array1<T>>,
}

/// `sum_s w_s * mean_b (temperature * log pi(a_s|p_s) - min_h Q_h(q_s, a_s))`
/// with `a_s` sampled from the policy at `policy_states[s]` using `noise`
/// and scored at `q_states[s]`.
///
/// The critic is held fixed: only the policy receives parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<T: Real, P: PolicyNet<T>, Q: QNet<T>>(
    policy: &P,
    critic: &Q,
    policy_states: &[&Merged<T>],
    q_states: &[&Merged<T>],
    proprio: ArrayView2<T>,
    noise: ArrayView2<T>,
    temperature: T,
    weights: &[T],
    mut grad: Option<&mut P>,
) -> ActorLoss<T> {
    assert_eq!(policy_states.len(), weights.len(), "one weight per stream");
    assert_eq!(q_states.len(), weights.len(), "one critic state per stream");
    let b = noise.nrows();
    let batch = T::c(b as f64);
    let mut out = ActorLoss { total: T::zero(), streams: vec![], log_probs: vec![] };
    for ((p_state, q_state), &w) in policy_states.iter().zip(q_states).zip(weights) {
        let pol = policy.policy_forward(p_state, proprio, noise);
        let (qs, q_cache) = critic.q_forward(q_state, proprio, pol.action.view());
        let q_min = min_heads(&qs);
        let per_sample = &pol.log_prob * temperature - &q_min;
        let loss = mean(&per_sample);
        out.streams.push(loss);
        out.total += w * loss;
        if let Some(g) = grad.as_deref_mut() {
            let mut d_q: Vec<Array1<T>> = vec![Array1::zeros(b); qs.len()];
            for i in 0..b {
                let h = (0..qs.len()).find(|&h| qs[h][i] == q_min[i]).expect("minimum is attained");
                d_q[h][i] = -w / batch;
            }
            let (_, d_action) = critic.q_backward(&q_cache, &d_q, None);
            let d_log_prob = Array1::from_elem(b, w * temperature / batch);
            policy.policy_backward(&pol.cache, d_action.view(), d_log_prob.view(), Some(g));
        }
        out.log_probs.push(pol.log_prob);
    }
    out
}

/// `temperature * mean(-log_prob - target_entropy)` and its derivative with
/// respect to the log-temperature. Log-probabilities are treated as constants.
pub fn temperature_loss<T: Real>(log_temperature: T, log_probs: ArrayView1<T>, target_entropy: T) -> (T, T) {
    let temp = log_temperature.exp();
    let gap = log_probs.iter().map(|&l| -l - target_entropy).sum::<T>() / T::c(log_probs.len() as f64);
    let loss = temp * gap;
    (loss, loss)
}
