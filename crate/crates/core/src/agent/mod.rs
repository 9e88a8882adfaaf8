//! Training algorithm: replay memory, stream-weighted losses, the agent
//! update and the environment interaction loop.
//!
//! One update encodes every view of the sampled observations with the shared
//! encoder and builds the training streams of the configured mode:
//!
//! | mode            | streams                   | weights                 | critic targets   | actor scored at |
//! |-----------------|---------------------------|-------------------------|------------------|-----------------|
//! | `mad`           | merged, each view         | `alpha`, `(1-alpha)/n`  | shared (merged)  | merged          |
//! | `merged_only`   | merged                    | 1                       | merged           | merged          |
//! | `singular_only` | each view                 | `1/n`                   | per view         | same view       |
//! | `naive_both`    | merged, each view         | `1/(n+1)`               | per stream       | same stream     |
//! | `single_camera` | the configured view       | 1                       | that view        | that view       |
//!
//! The single-view stream of view `i` is the merge of `{V_i}` alone, which for
//! summation is `V_i` itself.

mod buffer;
pub mod losses;
mod trainer;

pub use buffer::{Batch, ReplayBuffer, Transition, TransitionShape};
pub use trainer::{EpisodeSummary, StepOutcome, Trainer, TrainerCounters};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::config::{MergeStrategy, RunConfig, TrainingMode};
use crate::envs::{EnvError, EnvSpec, MultiViewObservation};
use crate::merge::{MergeCache, MergeError, Merged, Merger};
use crate::networks::{random_shift, soft_update, Actor, ConvSpec, Critic, Encoder, EncoderCache, NetworkError, PolicyNet, Temperature};
use crate::nn::{self, Adam, ParamSet, Real};
use losses::{actor_loss, bootstrap_targets, critic_loss, temperature_loss, ActorLoss};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("invalid view subset: {0}")]
    Subset(String),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Shared encoder, merge module and critic; the target copy has the same
/// layout.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QNetwork<T> {
    pub encoder: Encoder<T>,
    pub merger: Merger<T>,
    pub critic: Critic<T>,
}

impl<T: Real> ParamSet<T> for QNetwork<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.encoder.tensors();
        v.extend(self.merger.tensors());
        v.extend(self.critic.tensors());
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.merger.tensors_mut());
        v.extend(self.critic.tensors_mut());
        v
    }
}

/// Encoder output for a batch: one feature matrix per encoder token.
pub struct Encoded<T> {
    pub features: Vec<Array2<T>>,
    cache: EncoderCache<T>,
}

impl<T: Real> QNetwork<T> {
    /// Encodes views in a single encoder pass. Frame stacking concatenates the
    /// views along channels into one token; otherwise each view is a token.
    pub fn encode(&self, views: &[Array2<T>]) -> Result<Encoded<T>, AgentError> {
        let batch = views.first().map_or(0, |v| v.nrows());
        let input = if self.merger.strategy == MergeStrategy::FrameStack {
            if views.len() != self.merger.n_views {
                return Err(MergeError::SubsetUnsupported(MergeStrategy::FrameStack).into());
            }
            concatenate(Axis(1), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).expect("equal batch sizes")
        } else {
            concatenate(Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).expect("equal view widths")
        };
        self.encoder.check_input(input.view())?;
        let (out, cache) = self.encoder.forward(input.view());
        let tokens = out.nrows() / batch.max(1);
        let features = (0..tokens).map(|k| out.slice(s![k * batch..(k + 1) * batch, ..]).to_owned()).collect();
        Ok(Encoded { features, cache })
    }

    /// Merges the tokens at `subset`.
    pub fn merge(&self, features: &[Array2<T>], subset: &[usize]) -> Result<(Merged<T>, MergeCache<T>), AgentError> {
        let picked: Vec<ArrayView2<T>> = subset.iter().map(|&i| features[i].view()).collect();
        Ok(self.merger.forward(&picked)?)
    }
}

/// A training stream: the merged state or one view's own state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Merged,
    View(usize),
}

impl Stream {
    pub fn label(&self) -> String {
        match self {
            Stream::Merged => "merged".into(),
            Stream::View(i) => format!("view{}", i + 1),
        }
    }
}

/// How a training mode turns encoded views into losses.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPlan {
    pub streams: Vec<Stream>,
    pub weights: Vec<f64>,
    /// One bootstrap target from the merged next state, shared by all streams.
    pub shared_target: bool,
    /// Score every stream's action at the merged state instead of its own.
    pub q_on_merged: bool,
}

impl StreamPlan {
    /// `n_views` counts the views the agent consumes.
    pub fn new(mode: TrainingMode, n_views: usize, alpha: f64) -> Self {
        let views = (0..n_views).map(Stream::View);
        match mode {
            TrainingMode::Mad => Self {
                streams: std::iter::once(Stream::Merged).chain(views).collect(),
                weights: losses::mad_weights(alpha, n_views),
                shared_target: true,
                q_on_merged: true,
            },
            TrainingMode::MergedOnly | TrainingMode::SingleCamera => Self {
                streams: vec![Stream::Merged],
                weights: vec![1.0],
                shared_target: true,
                q_on_merged: true,
            },
            TrainingMode::SingularOnly => Self {
                streams: views.collect(),
                weights: vec![1.0 / n_views as f64; n_views],
                shared_target: false,
                q_on_merged: false,
            },
            TrainingMode::NaiveBoth => Self {
                streams: std::iter::once(Stream::Merged).chain(views).collect(),
                weights: vec![1.0 / (n_views + 1) as f64; n_views + 1],
                shared_target: false,
                q_on_merged: false,
            },
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.streams.iter().map(Stream::label).collect()
    }
}

/// Scalars describing one update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature_loss: f64,
    /// Temperature used by this update (before its own step).
    pub temperature: f64,
    pub q_mean: f64,
    /// `-mean log pi` of the sampled actions on the temperature stream.
    pub entropy: f64,
    pub stream_labels: Vec<String>,
    pub weights: Vec<f64>,
    pub critic_streams: Vec<f64>,
    pub actor_streams: Vec<f64>,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
}

/// An augmented batch plus the policy noise of one update.
pub struct Prepared<T> {
    pub batch: Batch<T>,
    pub obs_offsets: Vec<(i32, i32)>,
    pub next_offsets: Vec<(i32, i32)>,
    pub target_noise: Array2<T>,
    pub actor_noise: Array2<T>,
}

pub struct CriticStep<T> {
    pub total: T,
    pub streams: Vec<T>,
    pub q_mean: T,
    /// Target used by each stream.
    pub targets: Vec<Array1<T>>,
    /// Online states of each stream (values only).
    pub states: Vec<Merged<T>>,
    pub grads: Option<QNetwork<T>>,
}

pub struct ActorStep<T> {
    pub loss: ActorLoss<T>,
    pub grads: Option<Actor<T>>,
}

/// Everything an update produced, for inspection.
pub struct UpdateOutput<T> {
    pub report: LossReport,
    pub targets: Vec<Array1<T>>,
    pub obs_offsets: Vec<(i32, i32)>,
    pub next_offsets: Vec<(i32, i32)>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyper {
    pub discount: f64,
    pub tau: f64,
    pub shift_pad: usize,
    pub target_entropy: f64,
    /// `(channels, H, W)` of one view's frame stack.
    pub view_shape: (usize, usize, usize),
}

pub struct Agent<T> {
    pub mode: TrainingMode,
    pub plan: StreamPlan,
    /// Environment view index (0-based) of each view slot the agent consumes.
    pub view_ids: Vec<usize>,
    pub hyper: Hyper,
    pub online: QNetwork<T>,
    pub target: QNetwork<T>,
    pub actor: Actor<T>,
    pub temperature: Temperature<T>,
    pub critic_opt: Adam<T>,
    pub actor_opt: Adam<T>,
    pub temperature_opt: Adam<T>,
    pub updates: u64,
}

fn gaussian<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::c(rng.sample::<f64, _>(StandardNormal)))
}

impl<T: Real> Agent<T> {
    /// Builds an agent with the encoder preset named in `config`.
    pub fn new<R: Rng + ?Sized>(config: &RunConfig, spec: &EnvSpec, view_shape: (usize, usize, usize), rng: &mut R) -> Result<Self, AgentError> {
        Self::with_conv_specs(config, spec, view_shape, &config.encoder.conv_specs(), rng)
    }

    pub fn with_conv_specs<R: Rng + ?Sized>(
        config: &RunConfig,
        spec: &EnvSpec,
        view_shape: (usize, usize, usize),
        convs: &[ConvSpec],
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        config.validate().map_err(|e| AgentError::Config(e.to_string()))?;
        if spec.n_views() < config.n_views {
            return Err(AgentError::Config(format!(
                "config asks for {} views but the environment renders {}",
                config.n_views,
                spec.n_views()
            )));
        }
        let view_ids: Vec<usize> = match config.training_mode {
            TrainingMode::SingleCamera => vec![config.camera_view - 1],
            _ => (0..config.n_views).collect(),
        };
        let n = view_ids.len();
        let (c, h, w) = view_shape;
        let encoder_input = if config.merge_strategy == MergeStrategy::FrameStack { (c * n, h, w) } else { view_shape };
        let encoder = Encoder::new(convs, encoder_input, config.feature_dim, rng)?;
        let merger = Merger::new(config.merge_strategy, n, config.feature_dim, config.effective_attention_ff_dim(), rng);
        let state_dim = merger.output_dim(config.feature_dim);
        let critic = Critic::new(state_dim, spec.proprio_dim, spec.action_dim, config.hidden_dim, config.twin_critic, rng);
        let actor = Actor::new(
            state_dim,
            spec.proprio_dim,
            config.hidden_dim,
            spec.action_dim,
            (config.log_std_bounds[0], config.log_std_bounds[1]),
            rng,
        );
        let online = QNetwork { encoder, merger, critic };
        let temperature = Temperature::new(config.init_temperature);
        let lr = config.learning_rate;
        Ok(Self {
            mode: config.training_mode,
            plan: StreamPlan::new(config.training_mode, n, config.mad_alpha),
            view_ids,
            hyper: Hyper {
                discount: config.discount,
                tau: config.tau,
                shift_pad: config.shift_pad,
                target_entropy: -(spec.action_dim as f64),
                view_shape,
            },
            critic_opt: Adam::new(lr, &online),
            actor_opt: Adam::new(lr, &actor),
            temperature_opt: Adam::new(lr, &temperature),
            target: online.clone(),
            online,
            actor,
            temperature,
            updates: 0,
        })
    }

    pub fn n_views(&self) -> usize {
        self.view_ids.len()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.action_dim()
    }

    fn all_tokens(&self) -> Vec<usize> {
        (0..self.online.merger.encoder_tokens()).collect()
    }

    fn stream_subset(&self, stream: Stream) -> Vec<usize> {
        match stream {
            Stream::Merged => self.all_tokens(),
            Stream::View(i) => vec![i],
        }
    }

    /// Applies the random shift to both timesteps and draws the policy noise,
    /// in that order, from `rng`.
    pub fn prepare<R: Rng + ?Sized>(&self, batch: &Batch<T>, rng: &mut R) -> Prepared<T> {
        let pad = self.hyper.shift_pad;
        let obs = random_shift(&batch.obs, self.hyper.view_shape, pad, rng);
        let next = random_shift(&batch.next_obs, self.hyper.view_shape, pad, rng);
        let (b, a) = (batch.len(), self.action_dim());
        let target_noise = gaussian(b, a, rng);
        let actor_noise = gaussian(b, a, rng);
        let first = |o: &Vec<Vec<(i32, i32)>>| o.first().cloned().unwrap_or_default();
        Prepared {
            obs_offsets: first(&obs.offsets),
            next_offsets: first(&next.offsets),
            batch: Batch {
                obs: obs.views,
                next_obs: next.views,
                proprio: batch.proprio.clone(),
                action: batch.action.clone(),
                reward: batch.reward.clone(),
                done: batch.done.clone(),
                next_proprio: batch.next_proprio.clone(),
            },
            target_noise,
            actor_noise,
        }
    }

    /// Bootstrap targets of every stream, computed from the target network
    /// under a gradient stop.
    pub fn critic_targets(&self, prep: &Prepared<T>) -> Result<Vec<Array1<T>>, AgentError> {
        let b = &prep.batch;
        let next = self.target.encode(&b.next_obs)?;
        let temp = self.temperature.value();
        let discount = T::c(self.hyper.discount);
        let target_of = |stream: Stream| -> Result<Array1<T>, AgentError> {
            let (state, _) = self.target.merge(&next.features, &self.stream_subset(stream))?;
            Ok(bootstrap_targets(
                &self.actor,
                &self.target.critic,
                &state,
                b.next_proprio.view(),
                b.reward.view(),
                b.done.view(),
                discount,
                temp,
                prep.target_noise.view(),
            ))
        };
        if self.plan.shared_target {
            let y = target_of(Stream::Merged)?;
            Ok(vec![y; self.plan.streams.len()])
        } else {
            self.plan.streams.iter().map(|&s| target_of(s)).collect()
        }
    }

    /// Critic objective on `prep`; with `with_grad`, the gradient with respect
    /// to the online encoder, merge module and critic.
    pub fn critic_step(&self, prep: &Prepared<T>, with_grad: bool) -> Result<CriticStep<T>, AgentError> {
        let targets = self.critic_targets(prep)?;
        let b = &prep.batch;
        let enc = self.online.encode(&b.obs)?;
        let mut states = Vec::with_capacity(self.plan.streams.len());
        let mut caches = Vec::with_capacity(self.plan.streams.len());
        for &stream in &self.plan.streams {
            let (state, cache) = self.online.merge(&enc.features, &self.stream_subset(stream))?;
            states.push(state);
            caches.push(cache);
        }
        let weights: Vec<T> = self.plan.weights.iter().map(|&w| T::c(w)).collect();
        let state_refs: Vec<&Merged<T>> = states.iter().collect();
        let target_refs: Vec<&Array1<T>> = if self.plan.shared_target {
            vec![&targets[0]; targets.len()]
        } else {
            targets.iter().collect()
        };
        let mut grads = if with_grad {
            let mut g = self.online.clone();
            g.fill_zero();
            Some(g)
        } else {
            None
        };
        let loss = critic_loss(
            &self.online.critic,
            &state_refs,
            b.proprio.view(),
            b.action.view(),
            &target_refs,
            &weights,
            grads.as_mut().map(|g| &mut g.critic),
        );
        if let Some(g) = grads.as_mut() {
            let tokens = enc.features.len();
            let batch = b.len();
            let width = enc.features[0].ncols();
            let mut d_tokens = Array2::<T>::zeros((tokens * batch, width));
            for ((stream, cache), d_state) in self.plan.streams.iter().zip(&caches).zip(&loss.d_states) {
                let parts = self.online.merger.backward(cache, d_state, Some(&mut g.merger));
                for (token, part) in self.stream_subset(*stream).into_iter().zip(parts) {
                    let mut dst = d_tokens.slice_mut(s![token * batch..(token + 1) * batch, ..]);
                    dst += &part;
                }
            }
            self.online.encoder.backward(&enc.cache, d_tokens, &mut g.encoder);
        }
        let q_mean = loss.q_means[0];
        Ok(CriticStep { total: loss.total, streams: loss.streams, q_mean, targets, states, grads })
    }

    /// Critic states each actor stream is scored at.
    pub fn actor_q_states<'a>(&self, states: &'a [Merged<T>]) -> Vec<&'a Merged<T>> {
        if self.plan.q_on_merged {
            vec![&states[0]; states.len()]
        } else {
            states.iter().collect()
        }
    }

    /// Actor objective on fixed (gradient-stopped) stream states.
    pub fn actor_step(&self, states: &[Merged<T>], prep: &Prepared<T>, with_grad: bool) -> ActorStep<T> {
        let weights: Vec<T> = self.plan.weights.iter().map(|&w| T::c(w)).collect();
        let policy_states: Vec<&Merged<T>> = states.iter().collect();
        let q_states = self.actor_q_states(states);
        let mut grads = if with_grad {
            let mut g = self.actor.clone();
            g.fill_zero();
            Some(g)
        } else {
            None
        };
        let loss = actor_loss(
            &self.actor,
            &self.online.critic,
            &policy_states,
            &q_states,
            prep.batch.proprio.view(),
            prep.actor_noise.view(),
            self.temperature.value(),
            &weights,
            grads.as_mut(),
        );
        ActorStep { loss, grads }
    }

    /// Log-probabilities that drive the temperature: the merged stream when
    /// there is one, otherwise all streams pooled.
    fn temperature_log_probs(&self, loss: &ActorLoss<T>) -> Array1<T> {
        if self.plan.streams[0] == Stream::Merged {
            loss.log_probs[0].clone()
        } else {
            let views: Vec<_> = loss.log_probs.iter().map(|l| l.view()).collect();
            concatenate(Axis(0), &views).expect("1-d")
        }
    }

    /// One full update: critic, actor, temperature, then the target EMA.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch<T>, rng: &mut R) -> Result<UpdateOutput<T>, AgentError> {
        let prep = self.prepare(batch, rng);
        self.update_prepared(&prep)
    }

    pub fn update_prepared(&mut self, prep: &Prepared<T>) -> Result<UpdateOutput<T>, AgentError> {
        let temperature = self.temperature.value();
        let critic = self.critic_step(prep, true)?;
        let critic_grads = critic.grads.as_ref().expect("requested");
        self.critic_opt.update(&mut self.online, critic_grads);

        let actor = self.actor_step(&critic.states, prep, true);
        let actor_grads = actor.grads.as_ref().expect("requested");
        self.actor_opt.update(&mut self.actor, actor_grads);

        let log_probs = self.temperature_log_probs(&actor.loss);
        let (temp_loss, d_log_temp) = temperature_loss(self.temperature.log_value[0], log_probs.view(), T::c(self.hyper.target_entropy));
        let temp_grad = Temperature { log_value: Array1::from_elem(1, d_log_temp) };
        self.temperature_opt.update(&mut self.temperature, &temp_grad);

        soft_update(&mut self.target, &self.online, self.hyper.tau)?;
        self.updates += 1;

        let f = |v: T| v.to_f64().expect("finite cast");
        let report = LossReport {
            critic_loss: f(critic.total),
            actor_loss: f(actor.loss.total),
            temperature_loss: f(temp_loss),
            temperature: f(temperature),
            q_mean: f(critic.q_mean),
            entropy: -f(log_probs.sum()) / log_probs.len() as f64,
            stream_labels: self.plan.labels(),
            weights: self.plan.weights.clone(),
            critic_streams: critic.streams.iter().map(|&v| f(v)).collect(),
            actor_streams: actor.loss.streams.iter().map(|&v| f(v)).collect(),
            critic_grad_norm: f(nn::sq_norm(critic_grads)).sqrt(),
            actor_grad_norm: f(nn::sq_norm(actor_grads)).sqrt(),
        };
        Ok(UpdateOutput { report, targets: critic.targets, obs_offsets: prep.obs_offsets.clone(), next_offsets: prep.next_offsets.clone() })
    }

    /// Maps 1-based environment view numbers to the agent's view slots.
    pub fn slots_for_env_views(&self, env_views: &[usize]) -> Result<Vec<usize>, AgentError> {
        env_views
            .iter()
            .map(|&v| {
                self.view_ids
                    .iter()
                    .position(|&id| id + 1 == v)
                    .ok_or_else(|| AgentError::Subset(format!("view {v} is not an input of this agent (inputs: {:?})", self.env_views())))
            })
            .collect()
    }

    /// 1-based environment view numbers the agent consumes.
    pub fn env_views(&self) -> Vec<usize> {
        self.view_ids.iter().map(|v| v + 1).collect()
    }

    /// Actor state for one observation using the view slots in `subset`.
    pub fn observe(&self, obs: &MultiViewObservation, subset: &[usize]) -> Result<(Merged<T>, Array2<T>), AgentError> {
        if subset.is_empty() {
            return Err(AgentError::Subset("empty view subset".into()));
        }
        if subset.len() < self.n_views() && !self.online.merger.strategy.supports_view_subsets() {
            return Err(MergeError::SubsetUnsupported(self.online.merger.strategy).into());
        }
        let mut views = Vec::with_capacity(subset.len());
        for &slot in subset {
            let id = *self
                .view_ids
                .get(slot)
                .ok_or_else(|| AgentError::Subset(format!("view slot {slot} out of range")))?;
            let stack = obs
                .views
                .get(id)
                .ok_or_else(|| AgentError::Shape(format!("observation has no view {}", id + 1)))?;
            let data: Vec<T> = stack.to_tensor().into_iter().map(|v| T::c(v as f64)).collect();
            views.push(Array2::from_shape_vec((1, data.len()), data).expect("row"));
        }
        let enc = self.online.encode(&views)?;
        let tokens: Vec<usize> = (0..enc.features.len()).collect();
        let (state, _) = self.online.merge(&enc.features, &tokens)?;
        let proprio = Array2::from_shape_fn((1, obs.proprio.len()), |(_, j)| T::c(obs.proprio[j] as f64));
        Ok((state, proprio))
    }

    /// Mean action when `noise` is `None`, otherwise a reparameterized sample.
    pub fn act(&self, obs: &MultiViewObservation, subset: Option<&[usize]>, noise: Option<&[f64]>) -> Result<Vec<f64>, AgentError> {
        let all: Vec<usize> = (0..self.n_views()).collect();
        let (state, proprio) = self.observe(obs, subset.unwrap_or(&all))?;
        let a = self.action_dim();
        let noise = match noise {
            Some(n) => Array2::from_shape_fn((1, a), |(_, j)| T::c(n[j])),
            None => Array2::zeros((1, a)),
        };
        let out = self.actor.policy_forward(&state, proprio.view(), noise.view());
        Ok(out.action.row(0).iter().map(|v| v.to_f64().expect("finite")).collect())
    }

    /// Samples an exploration action with noise drawn from `rng`.
    pub fn act_sample<R: Rng + ?Sized>(&self, obs: &MultiViewObservation, rng: &mut R) -> Result<Vec<f64>, AgentError> {
        let noise: Vec<f64> = (0..self.action_dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.act(obs, None, Some(&noise))
    }

    /// All learnable parameters, followed by optimizer moments, in a fixed
    /// order.
    pub fn state_tensors(&self) -> Vec<&[T]> {
        let mut v = self.online.tensors();
        v.extend(self.target.tensors());
        v.extend(self.actor.tensors());
        v.extend(self.temperature.tensors());
        v.extend(self.critic_opt.buffers());
        v.extend(self.actor_opt.buffers());
        v.extend(self.temperature_opt.buffers());
        v
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.online.tensors_mut();
        v.extend(self.target.tensors_mut());
        v.extend(self.actor.tensors_mut());
        v.extend(self.temperature.tensors_mut());
        v.extend(self.critic_opt.buffers_mut());
        v.extend(self.actor_opt.buffers_mut());
        v.extend(self.temperature_opt.buffers_mut());
        v
    }

    /// Parameters used for acting: online encoder, merge module and actor.
    pub fn policy_fingerprint(&self) -> Vec<T> {
        let mut v = self.online.flatten();
        v.extend(self.actor.flatten());
        v
    }
}
