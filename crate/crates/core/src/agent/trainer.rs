//! Environment interaction loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, AgentError, LossReport, ReplayBuffer, Transition, TransitionShape};
use crate::config::{RunConfig, SeedSet};
use crate::envs::{make_env, EnvOptions, MultiViewEnv, MultiViewObservation};
use crate::nn::Real;

/// Progress counters. Environment steps count simulator steps, i.e. agent
/// steps times the action repeat.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainerCounters {
    pub env_step: usize,
    pub agent_step: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub env_step: usize,
    pub episode_return: f64,
    pub success: bool,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub update: Option<LossReport>,
    pub episode: Option<EpisodeSummary>,
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub env: MultiViewEnv,
    pub agent: Agent<T>,
    pub buffer: ReplayBuffer,
    pub counters: TrainerCounters,
    /// Exploration actions.
    pub explore_rng: ChaCha8Rng,
    /// Random shifts and policy noise.
    pub aug_rng: ChaCha8Rng,
    obs: Option<MultiViewObservation>,
    episode_return: f64,
    episode_success: bool,
    episode_length: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: &RunConfig, seeds: &SeedSet) -> Result<Self, AgentError> {
        config.validate().map_err(|e| AgentError::Config(e.to_string()))?;
        let mut env = make_env(&config.env_id, &EnvOptions::from_config(config, seeds.env))?;
        let probe = env.reset(Some(0));
        let spec = env.spec().clone();
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.init);
        let agent = Agent::new(config, &spec, probe.view_shape(), &mut init_rng)?;
        let shape = TransitionShape {
            n_views: probe.n_views(),
            view: probe.view_shape(),
            action_dim: spec.action_dim,
            proprio_dim: spec.proprio_dim,
        };
        let mut explore_rng = ChaCha8Rng::seed_from_u64(seeds.env);
        explore_rng.set_stream(1);
        Ok(Self {
            config: config.clone(),
            env,
            agent,
            buffer: ReplayBuffer::new(config.replay_capacity, shape, seeds.replay),
            counters: TrainerCounters::default(),
            explore_rng,
            aug_rng: ChaCha8Rng::seed_from_u64(seeds.augmentation),
            obs: None,
            episode_return: 0.0,
            episode_success: false,
            episode_length: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.counters.env_step >= self.config.total_env_steps
    }

    fn exploring(&self) -> bool {
        self.counters.env_step < self.config.exploration_steps
    }

    /// One agent step: act, store the transition, and update when due.
    pub fn step(&mut self) -> Result<StepOutcome, AgentError> {
        let obs = match self.obs.take() {
            Some(o) => o,
            None => {
                self.episode_return = 0.0;
                self.episode_success = false;
                self.episode_length = 0;
                self.env.reset(None)
            }
        };
        let action: Vec<f64> = if self.exploring() {
            (0..self.agent.action_dim()).map(|_| self.explore_rng.random_range(-1.0..=1.0)).collect()
        } else {
            self.agent.act_sample(&obs, &mut self.aug_rng)?
        };
        let res = self.env.step(&action)?;
        self.counters.env_step += self.config.action_repeat;
        self.counters.agent_step += 1;
        self.episode_return += res.reward;
        self.episode_success |= res.success;
        self.episode_length += 1;
        let finished = res.terminated || res.truncated;
        self.buffer.push(Transition {
            obs,
            action: action.iter().map(|&a| a as f32).collect(),
            reward: res.reward as f32,
            next_obs: res.observation.clone(),
            done: res.terminated,
        })?;
        let episode = if finished {
            self.counters.episodes += 1;
            Some(EpisodeSummary {
                env_step: self.counters.env_step,
                episode_return: self.episode_return,
                success: self.episode_success,
                length: self.episode_length,
            })
        } else {
            self.obs = Some(res.observation);
            None
        };
        let update = if self.update_due() {
            let batch = self.buffer.sample::<T>(self.config.batch_size, &self.agent.view_ids)?;
            Some(self.agent.update(&batch, &mut self.aug_rng)?.report)
        } else {
            None
        };
        Ok(StepOutcome { update, episode })
    }

    fn update_due(&self) -> bool {
        !self.exploring()
            && self.buffer.len() >= self.config.batch_size
            && self.counters.agent_step.is_multiple_of(self.config.update_frequency)
    }

    /// Drops the in-progress episode so the next step starts a fresh one.
    pub fn abandon_episode(&mut self) {
        self.obs = None;
    }
}
