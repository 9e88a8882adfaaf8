//! Bounded FIFO replay memory.
//!
//! Observations are kept as shared `u8` frames, so consecutive transitions of
//! one episode reuse the same frame storage. Augmentation happens when a batch
//! is assembled, never on stored data.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AgentError;
use crate::envs::{MultiViewObservation, ViewStack};
use crate::nn::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: MultiViewObservation,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_obs: MultiViewObservation,
    /// Termination only; time-limit truncation is not stored as done.
    pub done: bool,
}

/// Expected shapes of stored transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionShape {
    pub n_views: usize,
    /// `(frame_stack * channels, H, W)`
    pub view: (usize, usize, usize),
    pub action_dim: usize,
    pub proprio_dim: usize,
}

impl TransitionShape {
    fn check_obs(&self, obs: &MultiViewObservation, what: &str) -> Result<(), AgentError> {
        if obs.views.len() != self.n_views {
            return Err(AgentError::Shape(format!("{what}: {} views, expected {}", obs.views.len(), self.n_views)));
        }
        for (i, v) in obs.views.iter().enumerate() {
            if v.shape() != self.view {
                return Err(AgentError::Shape(format!("{what}: view {} has shape {:?}, expected {:?}", i + 1, v.shape(), self.view)));
            }
        }
        if obs.proprio.len() != self.proprio_dim {
            return Err(AgentError::Shape(format!(
                "{what}: proprio length {}, expected {}",
                obs.proprio.len(),
                self.proprio_dim
            )));
        }
        Ok(())
    }

    pub fn check(&self, t: &Transition) -> Result<(), AgentError> {
        self.check_obs(&t.obs, "obs")?;
        self.check_obs(&t.next_obs, "next_obs")?;
        if t.action.len() != self.action_dim {
            return Err(AgentError::Shape(format!("action length {}, expected {}", t.action.len(), self.action_dim)));
        }
        Ok(())
    }
}

/// A training batch for the views an agent consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// One `(batch, C*H*W)` matrix per view.
    pub obs: Vec<Array2<T>>,
    pub proprio: Array2<T>,
    pub action: Array2<T>,
    pub reward: Array1<T>,
    /// 1 for terminal transitions.
    pub done: Array1<T>,
    pub next_obs: Vec<Array2<T>>,
    pub next_proprio: Array2<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.action.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Assembles a batch from transitions, keeping only the views in `view_ids`.
    pub fn from_transitions(items: &[&Transition], view_ids: &[usize]) -> Self {
        let b = items.len();
        let table: [T; 256] = std::array::from_fn(|v| T::c(v as f64 / 255.0));
        let stack_rows = |pick: &dyn Fn(&Transition) -> &ViewStack| -> Array2<T> {
            let (c, h, w) = pick(items[0]).shape();
            let mut data = Vec::with_capacity(b * c * h * w);
            for t in items {
                for f in &pick(t).frames {
                    data.extend(f.data.iter().map(|&v| table[v as usize]));
                }
            }
            Array2::from_shape_vec((b, c * h * w), data).expect("uniform view shapes")
        };
        let obs = view_ids.iter().map(|&v| stack_rows(&|t: &Transition| &t.obs.views[v])).collect();
        let next_obs = view_ids.iter().map(|&v| stack_rows(&|t: &Transition| &t.next_obs.views[v])).collect();
        let rows = |f: &dyn Fn(&Transition) -> &[f32]| -> Array2<T> {
            let width = f(items[0]).len();
            Array2::from_shape_fn((b, width), |(i, j)| T::c(f(items[i])[j] as f64))
        };
        Self {
            obs,
            proprio: rows(&|t| &t.obs.proprio),
            action: rows(&|t| &t.action),
            reward: items.iter().map(|t| T::c(t.reward as f64)).collect(),
            done: items.iter().map(|t| if t.done { T::one() } else { T::zero() }).collect(),
            next_obs,
            next_proprio: rows(&|t| &t.next_obs.proprio),
        }
    }
}

pub struct ReplayBuffer {
    capacity: usize,
    shape: TransitionShape,
    items: VecDeque<Transition>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, shape: TransitionShape, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            shape,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn shape(&self) -> TransitionShape {
        self.shape
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    pub fn push(&mut self, t: Transition) -> Result<(), AgentError> {
        self.shape.check(&t)?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    /// `batch` independent uniform indices from the sampling stream.
    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>, AgentError> {
        if self.items.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        let n = self.items.len();
        Ok((0..batch).map(|_| self.rng.random_range(0..n)).collect())
    }

    pub fn sample<T: Real>(&mut self, batch: usize, view_ids: &[usize]) -> Result<Batch<T>, AgentError> {
        let idx = self.sample_indices(batch)?;
        let items: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        Ok(Batch::from_transitions(&items, view_ids))
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }
}
