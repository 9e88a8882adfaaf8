//! Multi-view environments.
//!
//! Third-party simulators plug in by implementing [`Scene`]: a single-frame,
//! multi-camera environment with its own seeded reset. [`MultiViewEnv`] wraps a
//! scene with the agent-facing conventions: action clipping, action repeat,
//! the time limit, resizing every view to one resolution, 8-bit quantization
//! and per-view frame stacks.

mod reach;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use reach::{ReachOptions, ReachScene, ReachVariant, ViewTransform, reach_reward, REACH_SPEED, SUCCESS_RADIUS};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("unknown environment id `{0}` (known: triview-reach, triview-reach-occluded, triview-reach-rgbd)")]
    UnknownEnv(String),
    #[error("step called on a finished episode; call reset first")]
    EpisodeOver,
    #[error("step called before reset")]
    NotReset,
    #[error("action has {got} components, environment expects {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid environment options: {0}")]
    InvalidOptions(String),
}

/// Float image in CHW layout with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, EnvError> {
        let img = Self { channels, height, width, data };
        img.check()?;
        Ok(img)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    fn check(&self) -> Result<(), EnvError> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(EnvError::InvalidImage(format!(
                "non-positive dimensions {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if self.data.len() != self.channels * self.height * self.width {
            return Err(EnvError::InvalidImage(format!(
                "buffer of {} values does not match {}x{}x{}",
                self.data.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// One 8-bit CHW frame as stored in frame stacks and the replay buffer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn quantize(img: &Image) -> Self {
        Self {
            channels: img.channels,
            height: img.height,
            width: img.width,
            data: img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// The `frame_stack` most recent frames of one view, oldest first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewStack {
    pub frames: Vec<Arc<Frame>>,
}

impl ViewStack {
    fn filled(frame: Arc<Frame>, depth: usize) -> Self {
        Self { frames: vec![frame; depth] }
    }

    fn pushed(&self, frame: Arc<Frame>) -> Self {
        let mut frames: Vec<Arc<Frame>> = self.frames[1..].to_vec();
        frames.push(frame);
        Self { frames }
    }

    /// `(frame_stack * channels, H, W)` shape.
    pub fn shape(&self) -> (usize, usize, usize) {
        let f = &self.frames[0];
        (self.frames.len() * f.channels, f.height, f.width)
    }

    /// Normalized CHW tensor of the whole stack, written into `out`.
    pub fn write_normalized(&self, out: &mut [f32]) {
        let mut offset = 0;
        for f in &self.frames {
            for (o, v) in out[offset..offset + f.len()].iter_mut().zip(&f.data) {
                *o = *v as f32 / 255.0;
            }
            offset += f.len();
        }
    }

    pub fn to_tensor(&self) -> Vec<f32> {
        let (c, h, w) = self.shape();
        let mut out = vec![0.0; c * h * w];
        self.write_normalized(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewObservation {
    pub views: Vec<ViewStack>,
    pub proprio: Vec<f32>,
    pub t: usize,
}

impl MultiViewObservation {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_shape(&self) -> (usize, usize, usize) {
        self.views[0].shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: MultiViewObservation,
    pub reward: f64,
    pub success: bool,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSpec {
    pub action_dim: usize,
    pub proprio_dim: usize,
    /// Simulator steps per episode (before action repeat is applied).
    pub episode_length: usize,
    pub view_descriptions: Vec<String>,
}

impl EnvSpec {
    pub fn n_views(&self) -> usize {
        self.view_descriptions.len()
    }
}

/// Single-frame outcome of one simulator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneStep {
    pub reward: f64,
    pub success: bool,
    pub terminated: bool,
}

/// Interface a simulator implements to be driven by [`MultiViewEnv`].
///
/// Actions are in `[-1, 1]^action_dim`. `render_views` may return images of
/// different resolutions per view; they are resized by the wrapper.
pub trait Scene: Send {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64);
    fn step(&mut self, action: &[f64]) -> SceneStep;
    fn render_views(&self) -> Vec<Image>;
    fn proprio(&self) -> Vec<f32>;
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, target_hw: [usize; 2]) -> Result<Image, EnvError> {
    img.check()?;
    let [th, tw] = target_hw;
    if th == 0 || tw == 0 {
        return Err(EnvError::InvalidImage("target size must be positive".into()));
    }
    if (img.height, img.width) == (th, tw) {
        return Ok(img.clone());
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(th, img.height);
    let xs = axis(tw, img.width);
    let mut data = Vec::with_capacity(img.channels * th * tw);
    for c in 0..img.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = lerp(img.at(c, y0, x0), img.at(c, y0, x1), fx);
                let bottom = lerp(img.at(c, y1, x0), img.at(c, y1, x1), fx);
                data.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image { channels: img.channels, height: th, width: tw, data })
}

// a + t(b - a) reproduces constants exactly.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Resizes every view to `target_hw`.
pub fn preprocess(views: &[Image], target_hw: [usize; 2]) -> Result<Vec<Image>, EnvError> {
    views.iter().map(|v| resize_bilinear(v, target_hw)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvOptions {
    pub image_hw: [usize; 2],
    pub frame_stack: usize,
    pub action_repeat: usize,
    pub n_views: usize,
    pub episode_length: Option<usize>,
    /// Native per-view render resolutions; `None` renders at `image_hw`.
    pub render_hw: Option<Vec<[usize; 2]>>,
    /// Seed of the stream that supplies episode seeds when `reset(None)` is used.
    pub seed: u64,
}

impl Default for EnvOptions {
    fn default() -> Self {
        Self {
            image_hw: [32, 32],
            frame_stack: 3,
            action_repeat: 1,
            n_views: 3,
            episode_length: None,
            render_hw: None,
            seed: 0,
        }
    }
}

impl EnvOptions {
    pub fn from_config(config: &crate::config::RunConfig, seed: u64) -> Self {
        Self {
            image_hw: config.image_hw,
            frame_stack: config.frame_stack,
            action_repeat: config.action_repeat,
            n_views: config.n_views,
            episode_length: config.episode_length,
            render_hw: None,
            seed,
        }
    }
}

pub const ENV_IDS: [&str; 3] = ["triview-reach", "triview-reach-occluded", "triview-reach-rgbd"];

/// Builds a registered environment.
pub fn make_env(id: &str, options: &EnvOptions) -> Result<MultiViewEnv, EnvError> {
    let variant = match id {
        "triview-reach" => ReachVariant::Standard,
        "triview-reach-occluded" => ReachVariant::Occluded,
        "triview-reach-rgbd" => ReachVariant::Rgbd,
        other => return Err(EnvError::UnknownEnv(other.to_string())),
    };
    let mut reach = ReachOptions::new(variant, options.n_views)?;
    reach.render_hw = match &options.render_hw {
        Some(r) => r.clone(),
        None => vec![options.image_hw; options.n_views],
    };
    if let Some(len) = options.episode_length {
        reach.episode_length = len;
    }
    let scene = ReachScene::new(reach)?;
    MultiViewEnv::new(Box::new(scene), options)
}

/// Agent-facing environment: frame stacks, action repeat and time limit.
pub struct MultiViewEnv {
    scene: Box<dyn Scene>,
    spec: EnvSpec,
    image_hw: [usize; 2],
    frame_stack: usize,
    action_repeat: usize,
    seed_stream: ChaCha8Rng,
    stacks: Option<Vec<ViewStack>>,
    elapsed: usize,
    t: usize,
    finished: bool,
}

impl MultiViewEnv {
    pub fn new(scene: Box<dyn Scene>, options: &EnvOptions) -> Result<Self, EnvError> {
        if options.frame_stack == 0 || options.action_repeat == 0 {
            return Err(EnvError::InvalidOptions("frame_stack and action_repeat must be ≥ 1".into()));
        }
        let mut spec = scene.spec();
        if let Some(len) = options.episode_length {
            spec.episode_length = len;
        }
        Ok(Self {
            scene,
            spec,
            image_hw: options.image_hw,
            frame_stack: options.frame_stack,
            action_repeat: options.action_repeat,
            seed_stream: ChaCha8Rng::seed_from_u64(options.seed),
            stacks: None,
            elapsed: 0,
            t: 0,
            finished: false,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn frame_stack(&self) -> usize {
        self.frame_stack
    }

    pub fn action_repeat(&self) -> usize {
        self.action_repeat
    }

    pub fn image_hw(&self) -> [usize; 2] {
        self.image_hw
    }

    pub fn scene(&self) -> &dyn Scene {
        self.scene.as_ref()
    }

    /// Stream that supplies episode seeds for `reset(None)`.
    pub fn seed_stream(&self) -> &ChaCha8Rng {
        &self.seed_stream
    }

    pub fn set_seed_stream(&mut self, rng: ChaCha8Rng) {
        self.seed_stream = rng;
    }

    fn render_frames(&self) -> Vec<Arc<Frame>> {
        let views = preprocess(&self.scene.render_views(), self.image_hw).expect("scene renders valid images");
        views.iter().map(|v| Arc::new(Frame::quantize(v))).collect()
    }

    fn observation(&self) -> MultiViewObservation {
        MultiViewObservation {
            views: self.stacks.clone().expect("reset before observing"),
            proprio: self.scene.proprio(),
            t: self.t,
        }
    }

    pub fn reset(&mut self, seed: Option<u64>) -> MultiViewObservation {
        let seed = seed.unwrap_or_else(|| self.seed_stream.random());
        self.scene.reset(seed);
        let frames = self.render_frames();
        self.stacks = Some(frames.into_iter().map(|f| ViewStack::filled(f, self.frame_stack)).collect());
        self.elapsed = 0;
        self.t = 0;
        self.finished = false;
        self.observation()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.stacks.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.finished {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != self.spec.action_dim {
            return Err(EnvError::ActionDim { expected: self.spec.action_dim, got: action.len() });
        }
        let clipped: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
        let mut reward = 0.0;
        let mut success = false;
        let mut terminated = false;
        for _ in 0..self.action_repeat {
            let s = self.scene.step(&clipped);
            self.elapsed += 1;
            reward += s.reward;
            success |= s.success;
            if s.terminated {
                terminated = true;
                break;
            }
            if self.elapsed >= self.spec.episode_length {
                break;
            }
        }
        let truncated = !terminated && self.elapsed >= self.spec.episode_length;
        let frames = self.render_frames();
        let stacks = self.stacks.as_ref().expect("checked above");
        self.stacks = Some(stacks.iter().zip(frames).map(|(s, f)| s.pushed(f)).collect());
        self.t += 1;
        self.finished = terminated || truncated;
        Ok(StepResult { observation: self.observation(), reward, success, terminated, truncated })
    }
}
