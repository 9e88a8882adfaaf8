//! TriView Reach: a 2D point mass that must reach a goal, seen by several
//! cameras. Every camera is an invertible transform of the same top-down scene,
//! so each one alone carries the full task state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvError, EnvSpec, Image, Scene, SceneStep};

/// Maximum displacement per simulator step along each axis.
pub const REACH_SPEED: f64 = 0.1;
pub const SUCCESS_RADIUS: f64 = 0.1;
pub const AGENT_RADIUS: f64 = 0.15;
pub const GOAL_RADIUS: f64 = 0.15;
const START_BOUND: f64 = 0.9;
const MIN_START_DISTANCE: f64 = 0.3;
const ARENA_LEVEL: f32 = 0.3;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReachVariant {
    /// Up to five informative color views.
    Standard,
    /// Three views; only the first sees the scene.
    Occluded,
    /// One color view and one depth-like view of the same camera.
    Rgbd,
}

/// World-to-image mapping of one camera.
///
/// World coordinates are first rotated by `quarter_turns` x 90° (counter
/// clockwise) and optionally mirrored in x, then mapped to normalized image
/// coordinates `u = center.0 + scale * x`, `v = center.1 - scale * y` (both as
/// fractions of the image width/height). Color channels of the rendered image
/// are `[agent, goal, arena]` permuted by `channel_perm`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub quarter_turns: u8,
    pub mirror: bool,
    pub scale: f64,
    pub center: (f64, f64),
    pub channel_perm: [usize; 3],
}

impl ViewTransform {
    /// The built-in camera rig; views beyond the third exist for scaling tests.
    pub const RIG: [ViewTransform; 5] = [
        ViewTransform { quarter_turns: 0, mirror: false, scale: 0.42, center: (0.5, 0.5), channel_perm: [0, 1, 2] },
        ViewTransform { quarter_turns: 1, mirror: false, scale: 0.42, center: (0.5, 0.5), channel_perm: [1, 0, 2] },
        ViewTransform { quarter_turns: 0, mirror: false, scale: 0.30, center: (0.40, 0.58), channel_perm: [0, 1, 2] },
        ViewTransform { quarter_turns: 3, mirror: false, scale: 0.38, center: (0.52, 0.48), channel_perm: [0, 2, 1] },
        ViewTransform { quarter_turns: 0, mirror: true, scale: 0.34, center: (0.55, 0.45), channel_perm: [2, 1, 0] },
    ];

    fn rotate(&self, p: [f64; 2]) -> [f64; 2] {
        let mut q = p;
        for _ in 0..self.quarter_turns % 4 {
            q = [-q[1], q[0]];
        }
        if self.mirror {
            q[0] = -q[0];
        }
        q
    }

    fn unrotate(&self, p: [f64; 2]) -> [f64; 2] {
        let mut q = p;
        if self.mirror {
            q[0] = -q[0];
        }
        for _ in 0..self.quarter_turns % 4 {
            q = [q[1], -q[0]];
        }
        q
    }

    /// Continuous pixel coordinates `(x, y)` of a world point.
    pub fn world_to_pixel(&self, p: [f64; 2], height: usize, width: usize) -> (f64, f64) {
        let q = self.rotate(p);
        (
            (self.center.0 + self.scale * q[0]) * width as f64,
            (self.center.1 - self.scale * q[1]) * height as f64,
        )
    }

    pub fn pixel_to_world(&self, px: (f64, f64), height: usize, width: usize) -> [f64; 2] {
        let q = [
            (px.0 / width as f64 - self.center.0) / self.scale,
            (self.center.1 - px.1 / height as f64) / self.scale,
        ];
        self.unrotate(q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ViewKind {
    Color(ViewTransform),
    Depth(ViewTransform),
    Blank(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachOptions {
    pub variant: ReachVariant,
    pub n_views: usize,
    pub render_hw: Vec<[usize; 2]>,
    pub episode_length: usize,
    pub success_radius: f64,
    /// Forces `(agent, goal)` at every reset instead of sampling them.
    pub fixed_start: Option<([f64; 2], [f64; 2])>,
}

impl ReachOptions {
    pub fn new(variant: ReachVariant, n_views: usize) -> Result<Self, EnvError> {
        let ok = match variant {
            ReachVariant::Standard => (1..=ViewTransform::RIG.len()).contains(&n_views),
            ReachVariant::Occluded => n_views == 3,
            ReachVariant::Rgbd => n_views == 2,
        };
        if !ok {
            return Err(EnvError::InvalidOptions(format!(
                "{variant:?} reach does not support n_views = {n_views}"
            )));
        }
        Ok(Self {
            variant,
            n_views,
            render_hw: vec![[32, 32]; n_views],
            episode_length: 50,
            success_radius: SUCCESS_RADIUS,
            fixed_start: None,
        })
    }
}

pub struct ReachScene {
    options: ReachOptions,
    views: Vec<ViewKind>,
    agent: [f64; 2],
    goal: [f64; 2],
    velocity: [f64; 2],
}

impl ReachScene {
    pub fn new(options: ReachOptions) -> Result<Self, EnvError> {
        if options.render_hw.len() != options.n_views {
            return Err(EnvError::InvalidOptions("one render size per view required".into()));
        }
        if options.render_hw.iter().any(|[h, w]| *h == 0 || *w == 0) {
            return Err(EnvError::InvalidOptions("render sizes must be positive".into()));
        }
        let rig = ViewTransform::RIG;
        let views = match options.variant {
            ReachVariant::Standard => rig[..options.n_views].iter().map(|t| ViewKind::Color(*t)).collect(),
            ReachVariant::Occluded => vec![ViewKind::Color(rig[0]), ViewKind::Blank(1), ViewKind::Blank(2)],
            ReachVariant::Rgbd => vec![ViewKind::Color(rig[0]), ViewKind::Depth(rig[0])],
        };
        Ok(Self { options, views, agent: [0.0; 2], goal: [0.5; 2], velocity: [0.0; 2] })
    }

    pub fn agent(&self) -> [f64; 2] {
        self.agent
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn set_state(&mut self, agent: [f64; 2], goal: [f64; 2]) {
        self.agent = agent;
        self.goal = goal;
        self.velocity = [0.0; 2];
    }

    pub fn distance(&self) -> f64 {
        dist(self.agent, self.goal)
    }

    /// Camera transform of view `i`, if that view is an informative one.
    pub fn view_transform(&self, i: usize) -> Option<ViewTransform> {
        match self.views[i] {
            ViewKind::Color(t) | ViewKind::Depth(t) => Some(t),
            ViewKind::Blank(_) => None,
        }
    }

    pub fn is_depth_view(&self, i: usize) -> bool {
        matches!(self.views[i], ViewKind::Depth(_))
    }

    fn shaped_reward(&self) -> (f64, bool) {
        let d = self.distance();
        let success = d < self.options.success_radius;
        (-d + if success { 1.0 } else { 0.0 }, success)
    }

    fn render_view(&self, kind: ViewKind, [h, w]: [usize; 2]) -> Image {
        match kind {
            ViewKind::Color(t) => {
                let layers = self.layers(&t, h, w);
                let mut data = vec![0.0; 3 * h * w];
                for (src, dst) in t.channel_perm.iter().enumerate() {
                    data[dst * h * w..(dst + 1) * h * w].copy_from_slice(&layers[src]);
                }
                Image { channels: 3, height: h, width: w, data }
            }
            ViewKind::Depth(t) => {
                let layers = self.layers(&t, h, w);
                let plane: Vec<f32> = (0..h * w)
                    .map(|i| {
                        let arena = layers[2][i] / ARENA_LEVEL * 0.2;
                        arena.max(0.6 * layers[1][i]).max(layers[0][i])
                    })
                    .collect();
                let mut data = Vec::with_capacity(3 * h * w);
                for _ in 0..3 {
                    data.extend_from_slice(&plane);
                }
                Image { channels: 3, height: h, width: w, data }
            }
            ViewKind::Blank(salt) => {
                let data = (0..3 * h * w)
                    .map(|i| {
                        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                        let v = (x * 7 + y * 13 + c * 5 + salt as usize * 3) % 17;
                        v as f32 / 17.0 * 0.8
                    })
                    .collect();
                Image { channels: 3, height: h, width: w, data }
            }
        }
    }

    /// Coverage planes `[agent, goal, arena]` in image layout.
    fn layers(&self, t: &ViewTransform, h: usize, w: usize) -> [Vec<f32>; 3] {
        let agent = disc_coverage(t, self.agent, AGENT_RADIUS, h, w);
        let goal = disc_coverage(t, self.goal, GOAL_RADIUS, h, w);
        let arena = arena_coverage(t, h, w);
        [agent, goal, arena]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn disc_coverage(t: &ViewTransform, center: [f64; 2], radius: f64, h: usize, w: usize) -> Vec<f32> {
    let mut plane = vec![0.0f32; h * w];
    let (cx, cy) = t.world_to_pixel(center, h, w);
    let (rx, ry) = (radius * t.scale * w as f64, radius * t.scale * h as f64);
    let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
    let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + rx + 1.0).ceil().max(0.0) as usize).min(w);
    let y1 = ((cy + ry + 1.0).ceil().max(0.0) as usize).min(h);
    let n = SUPERSAMPLE as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) / n;
                    let py = y as f64 + (sy as f64 + 0.5) / n;
                    let dx = (px - cx) / rx;
                    let dy = (py - cy) / ry;
                    if dx * dx + dy * dy < 1.0 {
                        hits += 1;
                    }
                }
            }
            plane[y * w + x] = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    plane
}

fn arena_coverage(t: &ViewTransform, h: usize, w: usize) -> Vec<f32> {
    // 90° rotations keep the arena axis-aligned in the image.
    let (ax, ay) = t.world_to_pixel([-1.0, -1.0], h, w);
    let (bx, by) = t.world_to_pixel([1.0, 1.0], h, w);
    let (xl, xr) = (ax.min(bx), ax.max(bx));
    let (yt, yb) = (ay.min(by), ay.max(by));
    let overlap = |lo: f64, hi: f64, p: usize| ((p as f64 + 1.0).min(hi) - (p as f64).max(lo)).max(0.0);
    let mut plane = vec![0.0f32; h * w];
    for y in 0..h {
        let oy = overlap(yt, yb, y);
        if oy == 0.0 {
            continue;
        }
        for x in 0..w {
            plane[y * w + x] = (oy * overlap(xl, xr, x)) as f32 * ARENA_LEVEL;
        }
    }
    plane
}

impl Scene for ReachScene {
    fn spec(&self) -> EnvSpec {
        let descriptions = self
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                ViewKind::Color(t) => format!(
                    "view {}: color camera, {} quarter turns{}, scale {:.2}",
                    i + 1,
                    t.quarter_turns,
                    if t.mirror { ", mirrored" } else { "" },
                    t.scale
                ),
                ViewKind::Depth(_) => format!("view {}: depth-coded camera", i + 1),
                ViewKind::Blank(_) => format!("view {}: occluded (fixed texture)", i + 1),
            })
            .collect();
        EnvSpec {
            action_dim: 2,
            proprio_dim: 2,
            episode_length: self.options.episode_length,
            view_descriptions: descriptions,
        }
    }

    fn reset(&mut self, seed: u64) {
        if let Some((agent, goal)) = self.options.fixed_start {
            self.set_state(agent, goal);
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |rng: &mut ChaCha8Rng| [rng.random_range(-START_BOUND..START_BOUND), rng.random_range(-START_BOUND..START_BOUND)];
        let agent = sample(&mut rng);
        let mut goal = sample(&mut rng);
        while dist(agent, goal) < MIN_START_DISTANCE {
            goal = sample(&mut rng);
        }
        self.set_state(agent, goal);
    }

    fn step(&mut self, action: &[f64]) -> SceneStep {
        let before = self.agent;
        for k in 0..2 {
            self.agent[k] = (self.agent[k] + REACH_SPEED * action[k].clamp(-1.0, 1.0)).clamp(-1.0, 1.0);
            self.velocity[k] = (self.agent[k] - before[k]) / REACH_SPEED;
        }
        let (reward, success) = self.shaped_reward();
        SceneStep { reward, success, terminated: false }
    }

    fn render_views(&self) -> Vec<Image> {
        self.views
            .iter()
            .zip(&self.options.render_hw)
            .map(|(v, hw)| self.render_view(*v, *hw))
            .collect()
    }

    fn proprio(&self) -> Vec<f32> {
        self.velocity.iter().map(|v| *v as f32).collect()
    }
}

/// Standing reward of a state, exposed for oracles.
pub fn reach_reward(agent: [f64; 2], goal: [f64; 2], success_radius: f64) -> f64 {
    let d = dist(agent, goal);
    -d + if d < success_radius { 1.0 } else { 0.0 }
}
