//! Run configuration, seeding and run manifests.
//!
//! Configs are TOML files. Any field left out takes its default; the defaults
//! are the standard hyper-parameters of the method (DrQ backbone, MAD alpha 0.8).
//! Overrides given on the command line are applied after the file is read and
//! the whole result is validated at once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration error at key `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("validation error: {0}")]
    Invalid(String),
}

/// How per-view features are fused before reaching the actor and critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    Sum,
    Concat,
    FrameStack,
    Attention,
    VitLayer,
    QMean,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 6] = [
        MergeStrategy::Sum,
        MergeStrategy::Concat,
        MergeStrategy::FrameStack,
        MergeStrategy::Attention,
        MergeStrategy::VitLayer,
        MergeStrategy::QMean,
    ];

    /// True when a merged representation and a single view's representation
    /// have the same width, so one actor/critic can consume either.
    pub fn is_dimension_compatible(self) -> bool {
        matches!(
            self,
            MergeStrategy::Sum | MergeStrategy::Attention | MergeStrategy::VitLayer
        )
    }

    /// True when the strategy can fuse an arbitrary non-empty subset of views.
    pub fn supports_view_subsets(self) -> bool {
        self.is_dimension_compatible() || self == MergeStrategy::QMean
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Sum => "sum",
            MergeStrategy::Concat => "concat",
            MergeStrategy::FrameStack => "frame_stack",
            MergeStrategy::Attention => "attention",
            MergeStrategy::VitLayer => "vit_layer",
            MergeStrategy::QMean => "q_mean",
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Mad,
    MergedOnly,
    SingularOnly,
    NaiveBoth,
    SingleCamera,
}

impl TrainingMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainingMode::Mad => "mad",
            TrainingMode::MergedOnly => "merged_only",
            TrainingMode::SingularOnly => "singular_only",
            TrainingMode::NaiveBoth => "naive_both",
            TrainingMode::SingleCamera => "single_camera",
        }
    }

    /// Modes that feed singular-view features to the same actor/critic as the
    /// merged features.
    pub fn uses_singular_streams(self) -> bool {
        matches!(
            self,
            TrainingMode::Mad | TrainingMode::SingularOnly | TrainingMode::NaiveBoth
        )
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convolutional trunk layout of the shared view encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderArch {
    /// Three conv layers (32 8x8/4, 64 4x4/2, 64 3x3/1), sized for 84x84 inputs.
    Dqn,
    /// Two small conv layers for 32x32 inputs.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env_id: String,
    pub n_views: usize,
    pub image_hw: [usize; 2],
    pub frame_stack: usize,
    pub action_repeat: usize,
    /// Overrides the environment's own episode length when set.
    pub episode_length: Option<usize>,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub update_frequency: usize,
    pub tau: f64,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub encoder: EncoderArch,
    pub log_std_bounds: [f64; 2],
    pub init_temperature: f64,
    pub mad_alpha: f64,
    pub discount: f64,
    pub exploration_steps: usize,
    pub total_env_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub merge_strategy: MergeStrategy,
    pub training_mode: TrainingMode,
    pub shift_pad: usize,
    /// Two Q heads with min-aggregated targets; `false` keeps a single head.
    pub twin_critic: bool,
    /// 1-based view index used by `single_camera`.
    pub camera_view: usize,
    /// Feed-forward width of the attention merge block; 0 means 2 x feature_dim.
    pub attention_ff_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env_id: "triview-reach".to_string(),
            n_views: 3,
            image_hw: [84, 84],
            frame_stack: 3,
            action_repeat: 1,
            episode_length: None,
            replay_capacity: 500_000,
            batch_size: 256,
            learning_rate: 5e-4,
            update_frequency: 2,
            tau: 0.01,
            feature_dim: 50,
            hidden_dim: 1024,
            encoder: EncoderArch::Dqn,
            log_std_bounds: [-10.0, 2.0],
            init_temperature: 0.1,
            mad_alpha: 0.8,
            discount: 0.99,
            exploration_steps: 2000,
            total_env_steps: 1_000_000,
            eval_every: 25_000,
            eval_episodes: 20,
            merge_strategy: MergeStrategy::Sum,
            training_mode: TrainingMode::Mad,
            shift_pad: 4,
            twin_critic: true,
            camera_view: 1,
            attention_ff_dim: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        if self.seed > i64::MAX as u64 {
            return fail("seed must be ≤ 2^63 - 1 (TOML integer range)");
        }
        if !(0.0..=1.0).contains(&self.mad_alpha) {
            return fail("mad_alpha ∉ [0,1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau ∉ (0,1]");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return fail("discount ∉ (0,1]");
        }
        if self.replay_capacity < self.batch_size {
            return fail("replay_capacity < batch_size");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1");
        }
        if self.frame_stack < 1 {
            return fail("frame_stack must be ≥ 1");
        }
        if self.n_views < 1 {
            return fail("n_views must be ≥ 1");
        }
        if self.log_std_bounds[0] >= self.log_std_bounds[1] {
            return fail("log_std_bounds.low must be < log_std_bounds.high");
        }
        if self.image_hw[0] == 0 || self.image_hw[1] == 0 {
            return fail("image_hw must be positive");
        }
        if self.action_repeat < 1 || self.update_frequency < 1 {
            return fail("action_repeat and update_frequency must be ≥ 1");
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return fail("feature_dim and hidden_dim must be ≥ 1");
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return fail("learning_rate must be > 0");
        }
        if self.init_temperature.is_nan() || self.init_temperature <= 0.0 {
            return fail("init_temperature must be > 0");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return fail("eval_every and eval_episodes must be ≥ 1");
        }
        if !self.eval_every.is_multiple_of(self.action_repeat) {
            return fail("eval_every must be a multiple of action_repeat");
        }
        if self.camera_view < 1 || self.camera_view > self.n_views {
            return fail("camera_view ∉ [1, n_views]");
        }
        if self.training_mode.uses_singular_streams()
            && !self.merge_strategy.is_dimension_compatible()
        {
            return Err(ConfigError::Invalid(format!(
                "training_mode {} needs a dimension-compatible merge strategy (sum, attention, vit_layer), got {}",
                self.training_mode, self.merge_strategy
            )));
        }
        Ok(())
    }

    pub fn effective_attention_ff_dim(&self) -> usize {
        if self.attention_ff_dim == 0 {
            2 * self.feature_dim
        } else {
            self.attention_ff_dim
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Stable identifier of everything but the seed, used to group seeds of
    /// one experiment and to check checkpoint compatibility.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_string(&c).expect("config serializes to JSON");
        hex_prefix(&Sha256::digest(json.as_bytes()), 16)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n_chars: usize) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s.truncate(n_chars);
    s
}

/// Parses a TOML config document, applies `overrides` and validates.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        key: e
            .span()
            .and_then(|span| key_at(text, span.start))
            .unwrap_or_else(|| "<document>".into()),
        message: e.message().to_string(),
    })?;
    for (key, raw) in overrides {
        let key = key.trim_start_matches("--").replace('-', "_");
        table.insert(key, parse_override_value(raw));
    }
    let config = table_to_config(table)?;
    config.validate()?;
    Ok(config)
}

/// Reads `path` (an empty path string means "no file") and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.display().to_string(),
            source,
        })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

fn parse_override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn key_at(text: &str, offset: usize) -> Option<String> {
    let line_start = text[..offset.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next()?;
    let key = line.split('=').next()?.trim();
    (!key.is_empty()).then(|| key.to_string())
}

fn table_to_config(table: toml::Table) -> Result<RunConfig, ConfigError> {
    let whole = toml::Value::Table(table.clone());
    match whole.try_into::<RunConfig>() {
        Ok(c) => Ok(c),
        Err(err) => {
            // Find the first key that fails on its own so the message names it.
            let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
            for (key, value) in &table {
                let mut probe = defaults.as_table().cloned().unwrap_or_default();
                if !probe.contains_key(key) && key != "episode_length" {
                    return Err(ConfigError::Parse {
                        key: key.clone(),
                        message: "unknown field".into(),
                    });
                }
                probe.insert(key.clone(), value.clone());
                if let Err(e) = toml::Value::Table(probe).try_into::<RunConfig>() {
                    return Err(ConfigError::Parse {
                        key: key.clone(),
                        message: e.message().to_string(),
                    });
                }
            }
            Err(ConfigError::Parse {
                key: "<document>".into(),
                message: err.message().to_string(),
            })
        }
    }
}

/// Independent RNG seeds for each stochastic component of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub env: u64,
    pub init: u64,
    pub replay: u64,
    pub augmentation: u64,
}

impl SeedSet {
    pub fn as_array(&self) -> [u64; 4] {
        [self.env, self.init, self.replay, self.augmentation]
    }
}

/// Keyed hash of a master seed and a path of labels.
pub fn derive_seed(master_seed: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"madview-seed/v1");
    h.update(master_seed.to_le_bytes());
    for label in labels {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn derive_seeds(master_seed: u64) -> SeedSet {
    SeedSet {
        env: derive_seed(master_seed, &["env"]),
        init: derive_seed(master_seed, &["network-init"]),
        replay: derive_seed(master_seed, &["replay-sampling"]),
        augmentation: derive_seed(master_seed, &["augmentation"]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub code_version: String,
    pub started_at_unix: u64,
    pub seeds: SeedSet,
    /// Run-directory-relative paths of the artifacts this run produced.
    pub files: Vec<String>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        let started_at_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            config: config.clone(),
            config_hash: config.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at_unix,
            seeds: derive_seeds(config.seed),
            files: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
