//! Run directories: training driver, CSV logs, checkpoints and resumption.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json      config snapshot, config hash, seeds, file list
//! config.toml        the resolved config
//! train.csv          one row per agent update
//! episodes.csv       one row per finished training episode
//! eval.csv           one row per (evaluation step, view subset)
//! eval.json          every robustness matrix evaluated so far
//! checkpoints/       step_<env_step>.bin + step_<env_step>.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{Agent, EpisodeSummary, LossReport, Trainer, TrainerCounters};
use crate::config::{derive_seeds, hex_prefix, RunConfig, RunManifest};
use crate::envs::{make_env, EnvOptions};
use crate::eval::{robustness_matrix, EvalProtocol, EvalReport};

pub const TRAIN_HEADER: [&str; 13] = [
    "env_step",
    "agent_step",
    "update",
    "critic_loss",
    "actor_loss",
    "temperature_loss",
    "temperature",
    "q_mean",
    "entropy",
    "critic_grad_norm",
    "actor_grad_norm",
    "critic_streams",
    "actor_streams",
];
pub const EPISODE_HEADER: [&str; 5] = ["env_step", "episode", "episode_return", "success", "length"];
pub const EVAL_HEADER: [&str; 4] = ["env_step", "subset_label", "success_rate", "mean_return"];

const CHECKPOINT_MAGIC: &[u8; 8] = b"MADVCKPT";
const CHECKPOINT_FORMAT: u32 = 1;

/// Default root for run directories: `$MADVIEW_RUN_ROOT`, else `runs`.
pub fn default_run_root() -> PathBuf {
    std::env::var_os("MADVIEW_RUN_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<env>/<mode>-<merge>-<hash>/seed<k>`
pub fn default_run_dir(root: &Path, config: &RunConfig) -> PathBuf {
    root.join(&config.env_id)
        .join(format!("{}-{}-{}", config.training_mode, config.merge_strategy, &config.config_hash()[..8]))
        .join(format!("seed{}", config.seed))
}

fn csv_writer(path: &Path, header: &[&str], append: bool) -> Result<csv::Writer<File>> {
    let file = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !append {
        w.write_record(header)?;
    }
    Ok(w)
}

fn stream_summary(labels: &[String], values: &[f64]) -> String {
    labels.iter().zip(values).map(|(l, v)| format!("{l}:{v}")).collect::<Vec<_>>().join(";")
}

fn train_row(c: &TrainerCounters, update: u64, r: &LossReport) -> Vec<String> {
    vec![
        c.env_step.to_string(),
        c.agent_step.to_string(),
        update.to_string(),
        r.critic_loss.to_string(),
        r.actor_loss.to_string(),
        r.temperature_loss.to_string(),
        r.temperature.to_string(),
        r.q_mean.to_string(),
        r.entropy.to_string(),
        r.critic_grad_norm.to_string(),
        r.actor_grad_norm.to_string(),
        stream_summary(&r.stream_labels, &r.critic_streams),
        stream_summary(&r.stream_labels, &r.actor_streams),
    ]
}

fn episode_row(index: usize, e: &EpisodeSummary) -> Vec<String> {
    vec![e.env_step.to_string(), index.to_string(), e.episode_return.to_string(), (e.success as u8).to_string(), e.length.to_string()]
}

/// Appends the rows of one robustness matrix (including `average`).
fn write_eval_rows(w: &mut csv::Writer<File>, report: &EvalReport) -> Result<()> {
    for r in &report.rows {
        w.write_record([report.step.to_string(), r.label.clone(), r.success_rate.to_string(), r.mean_return.to_string()])?;
    }
    if let Some(a) = &report.average {
        w.write_record([report.step.to_string(), "average".into(), a.success_rate.to_string(), a.mean_return.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Drops rows whose leading `env_step` column exceeds `step`.
fn truncate_csv(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|v| v.parse::<usize>().ok()).is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Everything besides the parameter blob needed to continue a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub counters: TrainerCounters,
    pub updates: u64,
    pub explore_rng: ChaCha8Rng,
    pub aug_rng: ChaCha8Rng,
    pub replay_rng: ChaCha8Rng,
    pub env_seed_rng: ChaCha8Rng,
    /// Length of each tensor in the blob, in `Agent::state_tensors` order.
    pub tensor_lens: Vec<usize>,
    pub blob_sha256: String,
}

fn checkpoint_stem(dir: &Path, env_step: usize) -> PathBuf {
    dir.join(format!("step_{env_step:08}"))
}

/// Writes `<stem>.bin` (magic, format, value count, little-endian f32 values)
/// and the `<stem>.json` sidecar.
pub fn save_checkpoint(dir: &Path, trainer: &Trainer<f32>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let tensors = trainer.agent.state_tensors();
    let count: usize = tensors.iter().map(|t| t.len()).sum();
    let mut blob = Vec::with_capacity(20 + 4 * count);
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&CHECKPOINT_FORMAT.to_le_bytes());
    blob.extend_from_slice(&(count as u64).to_le_bytes());
    for t in &tensors {
        for v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        config: trainer.config.clone(),
        config_hash: trainer.config.config_hash(),
        counters: trainer.counters,
        updates: trainer.agent.updates,
        explore_rng: trainer.explore_rng.clone(),
        aug_rng: trainer.aug_rng.clone(),
        replay_rng: trainer.buffer.rng().clone(),
        env_seed_rng: trainer.env.seed_stream().clone(),
        tensor_lens: tensors.iter().map(|t| t.len()).collect(),
        blob_sha256: hex_prefix(&Sha256::digest(&blob), 64),
    };
    let stem = checkpoint_stem(dir, trainer.counters.env_step);
    let bin = stem.with_extension("bin");
    fs::write(&bin, &blob)?;
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(bin)
}

/// Accepts a `.bin`, its `.json` sidecar, a checkpoints directory or a run
/// directory (latest checkpoint).
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        let dir = if path.join("checkpoints").is_dir() { path.join("checkpoints") } else { path.to_path_buf() };
        return latest_checkpoint(&dir)?.with_context(|| format!("no checkpoint in {}", dir.display()));
    }
    let bin = path.with_extension("bin");
    ensure!(bin.exists(), "checkpoint {} not found", bin.display());
    Ok(bin)
}

pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut bins: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin") && p.with_extension("json").exists())
        .collect();
    bins.sort();
    Ok(bins.pop())
}

pub fn read_checkpoint_meta(bin: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(bin.with_extension("json")).with_context(|| format!("reading sidecar of {}", bin.display()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    ensure!(meta.format == CHECKPOINT_FORMAT, "unsupported checkpoint format {}", meta.format);
    Ok(meta)
}

fn read_blob(bin: &Path, meta: &CheckpointMeta) -> Result<Vec<f32>> {
    let mut raw = Vec::new();
    File::open(bin)?.read_to_end(&mut raw)?;
    ensure!(hex_prefix(&Sha256::digest(&raw), 64) == meta.blob_sha256, "checkpoint {} is corrupt (digest mismatch)", bin.display());
    ensure!(raw.len() >= 20 && &raw[..8] == CHECKPOINT_MAGIC, "{} is not a checkpoint", bin.display());
    let count = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes")) as usize;
    ensure!(raw.len() == 20 + 4 * count, "checkpoint length does not match its header");
    Ok(raw[20..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
}

fn restore_agent(agent: &mut Agent<f32>, meta: &CheckpointMeta, values: &[f32]) -> Result<()> {
    let mut tensors = agent.state_tensors_mut();
    let lens: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
    ensure!(lens == meta.tensor_lens, "checkpoint tensor layout does not match the configured agent");
    let mut offset = 0;
    for t in tensors.iter_mut() {
        t.copy_from_slice(&values[offset..offset + t.len()]);
        offset += t.len();
    }
    agent.updates = meta.updates;
    Ok(())
}

/// Rebuilds the agent stored in a checkpoint.
pub fn load_agent(bin: &Path) -> Result<(CheckpointMeta, Agent<f32>)> {
    let meta = read_checkpoint_meta(bin)?;
    let config = &meta.config;
    let mut env = make_env(&config.env_id, &EnvOptions::from_config(config, 0))?;
    let probe = env.reset(Some(0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = Agent::new(config, env.spec(), probe.view_shape(), &mut rng)?;
    restore_agent(&mut agent, &meta, &read_blob(bin, &meta)?)?;
    Ok((meta, agent))
}

fn restore_trainer(trainer: &mut Trainer<f32>, bin: &Path) -> Result<CheckpointMeta> {
    let meta = read_checkpoint_meta(bin)?;
    ensure!(meta.config_hash == trainer.config.config_hash(), "checkpoint was written by a different config");
    restore_agent(&mut trainer.agent, &meta, &read_blob(bin, &meta)?)?;
    trainer.counters = meta.counters;
    trainer.explore_rng = meta.explore_rng.clone();
    trainer.aug_rng = meta.aug_rng.clone();
    trainer.buffer.set_rng(meta.replay_rng.clone());
    trainer.env.set_seed_stream(meta.env_seed_rng.clone());
    trainer.abandon_episode();
    Ok(meta)
}

/// Evaluation protocol used during training at `env_step`.
pub fn training_protocol(config: &RunConfig, env_step: usize) -> EvalProtocol {
    EvalProtocol {
        env_id: config.env_id.clone(),
        options: EnvOptions::from_config(config, 0),
        episodes: config.eval_episodes,
        master_seed: config.seed,
        step: env_step,
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub counters: TrainerCounters,
    pub evals: Vec<EvalReport>,
    pub resumed_from: Option<usize>,
}

const RUN_FILES: [&str; 6] = ["manifest.json", "config.toml", "train.csv", "episodes.csv", "eval.csv", "eval.json"];

fn write_manifest(run_dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let mut files: Vec<String> = RUN_FILES.iter().filter(|f| run_dir.join(f).exists() || **f == "manifest.json").map(|f| f.to_string()).collect();
    let ckpt = run_dir.join("checkpoints");
    if ckpt.is_dir() {
        let mut names: Vec<String> = fs::read_dir(&ckpt)?
            .filter_map(|e| e.ok())
            .map(|e| format!("checkpoints/{}", e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        files.extend(names);
    }
    manifest.files = files;
    fs::write(run_dir.join("manifest.json"), manifest.to_json())?;
    Ok(())
}

/// Trains `config` into `run_dir`, evaluating and checkpointing every
/// `eval_every` environment steps and once more at the end.
pub fn train(config: &RunConfig, run_dir: &Path, options: &TrainOptions) -> Result<TrainSummary> {
    config.validate()?;
    let manifest_path = run_dir.join("manifest.json");
    let ckpt_dir = run_dir.join("checkpoints");
    let seeds = derive_seeds(config.seed);
    let mut trainer = Trainer::<f32>::new(config, &seeds)?;
    let mut evals: Vec<EvalReport> = Vec::new();
    let mut resumed_from = None;
    let mut manifest;
    if options.resume && manifest_path.exists() {
        manifest = RunManifest::from_json(&fs::read_to_string(&manifest_path)?)?;
        ensure!(
            manifest.config_hash == config.config_hash() && manifest.config.seed == config.seed,
            "config differs from the run being resumed in {}",
            run_dir.display()
        );
        if let Some(bin) = latest_checkpoint(&ckpt_dir)? {
            let meta = restore_trainer(&mut trainer, &bin)?;
            resumed_from = Some(meta.counters.env_step);
            for f in ["train.csv", "episodes.csv", "eval.csv"] {
                truncate_csv(&run_dir.join(f), meta.counters.env_step)?;
            }
            if let Ok(text) = fs::read_to_string(run_dir.join("eval.json")) {
                evals = serde_json::from_str::<Vec<EvalReport>>(&text)?;
                evals.retain(|r| r.step <= meta.counters.env_step);
            }
        }
    } else {
        if manifest_path.exists() {
            bail!("{} already holds a run; pass --resume to continue it", run_dir.display());
        }
        fs::create_dir_all(run_dir)?;
        manifest = RunManifest::new(config);
        fs::write(run_dir.join("config.toml"), config.to_toml_string())?;
    }
    let append = resumed_from.is_some();
    let mut train_csv = csv_writer(&run_dir.join("train.csv"), &TRAIN_HEADER, append)?;
    let mut episodes_csv = csv_writer(&run_dir.join("episodes.csv"), &EPISODE_HEADER, append)?;
    let mut eval_csv = csv_writer(&run_dir.join("eval.csv"), &EVAL_HEADER, append)?;
    write_manifest(run_dir, &mut manifest)?;

    let started = std::time::Instant::now();
    let mut last_checkpoint = resumed_from;
    while !trainer.is_done() {
        let out = trainer.step()?;
        let counters = trainer.counters;
        if let Some(report) = &out.update {
            train_csv.write_record(train_row(&counters, trainer.agent.updates, report))?;
        }
        if let Some(e) = &out.episode {
            episodes_csv.write_record(episode_row(counters.episodes, e))?;
        }
        let at_eval = counters.env_step % config.eval_every == 0;
        if at_eval || trainer.is_done() {
            train_csv.flush()?;
            episodes_csv.flush()?;
            if at_eval {
                let report = robustness_matrix(&trainer.agent, &training_protocol(config, counters.env_step))?;
                write_eval_rows(&mut eval_csv, &report)?;
                if options.verbose {
                    let all = report.row("all").map_or(f64::NAN, |r| r.success_rate);
                    eprintln!(
                        "[{}] env_step {} success(all) {:.2} average {:.2} ({:.0}s)",
                        run_dir.display(),
                        counters.env_step,
                        all,
                        report.average.as_ref().map_or(f64::NAN, |a| a.success_rate),
                        started.elapsed().as_secs_f64()
                    );
                }
                evals.push(report);
                let mut w = BufWriter::new(File::create(run_dir.join("eval.json"))?);
                serde_json::to_writer_pretty(&mut w, &evals)?;
                w.flush()?;
            }
            save_checkpoint(&ckpt_dir, &trainer)?;
            last_checkpoint = Some(counters.env_step);
            write_manifest(run_dir, &mut manifest)?;
        }
    }
    if last_checkpoint != Some(trainer.counters.env_step) {
        save_checkpoint(&ckpt_dir, &trainer)?;
    }
    train_csv.flush()?;
    episodes_csv.flush()?;
    write_manifest(run_dir, &mut manifest)?;
    Ok(TrainSummary { run_dir: run_dir.to_path_buf(), counters: trainer.counters, evals, resumed_from })
}

/// Reads `eval.csv` of a run.
pub fn read_eval_csv(path: &Path) -> Result<Vec<(usize, String, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    ensure!(header == EVAL_HEADER, "{} has an unexpected header {:?}", path.display(), header);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push((rec[0].parse()?, rec[1].to_string(), rec[2].parse()?, rec[3].parse()?));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
