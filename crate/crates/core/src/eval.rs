//! Success-rate evaluation under view subsets.
//!
//! A policy is rolled out for a fixed set of seeded episodes while it only
//! sees the views of one subset. The robustness matrix evaluates all views
//! and every single view, plus the unweighted average of those rows.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError};
use crate::config::derive_seed;
use crate::envs::{make_env, EnvError, EnvOptions, MultiViewEnv, MultiViewObservation};
use crate::merge::MergeError;
use crate::nn::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid view subset: {0}")]
    Validation(String),
    #[error("{0}")]
    Capability(String),
    #[error(transparent)]
    Agent(AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

impl From<AgentError> for EvalError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Merge(m @ (MergeError::SubsetUnsupported(_) | MergeError::Arity { .. })) => EvalError::Capability(m.to_string()),
            AgentError::Subset(msg) => EvalError::Validation(msg),
            other => EvalError::Agent(other),
        }
    }
}

/// Views a policy may use during an evaluation, as 1-based view numbers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewSubset {
    All,
    Views(Vec<usize>),
}

impl ViewSubset {
    /// `all`, a view number such as `2`, or several joined by `+` (`1+3`).
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let text = text.trim();
        if text.eq_ignore_ascii_case("all") {
            return Ok(ViewSubset::All);
        }
        let mut views = Vec::new();
        for part in text.split('+') {
            let v: usize = part
                .trim()
                .parse()
                .map_err(|_| EvalError::Validation(format!("`{part}` is not a view number")))?;
            if v == 0 {
                return Err(EvalError::Validation("view numbers start at 1".into()));
            }
            if !views.contains(&v) {
                views.push(v);
            }
        }
        if views.is_empty() {
            return Err(EvalError::Validation("empty view subset".into()));
        }
        Ok(ViewSubset::Views(views))
    }

    /// Comma-separated list of subsets.
    pub fn parse_list(text: &str) -> Result<Vec<Self>, EvalError> {
        let list: Vec<Self> = text.split(',').filter(|s| !s.trim().is_empty()).map(Self::parse).collect::<Result<_, _>>()?;
        if list.is_empty() {
            return Err(EvalError::Validation("no view subsets given".into()));
        }
        Ok(list)
    }

    pub fn label(&self) -> String {
        match self {
            ViewSubset::All => "all".into(),
            ViewSubset::Views(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("+"),
        }
    }

    /// Resolves against the views a policy consumes.
    pub fn resolve(&self, available: &[usize], env_views: usize) -> Result<Vec<usize>, EvalError> {
        match self {
            ViewSubset::All => Ok(available.to_vec()),
            ViewSubset::Views(v) => {
                if v.is_empty() {
                    return Err(EvalError::Validation("empty view subset".into()));
                }
                for &x in v {
                    if x == 0 || x > env_views {
                        return Err(EvalError::Validation(format!("view {x} does not exist; the environment has views 1..={env_views}")));
                    }
                    if !available.contains(&x) {
                        return Err(EvalError::Validation(format!("view {x} is not an input of this policy (inputs: {available:?})")));
                    }
                }
                Ok(v.clone())
            }
        }
    }
}

impl fmt::Display for ViewSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Anything that maps an observation restricted to some views to an action.
pub trait Policy {
    /// 1-based view numbers the policy consumes.
    fn input_views(&self) -> Vec<usize>;
    /// Rejects subsets the policy cannot be evaluated on.
    fn check_subset(&self, _views: &[usize]) -> Result<(), EvalError> {
        Ok(())
    }
    fn act(&self, obs: &MultiViewObservation, views: &[usize]) -> Result<Vec<f64>, EvalError>;
}

/// Deterministic (mean-action) evaluation of an agent.
impl<T: Real> Policy for Agent<T> {
    fn input_views(&self) -> Vec<usize> {
        self.env_views()
    }

    fn check_subset(&self, views: &[usize]) -> Result<(), EvalError> {
        let strategy = self.online.merger.strategy;
        if views.len() < self.n_views() && !strategy.supports_view_subsets() {
            return Err(EvalError::from(AgentError::from(MergeError::SubsetUnsupported(strategy))));
        }
        Ok(())
    }

    fn act(&self, obs: &MultiViewObservation, views: &[usize]) -> Result<Vec<f64>, EvalError> {
        let slots = self.slots_for_env_views(views)?;
        Ok(Agent::act(self, obs, Some(&slots), None)?)
    }
}

/// Where and how long to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub env_id: String,
    pub options: EnvOptions,
    pub episodes: usize,
    /// Episode `k` starts from `derive_seed(master_seed, ["eval", step, k])`.
    pub master_seed: u64,
    pub step: usize,
}

impl EvalProtocol {
    pub fn episode_seed(&self, episode: usize) -> u64 {
        derive_seed(self.master_seed, &["eval", &self.step.to_string(), &episode.to_string()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub label: String,
    pub views: Vec<usize>,
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub success_rate: f64,
    pub mean_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env_id: String,
    pub step: usize,
    pub seed: u64,
    pub rows: Vec<SubsetResult>,
    /// Unweighted mean over `rows`; present for robustness matrices.
    pub average: Option<AverageRow>,
}

impl EvalReport {
    pub fn row(&self, label: &str) -> Option<&SubsetResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Lowest success rate among single-view rows.
    pub fn min_single_view_success(&self) -> Option<f64> {
        self.rows.iter().filter(|r| r.label != "all" && r.views.len() == 1).map(|r| r.success_rate).reduce(f64::min)
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>12} {:>9}\n", "subset", "success", "mean_return", "episodes");
        for r in &self.rows {
            out += &format!("{:<10} {:>8.3} {:>12.3} {:>9}\n", r.label, r.success_rate, r.mean_return, r.episodes);
        }
        if let Some(a) = &self.average {
            out += &format!("{:<10} {:>8.3} {:>12.3} {:>9}\n", "average", a.success_rate, a.mean_return, "");
        }
        out
    }
}

/// Rolls out `protocol.episodes` episodes using only the views of `subset`.
/// An episode succeeds if the environment reports success at any step.
pub fn evaluate<P: Policy + ?Sized>(policy: &P, protocol: &EvalProtocol, subset: &ViewSubset) -> Result<SubsetResult, EvalError> {
    let mut env = make_env(&protocol.env_id, &protocol.options)?;
    evaluate_in(policy, &mut env, protocol, subset)
}

/// Like [`evaluate`] on an already constructed environment; `protocol.env_id`
/// and `protocol.options` are ignored.
pub fn evaluate_in<P: Policy + ?Sized>(
    policy: &P,
    env: &mut MultiViewEnv,
    protocol: &EvalProtocol,
    subset: &ViewSubset,
) -> Result<SubsetResult, EvalError> {
    let views = subset.resolve(&policy.input_views(), env.spec().n_views())?;
    policy.check_subset(&views)?;
    let mut successes = 0;
    let mut total_return = 0.0;
    for episode in 0..protocol.episodes {
        let mut obs = env.reset(Some(protocol.episode_seed(episode)));
        let mut success = false;
        loop {
            let action = policy.act(&obs, &views)?;
            let res = env.step(&action)?;
            total_return += res.reward;
            success |= res.success;
            if res.terminated || res.truncated {
                break;
            }
            obs = res.observation;
        }
        successes += success as usize;
    }
    let n = protocol.episodes.max(1) as f64;
    Ok(SubsetResult {
        label: subset.label(),
        views,
        success_rate: successes as f64 / n,
        mean_return: total_return / n,
        episodes: protocol.episodes,
        successes,
    })
}

/// Evaluates every subset in order.
pub fn evaluate_subsets<P: Policy + ?Sized>(policy: &P, protocol: &EvalProtocol, subsets: &[ViewSubset]) -> Result<EvalReport, EvalError> {
    let rows = subsets.iter().map(|s| evaluate(policy, protocol, s)).collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport { env_id: protocol.env_id.clone(), step: protocol.step, seed: protocol.master_seed, rows, average: None })
}

/// All views, each single view, and their average.
pub fn robustness_matrix<P: Policy + ?Sized>(policy: &P, protocol: &EvalProtocol) -> Result<EvalReport, EvalError> {
    let mut subsets = vec![ViewSubset::All];
    subsets.extend(policy.input_views().into_iter().map(|v| ViewSubset::Views(vec![v])));
    let mut report = evaluate_subsets(policy, protocol, &subsets)?;
    let n = report.rows.len() as f64;
    report.average = Some(AverageRow {
        success_rate: report.rows.iter().map(|r| r.success_rate).sum::<f64>() / n,
        mean_return: report.rows.iter().map(|r| r.mean_return).sum::<f64>() / n,
    });
    Ok(report)
}
