//! Policies and the N-rollout collector.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::QASample;
use crate::graph::{KnowledgeGraph, PathError, ReasoningPath};
use crate::protocol::{AdvanceError, Executor, GraphExecutor, Trajectory, SERVER_INSTRUCTION};
use crate::retrieval::{realize_path, ActionCall, ActionKind, ExecOptions};
use crate::reward::{score_trajectory, RewardBreakdown, RewardConfig};

pub const DEFAULT_CONTEXT_CAP: usize = 32_768;

/// What a policy sees before writing turn `turn_index`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub sample_id: &'a str,
    /// Prompt plus every earlier message and wrapped observation.
    pub context: &'a str,
    pub rollout_index: usize,
    /// 1-based.
    pub turn_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("policy failed: {message}")]
pub struct PolicyError {
    pub message: String,
    pub retriable: bool,
}

impl PolicyError {
    pub fn fatal(message: impl Into<String>) -> Self {
        Self { message: message.into(), retriable: false }
    }

    pub fn retriable(message: impl Into<String>) -> Self {
        Self { message: message.into(), retriable: true }
    }
}

/// Text in, text out. The returned message is used verbatim.
pub trait Policy: Send + Sync {
    fn generate(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError>;

    /// Per-token log-probabilities of `message`, when the backend exposes them.
    fn token_logprobs(&self, _ctx: &PolicyContext<'_>, _message: &str) -> Option<Result<Vec<f64>, PolicyError>> {
        None
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn generate(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        (**self).generate(ctx)
    }

    fn token_logprobs(&self, ctx: &PolicyContext<'_>, message: &str) -> Option<Result<Vec<f64>, PolicyError>> {
        (**self).token_logprobs(ctx, message)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn generate(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        (**self).generate(ctx)
    }

    fn token_logprobs(&self, ctx: &PolicyContext<'_>, message: &str) -> Option<Result<Vec<f64>, PolicyError>> {
        (**self).token_logprobs(ctx, message)
    }
}

/// Builds the policy used for one sample.
pub trait PolicyFactory: Send + Sync {
    fn policy_for<'a>(&'a self, sample: &QASample) -> Result<Box<dyn Policy + 'a>, PolicyError>;
}

/// One policy for every sample.
pub struct Shared<P>(pub P);

impl<P: Policy> PolicyFactory for Shared<P> {
    fn policy_for<'a>(&'a self, _sample: &QASample) -> Result<Box<dyn Policy + 'a>, PolicyError> {
        Ok(Box::new(&self.0))
    }
}

pub fn query_message(call: &ActionCall, think: &str) -> String {
    format!("<think>{think}</think>\n<kg-query>{}</kg-query>", call.render())
}

pub fn answer_message(answers: &[&str], think: &str) -> String {
    format!("<think>{think}</think>\n<answer>{}</answer>", answers.join(", "))
}

/// Walks a known reasoning path one `get_tail_entities` call per turn, then
/// answers with the path's last entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OraclePolicy {
    messages: Vec<String>,
    truncated: bool,
}

impl OraclePolicy {
    /// A path with more than `max_turns - 1` hops is cut short and the
    /// policy answers with the entity it reached; [`truncated`](Self::truncated)
    /// reports this.
    pub fn new(graph: &KnowledgeGraph, path: &ReasoningPath, max_turns: usize) -> Result<Self, PathError> {
        let actions = realize_path(graph, path)?;
        let hops = actions.len().min(max_turns.saturating_sub(1));
        let mut messages: Vec<String> = actions[..hops]
            .iter()
            .map(|a| {
                let call = a.to_call();
                query_message(&call, &format!("Follow {} from {}.", call.args[1], call.args[0]))
            })
            .collect();
        let reached = &path.nodes[hops];
        messages.push(answer_message(&[reached], &format!("The path ends at {reached}.")));
        Ok(Self { messages, truncated: hops < actions.len() })
    }

    /// Uses the first gold path, or else the shortest directed path from an
    /// anchor to a gold answer.
    pub fn for_sample(sample: &QASample, max_turns: usize) -> Result<Self, PolicyError> {
        let path = match sample.gold_paths.first() {
            Some(p) => p.clone(),
            None => {
                let gold: BTreeSet<&str> = sample.gold_answers.iter().map(String::as_str).collect();
                ReasoningPath::shortest(&sample.graph, sample.anchor_entities.iter().map(String::as_str), &gold)
                    .ok_or_else(|| PolicyError::fatal(format!("no path from an anchor to a gold answer in sample {}", sample.sample_id)))?
            }
        };
        Self::new(&sample.graph, &path, max_turns).map_err(|e| PolicyError::fatal(e.to_string()))
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn messages(&self) -> &[String] {
        &self.messages
    }
}

impl Policy for OraclePolicy {
    fn generate(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let i = (ctx.turn_index.max(1) - 1).min(self.messages.len() - 1);
        Ok(self.messages[i].clone())
    }
}

/// Builds an [`OraclePolicy`] per sample.
#[derive(Debug, Clone, Copy)]
pub struct OracleFactory {
    pub max_turns: usize,
}

impl PolicyFactory for OracleFactory {
    fn policy_for<'a>(&'a self, sample: &QASample) -> Result<Box<dyn Policy + 'a>, PolicyError> {
        Ok(Box::new(OraclePolicy::for_sample(sample, self.max_turns)?))
    }
}

/// A [`RandomPolicy`] over each sample's own graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomFactory;

impl PolicyFactory for RandomFactory {
    fn policy_for<'a>(&'a self, sample: &QASample) -> Result<Box<dyn Policy + 'a>, PolicyError> {
        Ok(Box::new(RandomPolicy::new(&sample.graph)))
    }
}

/// Replays recorded rollouts per sample id.
#[derive(Debug, Clone, Default)]
pub struct ReplayFactory {
    scripts: BTreeMap<String, ScriptedPolicy>,
}

impl ReplayFactory {
    /// Failed rollouts and rollouts without turns are skipped.
    pub fn from_groups<'a>(groups: impl IntoIterator<Item = &'a RolloutGroup>) -> Self {
        let mut scripts = BTreeMap::new();
        for g in groups {
            let per: Vec<Vec<String>> = g
                .succeeded()
                .map(|r| r.trajectory.turns.iter().map(|t| t.message.clone()).collect::<Vec<_>>())
                .filter(|m| !m.is_empty())
                .collect();
            if !per.is_empty() {
                scripts.insert(g.sample_id.clone(), ScriptedPolicy::per_rollout(per));
            }
        }
        Self { scripts }
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, policy: ScriptedPolicy) {
        self.scripts.insert(sample_id.into(), policy);
    }
}

impl PolicyFactory for ReplayFactory {
    fn policy_for<'a>(&'a self, sample: &QASample) -> Result<Box<dyn Policy + 'a>, PolicyError> {
        self.scripts
            .get(&sample.sample_id)
            .map(|p| Box::new(p) as Box<dyn Policy + 'a>)
            .ok_or_else(|| PolicyError::fatal(format!("no recorded transcript for sample {}", sample.sample_id)))
    }
}

/// Replays fixed messages. Rollout `n` uses script `n % scripts.len()`;
/// turns past the end of a script repeat its last message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedPolicy {
    scripts: Vec<Vec<String>>,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<String>) -> Self {
        Self::per_rollout(vec![script])
    }

    pub fn per_rollout(scripts: Vec<Vec<String>>) -> Self {
        assert!(scripts.iter().all(|s| !s.is_empty()) && !scripts.is_empty(), "scripts must be non-empty");
        Self { scripts }
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let script = &self.scripts[ctx.rollout_index % self.scripts.len()];
        Ok(script[(ctx.turn_index.max(1) - 1).min(script.len() - 1)].clone())
    }
}

/// Random well-formed and malformed messages over a label vocabulary.
/// Output depends only on the seed, sample, rollout and turn, never on
/// call order.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    entities: Vec<String>,
    relations: Vec<String>,
    /// Probability of answering on any turn.
    pub answer_prob: f64,
    /// Probability of an ill-formed message.
    pub noise_prob: f64,
}

impl RandomPolicy {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        Self {
            entities: graph.entities().iter().cloned().collect(),
            relations: graph.relations().iter().cloned().collect(),
            answer_prob: 0.25,
            noise_prob: 0.15,
        }
    }

    fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [String], fallback: &'a str) -> &'a str {
        pool.choose(rng).map_or(fallback, String::as_str)
    }
}

pub fn turn_rng(seed: u64, sample_id: &str, rollout_index: usize, turn_index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((sample_id.len() as u64).to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update((rollout_index as u64).to_le_bytes());
    h.update((turn_index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

impl Policy for RandomPolicy {
    fn generate(&self, ctx: &PolicyContext<'_>) -> Result<String, PolicyError> {
        let mut rng = turn_rng(ctx.seed, ctx.sample_id, ctx.rollout_index, ctx.turn_index);
        let entity = Self::pick(&mut rng, &self.entities, "nothing");
        if rng.gen_bool(self.noise_prob) {
            return Ok(match rng.gen_range(0..4) {
                0 => format!("<answer>{entity}</answer>"),
                1 => format!("<think>unsure</think><kg-query>lookup {entity}</kg-query>"),
                2 => format!("<think>unsure</think><kg-query>get_entity_info(\"{entity}\")</kg-query>"),
                _ => "I am not sure what to do.".to_owned(),
            });
        }
        if rng.gen_bool(self.answer_prob) {
            return Ok(answer_message(&[entity], "guessing"));
        }
        let kind = *ActionKind::ALL.choose(&mut rng).expect("four actions");
        let mut args = vec![entity.to_owned()];
        if !kind.returns_relations() {
            args.push(Self::pick(&mut rng, &self.relations, "nothing").to_owned());
        }
        Ok(query_message(&ActionCall { name: kind.name().to_owned(), args }, "exploring"))
    }

    fn token_logprobs(&self, ctx: &PolicyContext<'_>, message: &str) -> Option<Result<Vec<f64>, PolicyError>> {
        let mut rng = turn_rng(ctx.seed ^ 0x9e37_79b9, ctx.sample_id, ctx.rollout_index, ctx.turn_index);
        let n = message.split_whitespace().count();
        Some(Ok((0..n).map(|_| -rng.gen_range(0.01..3.0)).collect()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutOptions {
    pub n: usize,
    pub max_turns: usize,
    pub exec: ExecOptions,
    /// Characters of context after which an episode is aborted.
    pub context_cap: usize,
    /// Worker threads for [`collect_rollouts`].
    pub concurrency: usize,
    pub seed: u64,
    pub record_logprobs: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            n: 1,
            max_turns: 5,
            exec: ExecOptions::default(),
            context_cap: DEFAULT_CONTEXT_CAP,
            concurrency: 4,
            seed: 0,
            record_logprobs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub index: usize,
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<RewardBreakdown>,
    /// Per turn, the policy's log-probabilities for its own message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub max_turns: usize,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn succeeded(&self) -> impl Iterator<Item = &Rollout> {
        self.rollouts.iter().filter(|r| r.trajectory.status != crate::protocol::EpisodeStatus::InfraFailed)
    }

    pub fn failed_count(&self) -> usize {
        self.rollouts.len() - self.succeeded().count()
    }

    /// Attaches reward breakdowns to every rollout that did not fail.
    pub fn score(&mut self, gold: &BTreeSet<String>, cfg: &RewardConfig) -> Result<(), crate::reward::RewardError> {
        for r in &mut self.rollouts {
            r.rewards = match r.trajectory.status {
                crate::protocol::EpisodeStatus::InfraFailed => None,
                _ => Some(score_trajectory(&r.trajectory, gold, cfg)?),
            };
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid rollout options: {0}")]
    Options(String),
    #[error("cannot start episode: {0}")]
    Prompt(#[from] crate::protocol::PromptError),
    #[error("all {} rollouts for sample {} failed", .0.rollouts.len(), .0.sample_id)]
    AllFailed(Box<RolloutGroup>),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// Runs one episode to termination.
pub fn run_episode(
    sample: &QASample,
    policy: &dyn Policy,
    executor: &dyn Executor,
    index: usize,
    opts: &RolloutOptions,
) -> Result<Rollout, RolloutError> {
    let mut trajectory = Trajectory::start(&sample.sample_id, &sample.question, opts.max_turns, SERVER_INSTRUCTION)?;
    let mut logprobs = opts.record_logprobs.then(Vec::new);
    while !trajectory.is_terminated() {
        let context = trajectory.context();
        let chars = context.chars().count();
        if chars > opts.context_cap {
            trajectory.abort_overflow(chars);
            break;
        }
        let ctx = PolicyContext {
            sample_id: &sample.sample_id,
            context: &context,
            rollout_index: index,
            turn_index: trajectory.turn_index(),
            seed: opts.seed,
        };
        let message = match policy.generate(&ctx) {
            Ok(m) => m,
            Err(e) => {
                trajectory.mark_failed(e.to_string());
                break;
            }
        };
        if let Some(lp) = logprobs.as_mut() {
            match policy.token_logprobs(&ctx, &message) {
                Some(Ok(v)) => lp.push(v),
                Some(Err(e)) => {
                    trajectory.mark_failed(e.to_string());
                    break;
                }
                None => logprobs = None,
            }
        }
        match trajectory.advance(message, executor) {
            Ok(()) => {}
            Err(AdvanceError::Executor(_)) => break,
            Err(AdvanceError::Terminated(_)) => unreachable!("loop checks termination"),
        }
    }
    Ok(Rollout { index, trajectory, rewards: None, token_logprobs: logprobs })
}

fn check(opts: &RolloutOptions) -> Result<(), RolloutError> {
    if opts.n == 0 {
        return Err(RolloutError::Options("N must be at least 1".into()));
    }
    if opts.max_turns == 0 {
        return Err(RolloutError::Options("H must be at least 1".into()));
    }
    if opts.concurrency == 0 {
        return Err(RolloutError::Options("concurrency must be at least 1".into()));
    }
    Ok(())
}

/// Collects `opts.n` rollouts inside whatever rayon pool is current.
pub fn collect_with(
    sample: &QASample,
    policy: &dyn Policy,
    executor: &(dyn Executor + Sync),
    opts: &RolloutOptions,
) -> Result<RolloutGroup, RolloutError> {
    check(opts)?;
    let rollouts = (0..opts.n)
        .into_par_iter()
        .map(|i| run_episode(sample, policy, executor, i, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let group = RolloutGroup { sample_id: sample.sample_id.clone(), max_turns: opts.max_turns, rollouts };
    if group.succeeded().next().is_none() {
        return Err(RolloutError::AllFailed(Box::new(group)));
    }
    Ok(group)
}

pub fn worker_pool(concurrency: usize) -> Result<rayon::ThreadPool, RolloutError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| RolloutError::Pool(e.to_string()))
}

/// Collects `opts.n` rollouts against the sample's own graph, at most
/// `opts.concurrency` at a time.
pub fn collect_rollouts(sample: &QASample, policy: &dyn Policy, opts: &RolloutOptions) -> Result<RolloutGroup, RolloutError> {
    check(opts)?;
    let executor = GraphExecutor::new(&sample.graph, opts.exec);
    worker_pool(opts.concurrency)?.install(|| collect_with(sample, policy, &executor, opts))
}
