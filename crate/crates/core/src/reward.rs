//! Verifiable rewards.
//!
//! Per turn: `r_turn = w_fmt*v_fmt + w_kg*v_kg + w_ans*v_ans`.
//! Per episode: `R_global = w_F1*F1 + w_ret*v_ret`.
//! All matching uses [`normalize`](crate::protocol::normalize).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{AnswerSet, EpisodeStatus, ParsedTurn, Trajectory};
use crate::retrieval::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default = "half")]
    pub w_fmt: f64,
    #[serde(default = "half")]
    pub w_kg: f64,
    #[serde(default = "half")]
    pub w_ans: f64,
    #[serde(rename = "w_F1", default = "one")]
    pub w_f1: f64,
    #[serde(default = "one")]
    pub w_ret: f64,
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { w_fmt: 0.5, w_kg: 0.5, w_ans: 0.5, w_f1: 1.0, w_ret: 1.0 }
    }
}

impl RewardConfig {
    /// Turn-level weights zeroed.
    pub fn without_turn_rewards() -> Self {
        Self { w_fmt: 0.0, w_kg: 0.0, w_ans: 0.0, ..Self::default() }
    }

    /// Retrieval-coverage weight zeroed.
    pub fn without_retrieval_reward() -> Self {
        Self { w_ret: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, w) in [("w_fmt", self.w_fmt), ("w_kg", self.w_kg), ("w_ans", self.w_ans), ("w_F1", self.w_f1), ("w_ret", self.w_ret)] {
            if !w.is_finite() || w < 0.0 {
                return Err(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub v_fmt: u8,
    pub v_kg: u8,
    pub v_ans: u8,
    pub r_turn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub turns: Vec<TurnScore>,
    pub f1: f64,
    pub v_ret: u8,
    pub r_global: f64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("trajectory {0} has not terminated")]
    Unterminated(String),
    #[error("trajectory {0} failed for infrastructure reasons and cannot be scored")]
    InfraFailed(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("gold answer set is empty")]
    EmptyGold,
}

/// Which entity of a prediction counts for Hit@1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitMode {
    /// Any predicted entity in the gold set.
    #[default]
    Intersection,
    /// Only the first listed entity.
    FirstEntity,
}

pub fn score_format(turn: &ParsedTurn) -> u8 {
    u8::from(turn.format_valid)
}

/// 1 iff the turn issued a retrieval action and the observation is ok.
pub fn score_kg(turn: &ParsedTurn, obs: Option<&Observation>) -> u8 {
    u8::from(turn.query().is_some() && obs.is_some_and(Observation::is_ok))
}

/// 1 iff `terminal` is an answered final turn whose answer set is non-empty
/// and whose message is format-valid.
pub fn score_answer_format(turn: &ParsedTurn, terminal: bool, predicted: Option<&AnswerSet>) -> u8 {
    u8::from(terminal && turn.is_answer() && turn.format_valid && predicted.is_some_and(|p| !p.is_empty()))
}

fn check_gold(gold: &BTreeSet<String>) -> Result<(), MetricError> {
    if gold.is_empty() {
        Err(MetricError::EmptyGold)
    } else {
        Ok(())
    }
}

/// Set F1 on normalized strings; `gold` must already be normalized.
pub fn f1(predicted: &AnswerSet, gold: &BTreeSet<String>) -> Result<f64, MetricError> {
    f1_sets(&predicted.normalized(), gold)
}

pub fn f1_sets(predicted: &BTreeSet<String>, gold: &BTreeSet<String>) -> Result<f64, MetricError> {
    check_gold(gold)?;
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let hits = predicted.intersection(gold).count() as f64;
    if hits == 0.0 {
        return Ok(0.0);
    }
    let precision = hits / predicted.len() as f64;
    let recall = hits / gold.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn hit_at_1(predicted: &AnswerSet, gold: &BTreeSet<String>, mode: HitMode) -> Result<u8, MetricError> {
    check_gold(gold)?;
    let hit = match mode {
        HitMode::Intersection => predicted.entities.iter().any(|e| gold.contains(&e.normalized)),
        HitMode::FirstEntity => predicted.first().is_some_and(|f| gold.contains(f)),
    };
    Ok(u8::from(hit))
}

/// 1 iff some gold entity is among the labels of an ok observation.
/// Text the agent wrote itself does not count.
pub fn retrieval_coverage(traj: &Trajectory, gold: &BTreeSet<String>) -> u8 {
    let covered = traj
        .turns
        .iter()
        .filter_map(|t| t.observation.as_ref())
        .flat_map(Observation::labels)
        .any(|label| gold.contains(&crate::protocol::normalize(label)));
    u8::from(covered)
}

pub fn score_trajectory(traj: &Trajectory, gold: &BTreeSet<String>, cfg: &RewardConfig) -> Result<RewardBreakdown, RewardError> {
    match traj.status {
        EpisodeStatus::Running => return Err(RewardError::Unterminated(traj.sample_id.clone())),
        EpisodeStatus::InfraFailed => return Err(RewardError::InfraFailed(traj.sample_id.clone())),
        _ => {}
    }
    let empty = AnswerSet::empty();
    let predicted = traj.predicted.as_ref().unwrap_or(&empty);
    let last = traj.turns.len().saturating_sub(1);
    let answered = traj.status == EpisodeStatus::Answered;
    let turns = traj
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let v_fmt = score_format(&t.parsed);
            let v_kg = score_kg(&t.parsed, t.observation.as_ref());
            let v_ans = score_answer_format(&t.parsed, answered && i == last, Some(predicted));
            let r_turn = cfg.w_fmt * f64::from(v_fmt) + cfg.w_kg * f64::from(v_kg) + cfg.w_ans * f64::from(v_ans);
            TurnScore { v_fmt, v_kg, v_ans, r_turn }
        })
        .collect();
    let f1 = f1(predicted, gold)?;
    let v_ret = retrieval_coverage(traj, gold);
    let r_global = cfg.w_f1 * f1 + cfg.w_ret * f64::from(v_ret);
    Ok(RewardBreakdown { turns, f1, v_ret, r_global })
}
