//! Group-relative turn-level credit assignment and the clipped surrogate
//! objective.
//!
//! Returns mix each turn's reward with the episode reward,
//! `G_t = r_turn_t + lambda * R_global`. One baseline is pooled over every
//! turn of every rollout in the group, `A_t = (G_t - mean) / (std + eps)`
//! with the population standard deviation. Advantages are broadcast onto the
//! agent-generated tokens of each turn. All reductions run in a fixed order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::RewardBreakdown;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditMode {
    /// One return per turn.
    #[default]
    Turnwise,
    /// Every turn of a rollout gets `mean_t(r_turn) + lambda * R_global`.
    Trajectory,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveNorm {
    /// Plain sum over generated tokens.
    #[default]
    Sum,
    /// Sum divided by the number of generated tokens.
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CreditConfig {
    pub lambda: f64,
    pub epsilon_stability: f64,
    pub clip_epsilon: f64,
    pub beta_kl: f64,
    pub mode: CreditMode,
    pub norm: ObjectiveNorm,
}

impl Default for CreditConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon_stability: 1e-6,
            clip_epsilon: 0.2,
            beta_kl: 0.01,
            mode: CreditMode::Turnwise,
            norm: ObjectiveNorm::Sum,
        }
    }
}

impl CreditConfig {
    pub fn validate(&self) -> Result<(), CreditError> {
        let bad = |what: &str| Err(CreditError::Config(what.to_owned()));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.epsilon_stability.is_finite() && self.epsilon_stability > 0.0) {
            return bad("epsilon_stability must be finite and > 0");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.beta_kl.is_finite() && self.beta_kl >= 0.0) {
            return bad("beta_kl must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CreditError {
    #[error("invalid credit config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {what} at rollout {rollout}, turn {turn}, token {token}")]
    NonFinite { what: &'static str, rollout: usize, turn: usize, token: usize },
}

/// Per-rollout, per-turn returns.
pub fn turn_returns(breakdowns: &[RewardBreakdown], lambda: f64, mode: CreditMode) -> Vec<Vec<f64>> {
    breakdowns
        .iter()
        .map(|b| match mode {
            CreditMode::Turnwise => b.turns.iter().map(|t| t.r_turn + lambda * b.r_global).collect(),
            CreditMode::Trajectory => vec![trajectory_return(b, lambda); b.turns.len()],
        })
        .collect()
}

/// Mean turn reward plus `lambda` times the global reward.
pub fn trajectory_return(b: &RewardBreakdown, lambda: f64) -> f64 {
    let mean = if b.turns.is_empty() { 0.0 } else { b.turns.iter().map(|t| t.r_turn).sum::<f64>() / b.turns.len() as f64 };
    mean + lambda * b.r_global
}

/// Returns and advantages for one group under `cfg.mode`.
///
/// Turnwise pools every turn of every rollout. Trajectory mode pools one
/// return per rollout and repeats that rollout's advantage on each of its turns.
pub fn group_credit(breakdowns: &[RewardBreakdown], cfg: &CreditConfig) -> AdvantageTable {
    let returns = turn_returns(breakdowns, cfg.lambda, cfg.mode);
    match cfg.mode {
        CreditMode::Turnwise => group_advantages(&returns, cfg.epsilon_stability),
        CreditMode::Trajectory => {
            let per_rollout: Vec<Vec<f64>> = breakdowns.iter().map(|b| vec![trajectory_return(b, cfg.lambda)]).collect();
            let t = group_advantages(&per_rollout, cfg.epsilon_stability);
            let advantages = returns.iter().zip(&t.advantages).map(|(row, a)| vec![a[0]; row.len()]).collect();
            AdvantageTable { returns, advantages, baseline: t.baseline, std: t.std, pool_size: t.pool_size }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
    /// Pooled mean: over all turns of all rollouts, or over rollouts in
    /// trajectory mode.
    pub baseline: f64,
    /// Population standard deviation over the same pool.
    pub std: f64,
    pub pool_size: usize,
}

/// Normalizes `returns` against one pooled baseline.
pub fn group_advantages(returns: &[Vec<f64>], epsilon_stability: f64) -> AdvantageTable {
    let pool_size: usize = returns.iter().map(Vec::len).sum();
    let (baseline, std) = if pool_size == 0 {
        (0.0, 0.0)
    } else {
        let n = pool_size as f64;
        let first = returns.iter().flatten().next().copied().unwrap_or_default();
        // Summation can drift by an ulp on a constant pool.
        let mean = if returns.iter().flatten().all(|g| *g == first) { first } else { returns.iter().flatten().sum::<f64>() / n };
        let var = returns.iter().flatten().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let advantages = returns
        .iter()
        .map(|row| row.iter().map(|g| (g - baseline) / (std + epsilon_stability)).collect())
        .collect();
    AdvantageTable { returns: returns.to_vec(), advantages, baseline, std, pool_size }
}

/// Log-probabilities and generation mask for one turn's tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTokens {
    pub logp_current: Vec<f64>,
    pub logp_behavior: Vec<f64>,
    pub logp_reference: Vec<f64>,
    /// 1 on agent-generated tokens, 0 on prompt and observation tokens.
    pub mask: Vec<u8>,
}

impl TurnTokens {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    fn check(&self, rollout: usize, turn: usize) -> Result<(), CreditError> {
        let n = self.mask.len();
        if self.logp_current.len() != n || self.logp_behavior.len() != n || self.logp_reference.len() != n {
            return Err(CreditError::Shape(format!(
                "rollout {rollout}, turn {turn}: mask has {n} tokens but log-prob arrays have {}/{}/{}",
                self.logp_current.len(),
                self.logp_behavior.len(),
                self.logp_reference.len()
            )));
        }
        if let Some(i) = self.mask.iter().position(|m| *m > 1) {
            return Err(CreditError::Shape(format!("rollout {rollout}, turn {turn}, token {i}: mask value must be 0 or 1")));
        }
        Ok(())
    }
}

/// Token log-probs for every turn of every rollout in a group.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub rollouts: Vec<Vec<TurnTokens>>,
}

impl TokenBatch {
    pub fn validate(&self) -> Result<(), CreditError> {
        for (n, turns) in self.rollouts.iter().enumerate() {
            for (t, tokens) in turns.iter().enumerate() {
                tokens.check(n, t)?;
            }
        }
        Ok(())
    }

    pub fn generated_tokens(&self) -> usize {
        self.rollouts.iter().flatten().flat_map(|t| &t.mask).filter(|m| **m == 1).count()
    }

    fn map_tokens(
        &self,
        what: &'static str,
        f: impl Fn(&TurnTokens, usize) -> f64,
    ) -> Result<Vec<Vec<Vec<f64>>>, CreditError> {
        self.validate()?;
        self.rollouts
            .iter()
            .enumerate()
            .map(|(n, turns)| {
                turns
                    .iter()
                    .enumerate()
                    .map(|(t, tok)| {
                        (0..tok.len())
                            .map(|i| {
                                let v = f(tok, i);
                                if v.is_finite() {
                                    Ok(v)
                                } else {
                                    Err(CreditError::NonFinite { what, rollout: n, turn: t, token: i })
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// One line of a token-batch file: a group's log-probs keyed by sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBatchRecord {
    pub sample_id: String,
    #[serde(flatten)]
    pub batch: TokenBatch,
}

/// Nested per-token values: rollout → turn → token.
pub type TokenValues = Vec<Vec<Vec<f64>>>;

/// Each generated token of turn t carries A_t; masked tokens carry 0.
pub fn broadcast_to_tokens(table: &AdvantageTable, batch: &TokenBatch) -> Result<TokenValues, CreditError> {
    batch.validate()?;
    if table.advantages.len() != batch.rollouts.len() {
        return Err(CreditError::Shape(format!(
            "advantage table has {} rollouts, token batch has {}",
            table.advantages.len(),
            batch.rollouts.len()
        )));
    }
    table
        .advantages
        .iter()
        .zip(&batch.rollouts)
        .enumerate()
        .map(|(n, (adv, turns))| {
            if adv.len() != turns.len() {
                return Err(CreditError::Shape(format!(
                    "rollout {n}: {} turn advantages but {} token turns",
                    adv.len(),
                    turns.len()
                )));
            }
            Ok(adv
                .iter()
                .zip(turns)
                .map(|(a, tok)| tok.mask.iter().map(|m| if *m == 1 { *a } else { 0.0 }).collect())
                .collect())
        })
        .collect()
}

/// `exp(logp_current - logp_behavior)` per token.
pub fn importance_ratios(batch: &TokenBatch) -> Result<TokenValues, CreditError> {
    check_inputs(batch)?;
    batch.map_tokens("importance ratio", |t, i| (t.logp_current[i] - t.logp_behavior[i]).exp())
}

/// K3 estimator `exp(d) - d - 1` with `d = logp_reference - logp_current`.
pub fn kl_k3(batch: &TokenBatch) -> Result<TokenValues, CreditError> {
    check_inputs(batch)?;
    batch.map_tokens("k3 kl", |t, i| k3(t.logp_reference[i] - t.logp_current[i]))
}

fn k3(d: f64) -> f64 {
    // exp_m1 keeps precision near d = 0
    (d.exp_m1() - d).max(0.0)
}

fn check_inputs(batch: &TokenBatch) -> Result<(), CreditError> {
    batch.validate()?;
    for (n, turns) in batch.rollouts.iter().enumerate() {
        for (t, tok) in turns.iter().enumerate() {
            for (what, values) in [
                ("logp_current", &tok.logp_current),
                ("logp_behavior", &tok.logp_behavior),
                ("logp_reference", &tok.logp_reference),
            ] {
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(CreditError::NonFinite { what, rollout: n, turn: t, token: i });
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTerm {
    pub ratio: f64,
    pub advantage: f64,
    /// `min(ratio * A, clip(ratio) * A)`
    pub surrogate: f64,
    pub kl: f64,
    /// `surrogate - beta * kl`, scaled when the objective is token-mean.
    pub term: f64,
    /// d(term)/d(logp_current)
    pub grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub value: f64,
    pub generated_tokens: usize,
    /// Per-token terms; `None` on masked tokens.
    pub tokens: Vec<Vec<Vec<Option<TokenTerm>>>>,
}

/// The clipped surrogate minus the K3 penalty, summed over generated tokens.
pub fn grpo_objective(batch: &TokenBatch, advantages: &TokenValues, cfg: &CreditConfig) -> Result<ObjectiveReport, CreditError> {
    cfg.validate()?;
    check_inputs(batch)?;
    check_token_shape(batch, advantages)?;
    let generated = batch.generated_tokens();
    let scale = match cfg.norm {
        ObjectiveNorm::Sum => 1.0,
        ObjectiveNorm::TokenMean if generated > 0 => 1.0 / generated as f64,
        ObjectiveNorm::TokenMean => 0.0,
    };
    let (lo, hi) = (1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
    let mut value = 0.0;
    let mut tokens = Vec::with_capacity(batch.rollouts.len());
    for (n, turns) in batch.rollouts.iter().enumerate() {
        let mut rollout_terms = Vec::with_capacity(turns.len());
        for (t, tok) in turns.iter().enumerate() {
            let mut turn_terms = Vec::with_capacity(tok.len());
            #[allow(clippy::needless_range_loop)]
            for i in 0..tok.len() {
                if tok.mask[i] == 0 {
                    turn_terms.push(None);
                    continue;
                }
                let a = advantages[n][t][i];
                let ratio = (tok.logp_current[i] - tok.logp_behavior[i]).exp();
                let unclipped = ratio * a;
                let clipped = ratio.clamp(lo, hi) * a;
                let d = tok.logp_reference[i] - tok.logp_current[i];
                let kl = k3(d);
                let surrogate = unclipped.min(clipped);
                let term = scale * (surrogate - cfg.beta_kl * kl);
                // The surrogate follows the ratio only where the unclipped branch is the minimum
                // or the clip is inactive.
                let surrogate_grad = if unclipped <= clipped || (lo..=hi).contains(&ratio) { unclipped } else { 0.0 };
                let kl_grad = 1.0 - d.exp();
                let grad = scale * (surrogate_grad - cfg.beta_kl * kl_grad);
                if !term.is_finite() || !grad.is_finite() {
                    return Err(CreditError::NonFinite { what: "objective term", rollout: n, turn: t, token: i });
                }
                value += term;
                turn_terms.push(Some(TokenTerm { ratio, advantage: a, surrogate, kl, term, grad }));
            }
            rollout_terms.push(turn_terms);
        }
        tokens.push(rollout_terms);
    }
    Ok(ObjectiveReport { value, generated_tokens: generated, tokens })
}

fn check_token_shape(batch: &TokenBatch, values: &TokenValues) -> Result<(), CreditError> {
    let same = values.len() == batch.rollouts.len()
        && values.iter().zip(&batch.rollouts).all(|(v, turns)| {
            v.len() == turns.len() && v.iter().zip(turns).all(|(vt, tok)| vt.len() == tok.len())
        });
    if same {
        Ok(())
    } else {
        Err(CreditError::Shape("per-token advantages do not match the token batch".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::TurnScore;

    #[test]
    fn constant_pool_gives_exact_zeros() {
        let g = 0.5 + 0.7 * 1.3;
        let t = group_advantages(&vec![vec![g; 5]; 7], 1e-6);
        assert_eq!(t.baseline, g);
        assert_eq!(t.std, 0.0);
        assert!(t.advantages.iter().flatten().all(|a| *a == 0.0));
    }

    fn breakdown(r_turns: &[f64], r_global: f64) -> RewardBreakdown {
        RewardBreakdown {
            turns: r_turns.iter().map(|&r| TurnScore { v_fmt: 0, v_kg: 0, v_ans: 0, r_turn: r }).collect(),
            f1: 0.0,
            v_ret: 0,
            r_global,
        }
    }

    fn turn(cur: &[f64], beh: &[f64], rf: &[f64], mask: &[u8]) -> TurnTokens {
        TurnTokens { logp_current: cur.to_vec(), logp_behavior: beh.to_vec(), logp_reference: rf.to_vec(), mask: mask.to_vec() }
    }

    #[test]
    fn returns_examples() {
        assert_eq!(turn_returns(&[breakdown(&[1.0], 2.0)], 1.0, CreditMode::Turnwise), vec![vec![3.0]]);
        assert_eq!(turn_returns(&[breakdown(&[1.0, 0.5], 2.0)], 0.0, CreditMode::Turnwise), vec![vec![1.0, 0.5]]);
        assert_eq!(turn_returns(&[breakdown(&[1.0, 0.5], 0.0)], 1.0, CreditMode::Turnwise), vec![vec![1.0, 0.5]]);
        assert_eq!(turn_returns(&[breakdown(&[1.0, 0.5], 2.0)], 1.0, CreditMode::Trajectory), vec![vec![2.75, 2.75]]);
    }

    #[test]
    fn trajectory_mode_pools_one_return_per_rollout() {
        let cfg = CreditConfig { mode: CreditMode::Trajectory, ..CreditConfig::default() };
        // G = 1 + 2 = 3 over four turns, G = 0.5 + 0 over one turn.
        let t = group_credit(&[breakdown(&[1.0; 4], 2.0), breakdown(&[0.5], 0.0)], &cfg);
        assert_eq!(t.pool_size, 2);
        assert!((t.baseline - 1.75).abs() < 1e-15);
        assert!((t.std - 1.25).abs() < 1e-15);
        let a = 1.25 / (1.25 + 1e-6);
        assert_eq!(t.advantages, vec![vec![a; 4], vec![-a]]);
        let turnwise = group_credit(&[breakdown(&[1.0; 4], 2.0), breakdown(&[0.5], 0.0)], &CreditConfig::default());
        assert_eq!(turnwise.pool_size, 5);
    }

    #[test]
    fn advantages_two_turns() {
        let t = group_advantages(&[vec![1.0], vec![3.0]], 1e-6);
        assert_eq!((t.baseline, t.std, t.pool_size), (2.0, 1.0, 2));
        assert!((t.advantages[0][0] + 1.0).abs() < 1e-5);
        assert!((t.advantages[1][0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn equal_returns_give_zero() {
        let t = group_advantages(&[vec![2.0, 2.0], vec![2.0]], 1e-6);
        assert!(t.advantages.iter().flatten().all(|a| *a == 0.0));
        let single = group_advantages(&[vec![5.0]], 1e-6);
        assert_eq!(single.advantages, vec![vec![0.0]]);
    }

    #[test]
    fn broadcast_examples() {
        let table = group_advantages(&[vec![0.0]], 1e-6);
        let table = AdvantageTable { advantages: vec![vec![0.5]], ..table };
        let batch = TokenBatch { rollouts: vec![vec![turn(&[0.0; 5], &[0.0; 5], &[0.0; 5], &[1, 1, 1, 0, 0])]] };
        assert_eq!(broadcast_to_tokens(&table, &batch).unwrap(), vec![vec![vec![0.5, 0.5, 0.5, 0.0, 0.0]]]);
        let masked = TokenBatch { rollouts: vec![vec![turn(&[0.0; 2], &[0.0; 2], &[0.0; 2], &[0, 0])]] };
        assert_eq!(broadcast_to_tokens(&table, &masked).unwrap(), vec![vec![vec![0.0, 0.0]]]);
    }

    #[test]
    fn broadcast_composes_over_turns() {
        let base = group_advantages(&[vec![0.0, 0.0]], 1e-6);
        let table = AdvantageTable { advantages: vec![vec![-1.0, 1.0]], ..base };
        let t1 = turn(&[0.0; 2], &[0.0; 2], &[0.0; 2], &[1, 0]);
        let t2 = turn(&[0.0; 3], &[0.0; 3], &[0.0; 3], &[0, 1, 1]);
        let both = broadcast_to_tokens(&table, &TokenBatch { rollouts: vec![vec![t1.clone(), t2.clone()]] }).unwrap();
        let one = |a: f64, t: TurnTokens| {
            let tab = AdvantageTable { advantages: vec![vec![a]], ..group_advantages(&[vec![0.0]], 1e-6) };
            broadcast_to_tokens(&tab, &TokenBatch { rollouts: vec![vec![t]] }).unwrap().remove(0).remove(0)
        };
        assert_eq!(both[0], vec![one(-1.0, t1), one(1.0, t2)]);
    }

    #[test]
    fn shape_errors() {
        let bad = TokenBatch { rollouts: vec![vec![turn(&[0.0; 2], &[0.0], &[0.0; 2], &[1, 1])]] };
        assert!(matches!(importance_ratios(&bad), Err(CreditError::Shape(_))));
        let table = group_advantages(&[vec![0.0], vec![1.0]], 1e-6);
        let batch = TokenBatch { rollouts: vec![vec![turn(&[0.0], &[0.0], &[0.0], &[1])]] };
        assert!(matches!(broadcast_to_tokens(&table, &batch), Err(CreditError::Shape(_))));
    }

    #[test]
    fn ratio_examples() {
        let batch = TokenBatch { rollouts: vec![vec![turn(&[-1.0, 2f64.ln() - 3.0], &[-1.0, -3.0], &[0.0, 0.0], &[1, 1])]] };
        let r = importance_ratios(&batch).unwrap();
        assert_eq!(r[0][0][0], 1.0);
        assert!((r[0][0][1] - 2.0).abs() < 1e-12);
        let nan = TokenBatch { rollouts: vec![vec![turn(&[f64::NAN], &[0.0], &[0.0], &[1])]] };
        assert!(matches!(importance_ratios(&nan), Err(CreditError::NonFinite { token: 0, .. })));
    }

    #[test]
    fn k3_examples() {
        let ln2 = 2f64.ln();
        let batch = TokenBatch { rollouts: vec![vec![turn(&[-1.0, -1.0], &[0.0, 0.0], &[-1.0, -1.0 + ln2], &[1, 1])]] };
        let kl = kl_k3(&batch).unwrap();
        assert_eq!(kl[0][0][0], 0.0);
        assert!((kl[0][0][1] - (2.0 - ln2 - 1.0)).abs() < 1e-12);
        assert!((kl[0][0][1] - 0.3069).abs() < 1e-4);
    }

    fn single(ratio: f64, adv: f64, beta: f64) -> f64 {
        let batch = TokenBatch { rollouts: vec![vec![turn(&[ratio.ln()], &[0.0], &[ratio.ln()], &[1])]] };
        let cfg = CreditConfig { beta_kl: beta, ..CreditConfig::default() };
        grpo_objective(&batch, &vec![vec![vec![adv]]], &cfg).unwrap().value
    }

    #[test]
    fn clip_cases() {
        assert!((single(2.0, 1.0, 0.0) - 1.2).abs() < 1e-12);
        assert!((single(0.5, -1.0, 0.0) + 0.8).abs() < 1e-12);
        // inside the clip range the plain ratio is used
        assert!((single(1.1, 1.0, 0.0) - 1.1).abs() < 1e-12);
    }

    #[test]
    fn on_policy_objective_is_advantage_sum() {
        let lp = [-0.3, -1.2, -2.0, -0.7];
        let batch = TokenBatch { rollouts: vec![vec![turn(&lp, &lp, &lp, &[1, 1, 0, 1])]] };
        let adv = vec![vec![vec![0.4, -0.2, 9.0, 1.5]]];
        let rep = grpo_objective(&batch, &adv, &CreditConfig::default()).unwrap();
        assert_eq!(rep.value, 0.4 + -0.2 + 1.5);
        assert_eq!(rep.generated_tokens, 3);
        assert!(rep.tokens[0][0][2].is_none());
        let mean = grpo_objective(&batch, &adv, &CreditConfig { norm: ObjectiveNorm::TokenMean, ..CreditConfig::default() }).unwrap();
        assert!((mean.value - (0.4 - 0.2 + 1.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = CreditConfig { clip_epsilon: 1.5, ..CreditConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = CreditConfig { epsilon_stability: 0.0, ..CreditConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
