//! Inference-time self-correction and self-rewarded Best-of-N.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::LlmClient;
use crate::rollout::{drive, RolloutLimits, RolloutOutcome};
use crate::sandbox::Executor;
use crate::trajectory::{PartitionUnit, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    /// Regeneration attempts per failed step; 0 disables correction.
    pub max_attempts: u32,
    pub suffix_len: usize,
    pub unit: PartitionUnit,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            max_attempts: 4,
            suffix_len: 128,
            unit: PartitionUnit::WhitespaceToken,
        }
    }
}

/// Rollout that backtracks on failed actions and regenerates the step suffix.
pub fn self_correct_run_outcome(
    query: &str,
    instruction: &str,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
    corr: &CorrectionConfig,
) -> RolloutOutcome {
    drive(query, instruction, client, executor, limits, Some(corr))
}

pub fn self_correct_run(
    query: &str,
    instruction: &str,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
    corr: &CorrectionConfig,
) -> Trajectory {
    self_correct_run_outcome(query, instruction, client, executor, limits, corr)
        .tokenized
        .trajectory
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub successes: u32,
    pub calls: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BonConfig {
    pub n: usize,
    /// Rate of a candidate that never called the tool: 0 when set, 1 otherwise.
    pub zero_calls_rate_zero: bool,
}

impl Default for BonConfig {
    fn default() -> Self {
        BonConfig {
            n: 1,
            zero_calls_rate_zero: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonResult {
    pub candidates: Vec<Trajectory>,
    pub scores: Vec<Score>,
    /// Model tokens generated for each candidate.
    pub model_tokens: Vec<usize>,
    pub chosen_index: usize,
}

impl BonResult {
    pub fn chosen(&self) -> &Trajectory {
        &self.candidates[self.chosen_index]
    }
}

/// Selection facts for one candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub score: Score,
    pub boxed: bool,
    pub model_tokens: usize,
}

fn rate_parts(s: Score, zero_calls_rate_zero: bool) -> (u64, u64) {
    match s.calls {
        0 if zero_calls_rate_zero => (0, 1),
        0 => (1, 1),
        c => (u64::from(s.successes), u64::from(c)),
    }
}

/// Index of the best candidate: pass rate, then boxed answer, then fewer
/// Model tokens, then lowest index. Rates compare exactly.
pub fn select_best(candidates: &[Candidate], zero_calls_rate_zero: bool) -> Option<usize> {
    let better = |a: &Candidate, b: &Candidate| -> Ordering {
        let (an, ad) = rate_parts(a.score, zero_calls_rate_zero);
        let (bn, bd) = rate_parts(b.score, zero_calls_rate_zero);
        (u128::from(an) * u128::from(bd))
            .cmp(&(u128::from(bn) * u128::from(ad)))
            .then(a.boxed.cmp(&b.boxed))
            .then(b.model_tokens.cmp(&a.model_tokens))
    };
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        match best {
            Some(j) if better(c, &candidates[j]) != Ordering::Greater => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Generates `cfg.n` independent candidates and picks one by execution pass rate.
/// Candidates self-correct when `corr` is given.
#[allow(clippy::too_many_arguments)]
pub fn best_of_n(
    query: &str,
    instruction: &str,
    cfg: &BonConfig,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
    corr: Option<&CorrectionConfig>,
) -> Result<BonResult, InferenceError> {
    if cfg.n == 0 {
        return Err(InferenceError::PreconditionViolation("best-of-n needs N >= 1".into()));
    }
    let one = |_| drive(query, instruction, client, executor, limits, corr);
    let outcomes: Vec<RolloutOutcome> = if limits.parallelism <= 1 {
        (0..cfg.n).map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(limits.parallelism)
            .build()
            .map_err(|e| InferenceError::PreconditionViolation(e.to_string()))?;
        pool.install(|| (0..cfg.n).into_par_iter().map(one).collect())
    };
    let facts: Vec<Candidate> = outcomes
        .iter()
        .map(|o| Candidate {
            score: Score {
                successes: o.successful_executions,
                calls: o.executions,
            },
            boxed: o.trajectory().final_answer.is_some(),
            model_tokens: o.tokenized.model_token_count(),
        })
        .collect();
    let chosen_index = select_best(&facts, cfg.zero_calls_rate_zero).expect("n >= 1");
    Ok(BonResult {
        scores: facts.iter().map(|f| f.score).collect(),
        model_tokens: facts.iter().map(|f| f.model_tokens).collect(),
        candidates: outcomes.into_iter().map(|o| o.tokenized.trajectory).collect(),
        chosen_index,
    })
}
