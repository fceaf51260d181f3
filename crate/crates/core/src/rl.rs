//! Hierarchical RL data plane.
//!
//! Rewards, group-relative advantages, observation masking, the clipped
//! surrogate and NLL terms for trajectory- and step-level groups, step-level
//! dataset construction, and the training-record export consumed by an
//! external trainer. No gradients are computed here; per-token logprobs are
//! inputs.
//!
//! Sign convention: [`surrogate_objective`] is the quantity to maximise;
//! [`trajectory_loss`] and [`step_loss`] return the minimisation loss
//! `-surrogate + alpha * nll`.

use std::io::Write;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{GenerationRequest, LlmClient};
use crate::rollout::{continuation_messages, parse_generation, GroupRollout, RolloutLimits};
use crate::sandbox::{format_observation, ExecutionResult, Executor};
use crate::trajectory::{
    extract_final_answer, partition_step, PartitionUnit, Segment, SegmentKind, TokenRecord,
    Trajectory, CODE_CLOSE, OBS_CLOSE, OBS_OPEN,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("sample {0} has no model tokens")]
    DegenerateSample(String),
    #[error("empty group")]
    EmptyGroup,
    #[error("invalid rl config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub group_size: usize,
    pub alpha: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Length of the regenerated step suffix, in `unit`s.
    pub suffix_len: usize,
    pub adv_epsilon: f64,
    pub unit: PartitionUnit,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 16,
            alpha: 0.01,
            eps_low: 0.2,
            eps_high: 0.28,
            suffix_len: 128,
            adv_epsilon: 1e-8,
            unit: PartitionUnit::WhitespaceToken,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::InvalidConfig(m.to_string()));
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return bad("eps_low must lie in (0, 1)");
        }
        if !(self.eps_high > 0.0) {
            return bad("eps_high must be positive");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.suffix_len == 0 {
            return bad("suffix_len must be >= 1");
        }
        if !(self.adv_epsilon >= 0.0) {
            return bad("adv_epsilon must be >= 0");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rewards
// ---------------------------------------------------------------------------

/// Trims whitespace and strips braces that enclose the whole answer.
pub fn normalize_answer(s: &str) -> &str {
    let mut s = s.trim();
    while s.starts_with('{') && s.ends_with('}') && outer_braces_match(s) {
        s = s[1..s.len() - 1].trim();
    }
    s
}

fn outer_braces_match(s: &str) -> bool {
    let mut depth = 0i32;
    for (i, ch) in s.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return i == s.len() - 1;
                }
            }
            _ => {}
        }
    }
    false
}

fn parse_decimal(s: &str) -> Option<BigRational> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    if body.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit()) || !frac_part.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer = BigInt::from_str(&digits).ok()?;
    let denom = num_traits::pow(BigInt::from(10), frac_part.len());
    let value = BigRational::new(numer, denom);
    Some(if neg { -value } else { value })
}

/// Exact rational value of an integer, decimal, `a/b` or `\frac{a}{b}` answer.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some(v) = parse_decimal(s) {
        return Some(v);
    }
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r.trim_start()),
        None => (false, s),
    };
    let frac = ["\\frac", "\\dfrac", "\\tfrac"]
        .iter()
        .find_map(|cmd| rest.strip_prefix(cmd))
        .and_then(|args| {
            let args = args.trim_start().strip_prefix('{')?;
            let (num, after) = args.split_once('}')?;
            let den = after.trim_start().strip_prefix('{')?.strip_suffix('}')?;
            Some((num.to_string(), den.to_string()))
        });
    let (num, den) = match frac {
        Some(parts) => parts,
        None => {
            let (n, d) = rest.split_once('/')?;
            (n.to_string(), d.to_string())
        }
    };
    let num = parse_decimal(num.trim())?;
    let den = parse_decimal(den.trim())?;
    if den.is_zero() {
        return None;
    }
    let v = num / den;
    Some(if neg { -v } else { v })
}

/// Answer equivalence: exact rational equality when both sides parse as
/// numbers, otherwise exact string equality after normalisation.
pub fn answers_match(predicted: &str, gold: &str) -> bool {
    let (p, g) = (normalize_answer(predicted), normalize_answer(gold));
    match (parse_rational(p), parse_rational(g)) {
        (Some(a), Some(b)) => a == b,
        _ => p == g,
    }
}

/// Rule-based reward: 1 iff the trajectory's final boxed answer matches `gold`.
pub fn compute_reward(traj: &Trajectory, gold: &str) -> u8 {
    let answer = traj.final_answer.clone().or_else(|| {
        traj.last_thought()
            .and_then(|t| extract_final_answer(&t.text))
    });
    match answer {
        Some(a) if answers_match(&a, gold) => 1,
        _ => 0,
    }
}

// ---------------------------------------------------------------------------
// Advantages and filtering
// ---------------------------------------------------------------------------

/// `(r - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], adv_epsilon: f64) -> Result<Vec<f64>, RlError> {
    if rewards.len() < 2 {
        return Err(RlError::PreconditionViolation(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + adv_epsilon)).collect())
}

fn all_equal(rewards: &[u8]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

/// Dynamic filtering for the trajectory-level set.
///
/// Drops groups whose rewards are all equal, removes trajectories with any
/// failed execution, and recomputes advantages over the survivors. A group
/// left with fewer than two survivors, or with equal surviving rewards, is
/// dropped. Failed trajectories remain available to the step-level dataset
/// through the unfiltered input.
pub fn dynamic_filter(groups: &[GroupRollout], adv_epsilon: f64) -> Vec<GroupRollout> {
    groups
        .iter()
        .filter(|g| !all_equal(&g.rewards))
        .filter_map(|g| {
            let keep: Vec<usize> = (0..g.len())
                .filter(|&i| !g.trajectories[i].trajectory.has_failed_execution())
                .collect();
            let rewards: Vec<u8> = keep.iter().map(|&i| g.rewards[i]).collect();
            if keep.len() < 2 || all_equal(&rewards) {
                return None;
            }
            let as_f64: Vec<f64> = rewards.iter().map(|&r| f64::from(r)).collect();
            let advantages = group_advantages(&as_f64, adv_epsilon).ok()?;
            Some(GroupRollout {
                query_id: g.query_id.clone(),
                query: g.query.clone(),
                gold_answer: g.gold_answer.clone(),
                trajectories: keep.iter().map(|&i| g.trajectories[i].clone()).collect(),
                rewards,
                advantages: Some(advantages),
                sample_ids: keep.iter().map(|&i| g.sample_ids[i].clone()).collect(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// `min(ratio * A, clamp(ratio, 1 - eps_low, 1 + eps_high) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> Result<f64, RlError> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(RlError::DomainError(format!("ratio must be positive and finite, got {ratio}")));
    }
    let clamped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    Ok((ratio * advantage).min(clamped * advantage))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Trajectory,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub sample_id: String,
    pub level: Level,
    pub tokens: Vec<TokenRecord>,
    pub advantage: f64,
    pub reward: u8,
    /// Member of the positive set used by the NLL term (advantage > 0).
    pub in_nll_set: bool,
}

impl TrainingRecord {
    pub fn new(
        sample_id: impl Into<String>,
        level: Level,
        tokens: Vec<TokenRecord>,
        advantage: f64,
        reward: u8,
    ) -> Self {
        TrainingRecord {
            sample_id: sample_id.into(),
            level,
            tokens,
            advantage,
            reward,
            in_nll_set: advantage > 0.0,
        }
    }

    pub fn model_tokens(&self) -> impl Iterator<Item = &TokenRecord> {
        self.tokens.iter().filter(|t| t.is_model())
    }
}

/// Mean negative logprob over Model tokens of the positive set; 0 if empty.
pub fn nll_loss(records: &[TrainingRecord]) -> f64 {
    let (sum, count) = records
        .iter()
        .filter(|r| r.in_nll_set)
        .flat_map(|r| r.model_tokens())
        .fold((0.0, 0usize), |(s, c), t| (s + t.logprob_new, c + 1));
    if count == 0 {
        0.0
    } else {
        -sum / count as f64
    }
}

/// Group mean of per-sample token-averaged clipped terms over Model tokens.
pub fn surrogate_objective(group: &[TrainingRecord], cfg: &RlConfig) -> Result<f64, RlError> {
    if group.is_empty() {
        return Err(RlError::EmptyGroup);
    }
    let mut total = 0.0;
    for rec in group {
        let mut sum = 0.0;
        let mut count = 0usize;
        for tok in rec.model_tokens() {
            let ratio = (tok.logprob_new - tok.logprob_old).exp();
            sum += clipped_term(ratio, rec.advantage, cfg.eps_low, cfg.eps_high)?;
            count += 1;
        }
        if count == 0 {
            return Err(RlError::DegenerateSample(rec.sample_id.clone()));
        }
        total += sum / count as f64;
    }
    Ok(total / group.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub surrogate: f64,
    pub nll: f64,
    pub loss: f64,
}

pub fn level_loss(group: &[TrainingRecord], cfg: &RlConfig) -> Result<LossBreakdown, RlError> {
    let surrogate = surrogate_objective(group, cfg)?;
    let nll = nll_loss(group);
    Ok(LossBreakdown {
        surrogate,
        nll,
        loss: -surrogate + cfg.alpha * nll,
    })
}

pub fn trajectory_loss(group: &[TrainingRecord], cfg: &RlConfig) -> Result<f64, RlError> {
    level_loss(group, cfg).map(|b| b.loss)
}

/// Same functional form as [`trajectory_loss`], applied to a step-level group.
pub fn step_loss(group: &[TrainingRecord], cfg: &RlConfig) -> Result<f64, RlError> {
    level_loss(group, cfg).map(|b| b.loss)
}

pub fn combined_loss(traj_part: f64, step_part: f64) -> f64 {
    traj_part + step_part
}

// ---------------------------------------------------------------------------
// Step-level dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub sample_id: String,
    pub query: String,
    /// History up to and including the thought prefix; the prefix segment is
    /// omitted when empty.
    pub context: Vec<Segment>,
    pub origin_traj_id: String,
    /// 0-based ordinal of the failed Action in the origin trajectory.
    pub failed_action_index: usize,
    pub original_suffix: String,
}

impl StepSample {
    /// The thought prefix the regeneration continues from.
    pub fn prefix(&self) -> &str {
        let ends_with_prefix = self.context.last().is_some_and(|s| s.kind == SegmentKind::Thought);
        if ends_with_prefix {
            &self.context[self.context.len() - 1].text
        } else {
            ""
        }
    }
}

/// One step sample per failed Action across the given trajectories.
pub fn build_step_dataset(
    trajectories: &[(String, &Trajectory)],
    suffix_len: usize,
    unit: &PartitionUnit,
) -> Result<Vec<StepSample>, RlError> {
    if suffix_len == 0 {
        return Err(RlError::PreconditionViolation("suffix_len must be >= 1".into()));
    }
    let mut out = Vec::new();
    for (traj_id, traj) in trajectories {
        let mut ordinal = 0usize;
        for (pos, seg) in traj.segments.iter().enumerate() {
            if seg.kind != SegmentKind::Action {
                continue;
            }
            let failed = traj
                .segments
                .get(pos + 1)
                .is_some_and(|o| !o.exec_status.is_some_and(|s| s.is_success()));
            if failed && pos >= 1 {
                let thought = &traj.segments[pos - 1];
                let (prefix, suffix) = partition_step(&thought.text, suffix_len, unit)
                    .map_err(|e| RlError::PreconditionViolation(e.to_string()))?;
                let mut context = traj.segments[..pos - 1].to_vec();
                if !prefix.is_empty() {
                    context.push(Segment::thought(prefix));
                }
                out.push(StepSample {
                    sample_id: format!("{traj_id}/step/{ordinal}"),
                    query: traj.query.clone(),
                    context,
                    origin_traj_id: traj_id.clone(),
                    failed_action_index: ordinal,
                    original_suffix: suffix.to_string(),
                });
            }
            ordinal += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRollout {
    pub suffix: String,
    pub action: Option<String>,
    pub result: Option<ExecutionResult>,
    pub reward: u8,
    /// The regeneration contained no code block.
    pub no_action: bool,
    pub tokens: Vec<TokenRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGroup {
    pub sample: StepSample,
    pub rollouts: Vec<StepRollout>,
    /// All rewards equal; dropped from the step-level loss.
    pub degenerate: bool,
}

impl StepGroup {
    pub fn rewards(&self) -> Vec<u8> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

fn regenerate_once(
    sample: &StepSample,
    instruction: &str,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
) -> StepRollout {
    let req = GenerationRequest::new(
        continuation_messages(instruction, &sample.query, &sample.context),
        limits.max_total_tokens.clamp(1, u32::MAX as usize) as u32,
    )
    .with_temperature(limits.temperature)
    .with_stop(&[CODE_CLOSE]);
    let gen = match client.generate(&req) {
        Ok(g) => g,
        Err(_) => {
            return StepRollout {
                suffix: String::new(),
                action: None,
                result: None,
                reward: 0,
                no_action: true,
                tokens: Vec::new(),
            }
        }
    };
    let step = parse_generation(&gen);
    let mut tokens = step.thought_records;
    match step.action {
        Some(action) => {
            let result = executor.run_code(&action.code);
            tokens.extend(action.records);
            let obs = Segment::observation(format_observation(&result), result.status).render();
            tokens.push(TokenRecord::injected(OBS_OPEN));
            tokens.push(TokenRecord::injected(&obs[OBS_OPEN.len()..obs.len() - OBS_CLOSE.len()]));
            tokens.push(TokenRecord::injected(OBS_CLOSE));
            tokens.retain(|t| !t.token_text.is_empty());
            StepRollout {
                suffix: step.thought,
                action: Some(action.code),
                reward: u8::from(result.status.is_success()),
                result: Some(result),
                no_action: false,
                tokens,
            }
        }
        None => StepRollout {
            suffix: step.thought,
            action: None,
            result: None,
            reward: 0,
            no_action: true,
            tokens,
        },
    }
}

/// Draws `group_size` regenerations of suffix plus action for one step sample.
/// Reward is execution success; a regeneration without code scores 0.
pub fn step_rollout(
    sample: &StepSample,
    group_size: usize,
    instruction: &str,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
) -> Result<StepGroup, RlError> {
    if group_size < 2 {
        return Err(RlError::PreconditionViolation(format!(
            "step group size must be >= 2, got {group_size}"
        )));
    }
    let one = |_| regenerate_once(sample, instruction, client, executor, limits);
    let rollouts: Vec<StepRollout> = if limits.parallelism <= 1 {
        (0..group_size).map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(limits.parallelism)
            .build()
            .map_err(|e| RlError::PreconditionViolation(e.to_string()))?;
        pool.install(|| (0..group_size).into_par_iter().map(one).collect())
    };
    let rewards: Vec<u8> = rollouts.iter().map(|r| r.reward).collect();
    Ok(StepGroup {
        sample: sample.clone(),
        degenerate: all_equal(&rewards),
        rollouts,
    })
}

// ---------------------------------------------------------------------------
// Training records
// ---------------------------------------------------------------------------

/// Trajectory-level records from groups that passed [`dynamic_filter`].
pub fn trajectory_records(filtered: &[GroupRollout]) -> Result<Vec<Vec<TrainingRecord>>, RlError> {
    filtered
        .iter()
        .map(|g| {
            let adv = g.advantages.as_ref().ok_or_else(|| {
                RlError::PreconditionViolation(format!("group {} has no advantages", g.query_id))
            })?;
            Ok((0..g.len())
                .map(|i| {
                    TrainingRecord::new(
                        g.sample_ids[i].clone(),
                        Level::Trajectory,
                        g.trajectories[i].records.clone(),
                        adv[i],
                        g.rewards[i],
                    )
                })
                .collect())
        })
        .collect()
}

/// Step-level records from non-degenerate step groups.
pub fn step_records(groups: &[StepGroup], adv_epsilon: f64) -> Result<Vec<Vec<TrainingRecord>>, RlError> {
    groups
        .iter()
        .filter(|g| !g.degenerate)
        .map(|g| {
            let rewards: Vec<f64> = g.rollouts.iter().map(|r| f64::from(r.reward)).collect();
            let adv = group_advantages(&rewards, adv_epsilon)?;
            Ok(g.rollouts
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    TrainingRecord::new(
                        format!("{}/{}", g.sample.sample_id, i),
                        Level::Step,
                        r.tokens.clone(),
                        adv[i],
                        r.reward,
                    )
                })
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedToken {
    pub text: String,
    pub origin: crate::trajectory::Origin,
    pub logprob_old: f64,
}

/// Line format of the training-record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedRecord {
    pub sample_id: String,
    pub level: Level,
    pub advantage: f64,
    pub reward: u8,
    pub tokens: Vec<ExportedToken>,
    pub in_nll_set: bool,
}

impl From<&TrainingRecord> for ExportedRecord {
    fn from(r: &TrainingRecord) -> Self {
        ExportedRecord {
            sample_id: r.sample_id.clone(),
            level: r.level,
            advantage: r.advantage,
            reward: r.reward,
            tokens: r
                .tokens
                .iter()
                .map(|t| ExportedToken {
                    text: t.token_text.clone(),
                    origin: t.origin,
                    logprob_old: t.logprob_old,
                })
                .collect(),
            in_nll_set: r.in_nll_set,
        }
    }
}

/// Writes records one per line, trajectory level first, each level sorted by sample id.
pub fn export_training_records<W: Write>(records: &[TrainingRecord], out: W) -> std::io::Result<()> {
    let mut sorted: Vec<&TrainingRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        (a.level == Level::Step, &a.sample_id).cmp(&(b.level == Level::Step, &b.sample_id))
    });
    let exported: Vec<ExportedRecord> = sorted.into_iter().map(ExportedRecord::from).collect();
    crate::trajectory::write_jsonl(out, &exported)
}

/// Summary of a prepared batch: per-level mean losses over groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSummary {
    pub input_groups: usize,
    pub trajectory_groups: usize,
    pub step_samples: usize,
    pub step_groups: usize,
    pub trajectory: Option<LossBreakdown>,
    pub step: Option<LossBreakdown>,
    pub combined_loss: f64,
}

fn mean_breakdown(groups: &[Vec<TrainingRecord>], cfg: &RlConfig) -> Result<Option<LossBreakdown>, RlError> {
    if groups.is_empty() {
        return Ok(None);
    }
    let mut acc = LossBreakdown {
        surrogate: 0.0,
        nll: 0.0,
        loss: 0.0,
    };
    for g in groups {
        let b = level_loss(g, cfg)?;
        acc.surrogate += b.surrogate;
        acc.nll += b.nll;
        acc.loss += b.loss;
    }
    let n = groups.len() as f64;
    Ok(Some(LossBreakdown {
        surrogate: acc.surrogate / n,
        nll: acc.nll / n,
        loss: acc.loss / n,
    }))
}

pub fn summarize(
    input_groups: usize,
    step_samples: usize,
    traj_groups: &[Vec<TrainingRecord>],
    step_groups: &[Vec<TrainingRecord>],
    cfg: &RlConfig,
) -> Result<PreparedSummary, RlError> {
    let trajectory = mean_breakdown(traj_groups, cfg)?;
    let step = mean_breakdown(step_groups, cfg)?;
    Ok(PreparedSummary {
        input_groups,
        trajectory_groups: traj_groups.len(),
        step_samples,
        step_groups: step_groups.len(),
        combined_loss: combined_loss(
            trajectory.map_or(0.0, |b| b.loss),
            step.map_or(0.0, |b| b.loss),
        ),
        trajectory,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::MockClient;
    use crate::sandbox::ExecStatus;
    use crate::test_support::fake_python;
    use crate::trajectory::{Origin, Termination, TokenizedTrajectory};
    use proptest::prelude::*;

    fn cfg() -> RlConfig {
        RlConfig::default()
    }

    fn ratio(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    fn tok(origin: Origin, old: f64, new: f64) -> TokenRecord {
        TokenRecord {
            token_text: "t".into(),
            origin,
            logprob_old: old,
            logprob_new: new,
        }
    }

    fn rec(id: &str, adv: f64, tokens: Vec<TokenRecord>) -> TrainingRecord {
        TrainingRecord::new(id, Level::Trajectory, tokens, adv, u8::from(adv > 0.0))
    }

    fn answered(answer: &str) -> Trajectory {
        let mut t = Trajectory::new("q");
        t.push(Segment::thought(format!("so \\boxed{{{answer}}}"))).unwrap();
        t.finish(Termination::Answered).unwrap();
        t
    }

    #[test]
    fn reward_rule() {
        assert_eq!(compute_reward(&answered("42"), "42"), 1);
        assert_eq!(compute_reward(&answered("1/2"), "0.5"), 1);
        assert_eq!(compute_reward(&Trajectory::new("q"), "42"), 0);
        assert_eq!(compute_reward(&answered("\\frac{3}{4}"), "0.75"), 1);
        assert_eq!(compute_reward(&answered(" {x+1} "), "x+1"), 1);
        assert_eq!(compute_reward(&answered("0.333"), "1/3"), 0);
    }

    #[test]
    fn rational_oracle_half() {
        assert_eq!(parse_rational("1/2"), Some(ratio(1, 2)));
        assert_eq!(parse_rational("0.5"), Some(ratio(5, 10)));
        assert_eq!(parse_rational("-2.50"), Some(ratio(-5, 2)));
        assert_eq!(parse_rational("1/0"), None);
        assert_eq!(parse_rational("abc"), None);
        assert_eq!(parse_rational("."), None);
    }

    #[test]
    fn outer_braces_only_when_enclosing() {
        assert_eq!(normalize_answer("{a}{b}"), "{a}{b}");
        assert_eq!(normalize_answer("{{7}}"), "7");
    }

    #[test]
    fn advantages_examples() {
        let a = group_advantages(&[1.0, 0.0], 1e-8).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-7 && (a[1] + 1.0).abs() < 1e-7);
        assert_eq!(group_advantages(&[1.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        let b = group_advantages(&[1.0, 1.0, 0.0, 0.0], 1e-8).unwrap();
        assert!(b.iter().zip([1.0, 1.0, -1.0, -1.0]).all(|(x, y)| (x - y).abs() < 1e-7));
        assert!(matches!(
            group_advantages(&[1.0], 1e-8),
            Err(RlError::PreconditionViolation(_))
        ));
    }

    #[test]
    fn clipped_term_examples() {
        assert!((clipped_term(1.5, 1.0, 0.2, 0.28).unwrap() - 1.28).abs() < 1e-15);
        assert!((clipped_term(0.5, -1.0, 0.2, 0.28).unwrap() + 0.8).abs() < 1e-15);
        for a in [-3.0, -0.5, 0.0, 0.7, 2.0] {
            assert_eq!(clipped_term(1.0, a, 0.2, 0.28).unwrap(), a);
        }
        assert!(matches!(clipped_term(0.0, 1.0, 0.2, 0.28), Err(RlError::DomainError(_))));
        assert!(clipped_term(-1.0, 1.0, 0.2, 0.28).is_err());
    }

    #[test]
    fn nll_examples() {
        let one = rec("a", 1.0, vec![tok(Origin::Model, -0.5, -0.5), tok(Origin::Model, -1.5, -1.5)]);
        assert_eq!(nll_loss(&[one]), 1.0);
        assert_eq!(nll_loss(&[rec("n", -1.0, vec![tok(Origin::Model, -1.0, -1.0)])]), 0.0);
        let two = [
            rec("a", 0.5, vec![tok(Origin::Model, -1.0, -1.0)]),
            rec("b", 0.5, vec![tok(Origin::Model, -3.0, -3.0)]),
        ];
        assert_eq!(nll_loss(&two), 2.0);
    }

    #[test]
    fn surrogate_examples() {
        let c = cfg();
        let g1 = [rec("a", 1.0, vec![tok(Origin::Model, -1.0, -1.0), tok(Origin::Model, -2.0, -2.0)])];
        assert_eq!(surrogate_objective(&g1, &c).unwrap(), 1.0);
        let r15 = 1.5f64.ln();
        let g2 = [rec("a", 1.0, vec![tok(Origin::Model, -1.0, -1.0 + r15)])];
        assert!((surrogate_objective(&g2, &c).unwrap() - 1.28).abs() < 1e-12);
        let r05 = 0.5f64.ln();
        let g3 = [
            rec("a", 1.0, vec![tok(Origin::Model, -1.0, -1.0 + r15)]),
            rec("b", -1.0, vec![tok(Origin::Model, -1.0, -1.0 + r05)]),
        ];
        assert!((surrogate_objective(&g3, &c).unwrap() - 0.24).abs() < 1e-12);
        let empty = [rec("z", 1.0, vec![tok(Origin::Injected, -1.0, -1.0)])];
        assert!(matches!(surrogate_objective(&empty, &c), Err(RlError::DegenerateSample(_))));
        assert!(matches!(surrogate_objective(&[], &c), Err(RlError::EmptyGroup)));
    }

    #[test]
    fn trajectory_loss_examples() {
        let c = cfg();
        // surrogate 1.0 and nll 1.0
        let g = [rec("a", 1.0, vec![tok(Origin::Model, -1.0, -1.0)])];
        assert!((trajectory_loss(&g, &c).unwrap() + 0.99).abs() < 1e-12);
        let b = level_loss(&g, &c).unwrap();
        assert_eq!((b.surrogate, b.nll), (1.0, 1.0));
        // empty positive set, surrogate 0.24 obtained with negative advantages only
        let r = 0.76f64.ln();
        let neg = [
            rec("x", -1.0, vec![tok(Origin::Model, -1.0, -1.0 + r)]),
            rec("y", -1.0, vec![tok(Origin::Model, -1.0, -1.0 + r)]),
            rec("z", -1.0, vec![tok(Origin::Model, -1.0, -1.0 + r)]),
        ];
        let s = surrogate_objective(&neg, &c).unwrap();
        assert!((trajectory_loss(&neg, &c).unwrap() + s).abs() < 1e-15);
        let alpha0 = RlConfig { alpha: 0.0, ..cfg() };
        assert_eq!(trajectory_loss(&g, &alpha0).unwrap(), -1.0);
        assert_eq!(step_loss(&g, &c).unwrap(), trajectory_loss(&g, &c).unwrap());
    }

    #[test]
    fn combined_is_additive() {
        assert!((combined_loss(-0.99, -0.5) + 1.49).abs() < 1e-15);
        assert_eq!(combined_loss(0.3, 0.0), 0.3);
        assert_eq!(combined_loss(0.3, 0.7), combined_loss(0.7, 0.3));
    }

    fn traj_with_actions(statuses: &[ExecStatus], thought: &str) -> Trajectory {
        let mut t = Trajectory::new("q");
        for s in statuses {
            t.push(Segment::thought(thought)).unwrap();
            t.push(Segment::action("print(1)")).unwrap();
            t.push(Segment::observation("x", *s)).unwrap();
        }
        t.push(Segment::thought("\\boxed{1}")).unwrap();
        t.finish(Termination::Answered).unwrap();
        t
    }

    #[test]
    fn step_dataset_one_sample_per_failure() {
        use ExecStatus::*;
        let t = traj_with_actions(&[Success, Exception, Success, Timeout], "a b c d e");
        let ds = build_step_dataset(&[("t0".into(), &t)], 2, &PartitionUnit::WhitespaceToken).unwrap();
        assert_eq!(ds.iter().map(|s| s.failed_action_index).collect::<Vec<_>>(), vec![1, 3]);
        assert_eq!(ds[0].prefix(), "a b c ");
        assert_eq!(ds[0].original_suffix, "d e");
        assert_eq!(ds[0].context.len(), 4);
        let none = traj_with_actions(&[Success], "x");
        assert!(build_step_dataset(&[("n".into(), &none)], 2, &PartitionUnit::WhitespaceToken)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn short_step_gives_empty_prefix() {
        let t = traj_with_actions(&[ExecStatus::Success, ExecStatus::Exception], "short");
        let ds = build_step_dataset(&[("t".into(), &t)], 128, &PartitionUnit::WhitespaceToken).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].prefix(), "");
        assert_eq!(ds[0].context.last().unwrap().kind, SegmentKind::Observation);
        assert_eq!(ds[0].original_suffix, "short");
    }

    fn group(rewards: &[u8], failed: &[usize]) -> GroupRollout {
        let trajectories = rewards
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let status = if failed.contains(&i) {
                    ExecStatus::Exception
                } else {
                    ExecStatus::Success
                };
                TokenizedTrajectory::uniform(traj_with_actions(&[status], "think"), -1.0)
            })
            .collect();
        GroupRollout {
            query_id: "g".into(),
            query: "q".into(),
            gold_answer: "1".into(),
            trajectories,
            rewards: rewards.to_vec(),
            advantages: None,
            sample_ids: (0..rewards.len()).map(|i| format!("g/{i}")).collect(),
        }
    }

    #[test]
    fn dynamic_filter_examples() {
        assert!(dynamic_filter(&[group(&[1, 1, 1, 1], &[])], 1e-8).is_empty());
        let kept = dynamic_filter(&[group(&[1, 0, 1, 0], &[2])], 1e-8);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].sample_ids, vec!["g/0", "g/1", "g/3"]);
        assert_eq!(kept[0].rewards, vec![1, 0, 0]);
        let expect = group_advantages(&[1.0, 0.0, 0.0], 1e-8).unwrap();
        assert_eq!(kept[0].advantages.as_ref().unwrap(), &expect);
        let plain = dynamic_filter(&[group(&[1, 0], &[])], 1e-8);
        assert_eq!(plain[0].rewards, vec![1, 0]);
        assert_eq!(plain[0].sample_ids, vec!["g/0", "g/1"]);
        // one survivor left
        assert!(dynamic_filter(&[group(&[1, 0], &[1])], 1e-8).is_empty());
    }

    #[test]
    fn step_rollout_rewards_follow_execution() {
        let sample = StepSample {
            sample_id: "t/step/0".into(),
            query: "q".into(),
            context: vec![Segment::thought("so we ")],
            origin_traj_id: "t".into(),
            failed_action_index: 0,
            original_suffix: "divide".into(),
        };
        let client = MockClient::scripted([
            "add.\n```python\nprint(1+1)\n```\n",
            "add.\n```python\nprint(2+2)\n```\n",
            "divide.\n```python\n1/0\n```\n",
            "divide.\n```python\nx=1/0\n```\n",
        ]);
        let g = step_rollout(&sample, 4, "", &client, &fake_python(), &RolloutLimits::default()).unwrap();
        assert_eq!(g.rewards(), vec![1, 1, 0, 0]);
        assert!(!g.degenerate);
        assert_eq!(client.transcript()[0].partial_assistant(), Some("so we "));

        let client = MockClient::scripted(["I give up.", "I give up."]);
        let g = step_rollout(&sample, 2, "", &client, &fake_python(), &RolloutLimits::default()).unwrap();
        assert!(g.rollouts.iter().all(|r| r.no_action && r.reward == 0));
        assert!(g.degenerate);
        assert!(step_records(&[g], 1e-8).unwrap().is_empty());
    }

    #[test]
    fn export_is_sorted_and_masks_nothing_away() {
        let recs = vec![
            TrainingRecord::new("b", Level::Step, vec![tok(Origin::Model, -1.0, -1.0)], 1.0, 1),
            TrainingRecord::new("z", Level::Trajectory, vec![tok(Origin::Injected, 0.0, 0.0)], -1.0, 0),
            TrainingRecord::new("a", Level::Trajectory, vec![tok(Origin::Model, -0.5, -0.5)], 1.0, 1),
        ];
        let mut buf = Vec::new();
        export_training_records(&recs, &mut buf).unwrap();
        let lines: Vec<ExportedRecord> = crate::trajectory::read_jsonl(buf.as_slice()).unwrap();
        let ids: Vec<&str> = lines.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "z", "b"]);
        let v: serde_json::Value = serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        for k in ["sample_id", "level", "advantage", "reward", "tokens", "in_nll_set"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        for k in ["text", "origin", "logprob_old"] {
            assert!(v["tokens"][0].get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(RlConfig { eps_low: 1.0, ..cfg() }.validate().is_err());
        assert!(RlConfig { alpha: -0.1, ..cfg() }.validate().is_err());
        assert!(RlConfig { eps_high: 0.0, ..cfg() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn advantages_are_centered_and_unit_scale(rewards in prop::collection::vec(0u8..2, 2..40)) {
            let r: Vec<f64> = rewards.iter().map(|&x| f64::from(x)).collect();
            let a = group_advantages(&r, 1e-8).unwrap();
            let n = a.len() as f64;
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9 * n);
            if !all_equal(&rewards) {
                let var = a.iter().map(|x| x * x).sum::<f64>() / n;
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn clipped_term_bounds(ratio in 0.01f64..5.0, adv in -5.0f64..5.0) {
            let v = clipped_term(ratio, adv, 0.2, 0.28).unwrap();
            let clamped = ratio.clamp(0.8, 1.28);
            if adv > 0.0 { prop_assert!(v <= ratio * adv); }
            if adv < 0.0 { prop_assert!(v <= clamped * adv); }
            if (0.8..=1.28).contains(&ratio) { prop_assert_eq!(v, ratio * adv); }
        }

        #[test]
        fn unit_ratio_alpha_zero_is_negative_mean_advantage(
            advs in prop::collection::vec(-2.0f64..2.0, 1..10),
            lens in prop::collection::vec(1usize..6, 10),
        ) {
            let group: Vec<TrainingRecord> = advs.iter().enumerate().map(|(i, &a)| {
                rec(&i.to_string(), a, (0..lens[i]).map(|_| tok(Origin::Model, -0.7, -0.7)).collect())
            }).collect();
            let c = RlConfig { alpha: 0.0, ..cfg() };
            let mean = advs.iter().sum::<f64>() / advs.len() as f64;
            prop_assert!((trajectory_loss(&group, &c).unwrap() + mean).abs() < 1e-12);
        }
    }
}
