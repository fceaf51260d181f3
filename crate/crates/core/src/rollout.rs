//! Think-act-observe rollouts for single trajectories and GRPO groups.
//!
//! One driver serves both plain rollouts and self-correcting inference: with
//! correction disabled it is exactly the plain loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::client::{ClientError, FinishReason, Generation, GenerationRequest, LlmClient, Message};
use crate::inference::CorrectionConfig;
use crate::rl::compute_reward;
use crate::sandbox::{format_observation, ExecStatus, ExecutionResult, Executor};
use crate::trajectory::{
    extract_final_answer, find_code_block, partition_step, Segment, SegmentKind, Termination,
    TokenRecord, TokenizedTrajectory, Trajectory, CODE_CLOSE, OBS_CLOSE, OBS_OPEN,
};

pub const DEFAULT_GROUP_SIZE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutLimits {
    pub max_code_rounds: usize,
    /// Budget of generated tokens across all calls of one trajectory.
    pub max_total_tokens: usize,
    pub stop_on_answer: bool,
    pub temperature: f64,
    /// Trajectories of a group generated concurrently.
    pub parallelism: usize,
}

impl Default for RolloutLimits {
    fn default() -> Self {
        RolloutLimits {
            max_code_rounds: 5,
            max_total_tokens: 4096,
            stop_on_answer: true,
            temperature: 1.0,
            parallelism: 1,
        }
    }
}

impl RolloutLimits {
    /// Limits for long-context reasoning models.
    pub fn reasoning() -> Self {
        RolloutLimits {
            max_total_tokens: 16_384,
            ..RolloutLimits::default()
        }
    }
}

/// Execution bookkeeping for one round where an Action failed at least once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStep {
    /// 0-based index of the round (Action ordinal).
    pub round: usize,
    pub attempts: u32,
    pub executions: u32,
    pub succeeded: bool,
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub tokenized: TokenizedTrajectory,
    pub generated_tokens: usize,
    /// Executions including discarded correction attempts.
    pub executions: u32,
    pub successful_executions: u32,
    pub corrections: Vec<CorrectionStep>,
    pub client_error: Option<ClientError>,
}

impl RolloutOutcome {
    pub fn trajectory(&self) -> &Trajectory {
        &self.tokenized.trajectory
    }
}

/// Trajectory under construction with per-segment token records.
struct Builder {
    traj: Trajectory,
    records: Vec<Vec<TokenRecord>>,
}

impl Builder {
    fn new(query: &str) -> Self {
        Builder {
            traj: Trajectory::new(query),
            records: Vec::new(),
        }
    }

    fn push(&mut self, seg: Segment, records: Vec<TokenRecord>) {
        self.traj
            .push(seg)
            .expect("driver appends segments in alternation order");
        self.records.push(records);
    }

    fn push_observation(&mut self, result: &ExecutionResult, attempt: u32) {
        let obs = Segment::observation(format_observation(result), result.status)
            .with_attempt(attempt);
        let rendered = obs.render();
        let body_end = rendered.len() - OBS_CLOSE.len();
        let records = vec![
            TokenRecord::injected(OBS_OPEN),
            TokenRecord::injected(&rendered[OBS_OPEN.len()..body_end]),
            TokenRecord::injected(OBS_CLOSE),
        ]
        .into_iter()
        .filter(|r| !r.token_text.is_empty())
        .collect();
        self.push(obs, records);
    }

    fn finish(mut self, termination: Termination) -> TokenizedTrajectory {
        let termination = match termination {
            Termination::Answered
                if self
                    .traj
                    .last_thought()
                    .and_then(|t| extract_final_answer(&t.text))
                    .is_none() =>
            {
                Termination::Unanswered
            }
            t => t,
        };
        self.traj
            .finish(termination)
            .expect("termination checked against last thought");
        TokenizedTrajectory {
            trajectory: self.traj,
            records: self.records.into_iter().flatten().collect(),
        }
    }
}

/// Records for the byte range `[start, end)` of the text covered by `records`.
/// A token cut by the range keeps its logprob on the piece holding its first
/// byte; other pieces carry 0.0.
pub(crate) fn slice_records(records: &[TokenRecord], start: usize, end: usize) -> Vec<TokenRecord> {
    let mut out = Vec::new();
    let mut offset = 0;
    for rec in records {
        let len = rec.token_text.len();
        let (lo, hi) = (start.max(offset), end.min(offset + len));
        if lo < hi {
            let lp_keep = lo == offset;
            let piece = &rec.token_text[lo - offset..hi - offset];
            out.push(TokenRecord {
                token_text: piece.to_string(),
                origin: rec.origin,
                logprob_old: if lp_keep { rec.logprob_old } else { 0.0 },
                logprob_new: if lp_keep { rec.logprob_new } else { 0.0 },
            });
        }
        offset += len;
        if offset >= end {
            break;
        }
    }
    out
}

/// A generation split into its thought and optional action.
pub(crate) struct ParsedStep {
    pub thought: String,
    pub thought_records: Vec<TokenRecord>,
    pub action: Option<ParsedAction>,
    pub finish_reason: FinishReason,
}

pub(crate) struct ParsedAction {
    pub code: String,
    pub text: String,
    pub records: Vec<TokenRecord>,
}

pub(crate) fn parse_generation(gen: &Generation) -> ParsedStep {
    let text = &gen.text;
    let records = gen.token_records();
    match find_code_block(text) {
        None => ParsedStep {
            thought: text.clone(),
            thought_records: records,
            action: None,
            finish_reason: gen.finish_reason,
        },
        // A block cut off by the length cap is incomplete: keep only the thought.
        Some(span) if !span.closed && gen.finish_reason == FinishReason::Length => ParsedStep {
            thought: text[..span.fence_start].to_string(),
            thought_records: slice_records(&records, 0, span.fence_start),
            action: None,
            finish_reason: gen.finish_reason,
        },
        Some(span) => {
            let code = text[span.body.clone()].to_string();
            let mut action_text = text[span.fence_start..span.generated_end].to_string();
            let mut action_records = slice_records(&records, span.fence_start, span.generated_end);
            let mut tail = String::new();
            if span.closed {
                if !action_text.ends_with('\n') {
                    tail.push('\n');
                }
            } else {
                if !code.ends_with('\n') {
                    tail.push('\n');
                }
                tail.push_str(CODE_CLOSE);
            }
            if !tail.is_empty() {
                action_text.push_str(&tail);
                action_records.push(TokenRecord::injected(tail));
            }
            ParsedStep {
                thought: text[..span.fence_start].to_string(),
                thought_records: slice_records(&records, 0, span.fence_start),
                action: Some(ParsedAction {
                    code,
                    text: action_text,
                    records: action_records,
                }),
                finish_reason: gen.finish_reason,
            }
        }
    }
}

/// Messages for continuing a response whose text so far is `segments`.
pub fn continuation_messages(instruction: &str, query: &str, segments: &[Segment]) -> Vec<Message> {
    let mut messages = Vec::with_capacity(3);
    if !instruction.is_empty() {
        messages.push(Message::system(instruction));
    }
    messages.push(Message::user(query));
    let partial = crate::trajectory::render_segments(segments);
    if !partial.is_empty() {
        messages.push(Message::assistant(partial));
    }
    messages
}

fn action_request(instruction: &str, query: &str, context: &[Segment], budget: usize, limits: &RolloutLimits) -> GenerationRequest {
    GenerationRequest::new(
        continuation_messages(instruction, query, context),
        budget.clamp(1, u32::MAX as usize) as u32,
    )
    .with_temperature(limits.temperature)
    .with_stop(&[CODE_CLOSE])
}

/// Drives the think-act-observe loop, optionally backtracking on failed actions.
pub(crate) fn drive(
    query: &str,
    instruction: &str,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
    correction: Option<&CorrectionConfig>,
) -> RolloutOutcome {
    let mut b = Builder::new(query);
    let mut used = 0usize;
    let mut rounds = 0usize;
    let mut executions = 0u32;
    let mut successes = 0u32;
    let mut corrections = Vec::new();
    let mut client_error = None;
    let max_attempts = correction.map_or(0, |c| c.max_attempts);

    let termination = 'outer: loop {
        if used >= limits.max_total_tokens {
            break Termination::ContextLimit;
        }
        let req = action_request(instruction, query, &b.traj.segments, limits.max_total_tokens - used, limits);
        let gen = match client.generate(&req) {
            Ok(g) => g,
            Err(e) => {
                client_error = Some(e);
                break Termination::ClientError;
            }
        };
        used += gen.token_count();
        let step = parse_generation(&gen);
        let final_round = rounds >= limits.max_code_rounds;
        let answered_early = limits.stop_on_answer && extract_final_answer(&step.thought).is_some();

        let action = match step.action {
            Some(a) if !final_round && !answered_early => a,
            _ => {
                b.push(Segment::thought(step.thought.clone()), step.thought_records);
                break conclude(&step.thought, step.finish_reason, final_round);
            }
        };

        let mut thought = step.thought;
        let mut thought_records = step.thought_records;
        let mut action = action;
        let mut result = executor.run_code(&action.code);
        let mut step_execs = 1u32;
        let mut attempt = 0u32;

        if !result.status.is_success() && max_attempts > 0 {
            let corr = correction.expect("max_attempts > 0 implies a correction config");
            let (prefix, _) = partition_step(&thought, corr.suffix_len.max(1), &corr.unit)
                .expect("suffix_len clamped to >= 1");
            let prefix = prefix.to_string();
            let prefix_records = slice_records(&thought_records, 0, prefix.len());
            let mut context = b.traj.segments.clone();
            if !prefix.is_empty() {
                context.push(Segment::thought(prefix.clone()));
            }
            while !result.status.is_success() && attempt < max_attempts {
                if used >= limits.max_total_tokens {
                    break;
                }
                attempt += 1;
                let req = action_request(instruction, query, &context, limits.max_total_tokens - used, limits);
                let gen = match client.generate(&req) {
                    Ok(g) => g,
                    Err(e) => {
                        client_error = Some(e);
                        attempt -= 1;
                        break;
                    }
                };
                used += gen.token_count();
                let regen = parse_generation(&gen);
                let mut new_thought = prefix.clone();
                new_thought.push_str(&regen.thought);
                let mut new_records = prefix_records.clone();
                new_records.extend(regen.thought_records);
                let regen_answered =
                    limits.stop_on_answer && extract_final_answer(&new_thought).is_some();
                match regen.action {
                    Some(a) if !regen_answered => {
                        thought = new_thought;
                        thought_records = new_records;
                        action = a;
                        result = executor.run_code(&action.code);
                        step_execs += 1;
                    }
                    _ => {
                        // The regeneration dropped the tool call: it replaces r^t as a plain thought.
                        executions += step_execs;
                        corrections.push(CorrectionStep {
                            round: rounds,
                            attempts: attempt,
                            executions: step_execs,
                            succeeded: false,
                            exhausted: false,
                        });
                        b.push(Segment::thought(new_thought.clone()).with_attempt(attempt), new_records);
                        break 'outer conclude(&new_thought, regen.finish_reason, false);
                    }
                }
            }
            corrections.push(CorrectionStep {
                round: rounds,
                attempts: attempt,
                executions: step_execs,
                succeeded: result.status.is_success(),
                exhausted: !result.status.is_success() && attempt == max_attempts,
            });
        }

        executions += step_execs;
        if result.status.is_success() {
            successes += 1;
        }
        b.push(Segment::thought(thought).with_attempt(attempt), thought_records);
        b.push(
            Segment {
                kind: SegmentKind::Action,
                text: action.text,
                attempt_index: attempt,
                exec_status: None,
            },
            action.records,
        );
        b.push_observation(&result, attempt);
        rounds += 1;
        if client_error.is_some() {
            break Termination::ClientError;
        }
    };

    RolloutOutcome {
        tokenized: b.finish(termination),
        generated_tokens: used,
        executions,
        successful_executions: successes,
        corrections,
        client_error,
    }
}

fn conclude(thought: &str, finish: FinishReason, final_round: bool) -> Termination {
    if extract_final_answer(thought).is_some() {
        Termination::Answered
    } else if final_round {
        Termination::RoundLimit
    } else if finish == FinishReason::Length {
        Termination::ContextLimit
    } else {
        Termination::Unanswered
    }
}

/// Runs one trajectory and keeps its token records.
pub fn run_trajectory_tokenized(
    query: &str,
    instruction: &str,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
) -> RolloutOutcome {
    drive(query, instruction, client, executor, limits, None)
}

pub fn run_trajectory(
    query: &str,
    instruction: &str,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
) -> Trajectory {
    run_trajectory_tokenized(query, instruction, client, executor, limits)
        .tokenized
        .trajectory
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub query_id: String,
    pub query: String,
    pub gold_answer: String,
    pub trajectories: Vec<TokenizedTrajectory>,
    pub rewards: Vec<u8>,
    /// Filled by the RL data plane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantages: Option<Vec<f64>>,
    pub sample_ids: Vec<String>,
}

impl GroupRollout {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn check_lengths(&self) -> bool {
        let g = self.trajectories.len();
        self.rewards.len() == g
            && self.sample_ids.len() == g
            && self.advantages.as_ref().is_none_or(|a| a.len() == g)
    }
}

pub struct GroupSpec<'a> {
    pub query_id: &'a str,
    pub query: &'a str,
    pub gold: &'a str,
    pub instruction: &'a str,
    pub group_size: usize,
}

/// Samples `group_size` trajectories for one query and scores them.
pub fn run_group(
    spec: &GroupSpec<'_>,
    client: &dyn LlmClient,
    executor: &dyn Executor,
    limits: &RolloutLimits,
) -> Result<GroupRollout, RolloutError> {
    if spec.group_size < 2 {
        return Err(RolloutError::PreconditionViolation(format!(
            "group size must be >= 2, got {}",
            spec.group_size
        )));
    }
    let one = |i: usize| {
        let out = run_trajectory_tokenized(spec.query, spec.instruction, client, executor, limits);
        let traj = out.trajectory();
        info!(
            query_id = spec.query_id,
            traj_index = i,
            rounds = traj.action_count(),
            termination = ?traj.termination,
            "rollout finished"
        );
        out.tokenized
    };
    let trajectories: Vec<TokenizedTrajectory> = if limits.parallelism <= 1 {
        (0..spec.group_size).map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(limits.parallelism)
            .build()
            .map_err(|e| RolloutError::PreconditionViolation(e.to_string()))?;
        pool.install(|| (0..spec.group_size).into_par_iter().map(one).collect())
    };
    let rewards = trajectories
        .iter()
        .map(|t| compute_reward(&t.trajectory, spec.gold))
        .collect();
    let sample_ids = (0..spec.group_size)
        .map(|i| format!("{}/{}", spec.query_id, i))
        .collect();
    Ok(GroupRollout {
        query_id: spec.query_id.to_string(),
        query: spec.query.to_string(),
        gold_answer: spec.gold.to_string(),
        trajectories,
        rewards,
        advantages: None,
        sample_ids,
    })
}

/// Number of failed executions in a trajectory.
pub fn failed_executions(traj: &Trajectory) -> usize {
    traj.observations()
        .filter(|o| !o.exec_status.is_some_and(ExecStatus::is_success))
        .count()
}
