//! Actor-critic synthesis of tool-integrated reasoning data and the
//! multi-stage filter producing the cold-start dataset.
//!
//! The actor writes natural-language steps. The critic sees one isolated
//! step at a time, never the question or its answer: it decides whether the
//! step holds a computation worth delegating, extracts the reasoning from
//! it, and writes the code. The executor's output replaces the computation.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::client::{ClientError, FinishReason, GenerationRequest, LlmClient, Message};
use crate::rl::answers_match;
use crate::rollout::continuation_messages;
use crate::sandbox::{format_observation, Executor};
use crate::trajectory::{
    code_body, extract_final_answer, find_code_block, PartitionUnit, Segment, SegmentKind,
    Termination, Trajectory,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TirGenError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("cannot parse critic verdict {0:?}")]
    JudgeParseError(String),
    #[error("critic returned empty logic")]
    EmptyLogic,
    #[error("critic reply has no fenced code block")]
    NoCodeBlock,
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("invalid tirgen config: {0}")]
    InvalidConfig(String),
}

/// Prompt templates. `{step}` and `{logic}` are substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prompts {
    pub actor_system: String,
    pub judge: String,
    pub extract: String,
    pub convert: String,
    pub baseline_system: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Prompts {
            actor_system: "Solve the math problem step by step. Separate steps with a blank line. \
                           Put the final answer in \\boxed{}."
                .into(),
            judge: "Below is one step of a math solution.\n\n{step}\n\n\
                    Does this step contain a calculation, equation solving or symbolic \
                    manipulation that could be done easily and more reliably with Python code? \
                    Answer with yes or no only."
                .into(),
            extract: "Below is one step of a math solution.\n\n{step}\n\n\
                      Rewrite the step keeping only the reasoning that sets up the computation. \
                      Remove the arithmetic and the computed results. Reply with the rewritten \
                      step only."
                .into(),
            convert: "Original step:\n\n{step}\n\nReasoning kept:\n\n{logic}\n\n\
                      Write a short Python program that performs the computation the original \
                      step carries out, consistent with the reasoning kept, and prints the result. \
                      Reply with a single ```python code block."
                .into(),
            baseline_system: "Solve the math problem step by step without using code. \
                              Put the final answer in \\boxed{}."
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TirGenConfig {
    /// Upper bound on one actor step, in `unit`s.
    pub step_len_cap: usize,
    pub max_steps: usize,
    pub per_stratum_cap: usize,
    /// Tool-free baseline samples per question; 0 disables the difficulty filter.
    pub cot_filter_samples: usize,
    pub cot_max_tokens: u32,
    pub seed: u64,
    pub libraries: Vec<String>,
    /// Reject trajectories whose answer differs from the gold answer.
    pub check_gold: bool,
    pub step_delimiter: String,
    pub temperature: f64,
    pub critic_max_tokens: u32,
    /// Questions synthesised concurrently.
    pub jobs: usize,
    pub unit: PartitionUnit,
    pub prompts: Prompts,
}

impl Default for TirGenConfig {
    fn default() -> Self {
        TirGenConfig {
            step_len_cap: 512,
            max_steps: 32,
            per_stratum_cap: 1000,
            cot_filter_samples: 4,
            cot_max_tokens: 4096,
            seed: 0,
            libraries: ["sympy", "numpy", "math", "itertools", "fractions"]
                .map(String::from)
                .to_vec(),
            check_gold: true,
            step_delimiter: "\n\n".into(),
            temperature: 1.0,
            critic_max_tokens: 1024,
            jobs: 1,
            unit: PartitionUnit::WhitespaceToken,
            prompts: Prompts::default(),
        }
    }
}

impl TirGenConfig {
    /// Settings for long-chain reasoning actors.
    pub fn reasoning() -> Self {
        TirGenConfig {
            step_len_cap: 4096,
            cot_max_tokens: 16_384,
            ..TirGenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TirGenError> {
        let bad = |m: &str| Err(TirGenError::InvalidConfig(m.to_string()));
        if self.step_len_cap == 0 {
            return bad("step_len_cap must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if self.per_stratum_cap == 0 {
            return bad("per_stratum_cap must be positive");
        }
        if self.step_delimiter.is_empty() {
            return bad("step_delimiter must be non-empty");
        }
        if self.critic_max_tokens == 0 || self.cot_max_tokens == 0 {
            return bad("token limits must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Agent operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStep {
    pub text: String,
    pub truncated: bool,
}

/// Asks the actor for the next reasoning step given the trajectory so far.
pub fn generate_step(
    actor: &dyn LlmClient,
    question: &str,
    context: &[Segment],
    cfg: &TirGenConfig,
) -> Result<GeneratedStep, TirGenError> {
    if question.trim().is_empty() {
        return Err(TirGenError::PreconditionViolation("empty question".into()));
    }
    let req = GenerationRequest::new(
        continuation_messages(&cfg.prompts.actor_system, question, context),
        cfg.step_len_cap.min(u32::MAX as usize) as u32,
    )
    .with_temperature(cfg.temperature)
    .with_stop(&[cfg.step_delimiter.as_str()]);
    let gen = actor.generate(&req)?;
    let (kept, cut) = cfg.unit.truncate(&gen.text, cfg.step_len_cap);
    let truncated = cut || gen.finish_reason == FinishReason::Length;
    let mut text = if truncated { kept.trim_end() } else { kept }.to_string();
    if !truncated && gen.finish_reason == FinishReason::StopSequence {
        text.push_str(&cfg.step_delimiter);
    }
    Ok(GeneratedStep { text, truncated })
}

fn critic_call(critic: &dyn LlmClient, prompt: String, cfg: &TirGenConfig) -> Result<String, TirGenError> {
    let req = GenerationRequest::new(vec![Message::user(prompt)], cfg.critic_max_tokens).with_temperature(0.0);
    Ok(critic.generate(&req)?.text)
}

/// Parses a yes/no verdict from the first word of the reply.
pub fn parse_verdict(reply: &str) -> Result<bool, TirGenError> {
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(TirGenError::JudgeParseError(reply.to_string())),
    }
}

pub fn judge_code_solvable(critic: &dyn LlmClient, step: &str, cfg: &TirGenConfig) -> Result<bool, TirGenError> {
    let reply = critic_call(critic, cfg.prompts.judge.replace("{step}", step), cfg)?;
    parse_verdict(&reply)
}

pub fn extract_logic(critic: &dyn LlmClient, step: &str, cfg: &TirGenConfig) -> Result<String, TirGenError> {
    let reply = critic_call(critic, cfg.prompts.extract.replace("{step}", step), cfg)?;
    if reply.trim().is_empty() {
        return Err(TirGenError::EmptyLogic);
    }
    Ok(reply)
}

/// Returns the body of the first fenced code block in the critic reply.
pub fn convert_to_code(
    critic: &dyn LlmClient,
    step: &str,
    logic: &str,
    cfg: &TirGenConfig,
) -> Result<String, TirGenError> {
    let prompt = cfg.prompts.convert.replace("{step}", step).replace("{logic}", logic);
    let reply = critic_call(critic, prompt, cfg)?;
    let span = find_code_block(&reply).ok_or(TirGenError::NoCodeBlock)?;
    let code = &reply[span.body];
    if code.trim().is_empty() {
        return Err(TirGenError::NoCodeBlock);
    }
    Ok(code.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub trajectory: Trajectory,
    pub truncated_steps: usize,
    /// Recoverable per-step errors; those steps were kept as plain thoughts.
    pub step_errors: Vec<String>,
}

fn push_thought(traj: &mut Trajectory, text: &str) {
    traj.push_thought_text(text);
}

/// Runs the actor-critic loop for one question.
pub fn synthesize(
    question: &str,
    actor: &dyn LlmClient,
    critic: &dyn LlmClient,
    executor: &dyn Executor,
    cfg: &TirGenConfig,
) -> Synthesis {
    let mut traj = Trajectory::new(question);
    let mut truncated_steps = 0;
    let mut step_errors = Vec::new();
    let mut termination = Termination::Unanswered;

    for _ in 0..cfg.max_steps {
        let step = match generate_step(actor, question, &traj.segments, cfg) {
            Ok(s) => s,
            Err(e) => {
                step_errors.push(e.to_string());
                termination = Termination::ClientError;
                break;
            }
        };
        truncated_steps += usize::from(step.truncated);
        if extract_final_answer(&step.text).is_some() {
            push_thought(&mut traj, &step.text);
            termination = Termination::Answered;
            break;
        }
        match tool_step(&step.text, critic, executor, cfg) {
            Ok(Some((logic, code, obs))) => {
                push_thought(&mut traj, &logic);
                traj.push(Segment::action(&code)).expect("action follows a thought");
                traj.push(obs).expect("observation follows an action");
            }
            Ok(None) => push_thought(&mut traj, &step.text),
            Err(TirGenError::Client(e)) => {
                step_errors.push(e.to_string());
                termination = Termination::ClientError;
                break;
            }
            Err(e) => {
                debug!(error = %e, "critic step failed, keeping plain thought");
                step_errors.push(e.to_string());
                push_thought(&mut traj, &step.text);
            }
        }
    }
    if traj.segments.is_empty() || traj.segments.last().is_some_and(|s| s.kind != SegmentKind::Thought) {
        // Ends on an observation: the trajectory is unfinished.
        termination = match termination {
            Termination::Answered => Termination::Unanswered,
            t => t,
        };
    }
    traj.finish(termination).unwrap_or_else(|_| {
        traj.finish(Termination::Unanswered).expect("unanswered always applies")
    });
    Synthesis {
        trajectory: traj,
        truncated_steps,
        step_errors,
    }
}

type ToolStep = (String, String, Segment);

fn tool_step(
    step: &str,
    critic: &dyn LlmClient,
    executor: &dyn Executor,
    cfg: &TirGenConfig,
) -> Result<Option<ToolStep>, TirGenError> {
    if !judge_code_solvable(critic, step, cfg)? {
        return Ok(None);
    }
    let mut logic = extract_logic(critic, step, cfg)?;
    let code = convert_to_code(critic, step, &logic, cfg)?;
    if !logic.ends_with('\n') {
        logic.push('\n');
    }
    let result = executor.run_code(&code);
    let obs = Segment::observation(format_observation(&result), result.status);
    Ok(Some((logic, code, obs)))
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

pub const NO_BOXED: &str = "no_boxed";
pub const BAD_CODE_FORMAT: &str = "bad_code_format";
pub const BAD_ALTERNATION: &str = "bad_alternation";
pub const WRONG_ANSWER: &str = "wrong_answer";
pub const FAILED_EXECUTION: &str = "failed_execution";
pub const LOW_QUALITY_CODE: &str = "low_quality_code";
pub const COT_SOLVABLE: &str = "cot_solvable";
pub const BASELINE_ERROR: &str = "baseline_error";
pub const DOWNSAMPLED: &str = "downsampled";

/// Format filter. `gold` is compared only when given.
pub fn filter_format(traj: &Trajectory, gold: Option<&str>) -> Result<(), &'static str> {
    if traj.validate().is_err() {
        return Err(BAD_ALTERNATION);
    }
    if traj.actions().any(|a| code_body(&a.text).is_none()) {
        return Err(BAD_CODE_FORMAT);
    }
    let answer = match (&traj.final_answer, traj.termination) {
        (Some(a), Termination::Answered) => a,
        _ => return Err(NO_BOXED),
    };
    match gold {
        Some(g) if !answers_match(answer, g) => Err(WRONG_ANSWER),
        _ => Ok(()),
    }
}

/// Lexer state carried across lines.
#[derive(Clone, Copy, PartialEq)]
enum Lex {
    Code,
    Triple(char),
}

/// Scans `line` from state `st`; returns the state at end of line and the
/// code text outside strings and comments.
fn lex_line(line: &str, mut st: Lex) -> (Lex, String) {
    let chars: Vec<char> = line.chars().collect();
    let mut code = String::new();
    let mut i = 0;
    while i < chars.len() {
        match st {
            Lex::Triple(q) => {
                if chars[i] == '\\' {
                    i += 2;
                    continue;
                }
                if chars[i..].starts_with(&[q, q, q]) {
                    st = Lex::Code;
                    i += 3;
                    code.push(' ');
                    continue;
                }
                i += 1;
            }
            Lex::Code => {
                let c = chars[i];
                if c == '#' {
                    break;
                }
                if c == '"' || c == '\'' {
                    if chars[i..].starts_with(&[c, c, c]) {
                        st = Lex::Triple(c);
                        i += 3;
                        continue;
                    }
                    i += 1;
                    while i < chars.len() && chars[i] != c {
                        i += if chars[i] == '\\' { 2 } else { 1 };
                    }
                    i += 1;
                    code.push(' ');
                    continue;
                }
                code.push(c);
                i += 1;
            }
        }
    }
    (st, code)
}

fn starts_with_keyword<'a>(stmt: &'a str, kw: &str) -> Option<&'a str> {
    let rest = stmt.strip_prefix(kw)?;
    match rest.chars().next() {
        None => Some(rest),
        Some(c) if c.is_whitespace() || c == '(' || c == ':' => Some(rest),
        _ => None,
    }
}

fn imports_allowed(stmt: &str, libraries: &[String]) -> bool {
    let allowed = |module: &str| {
        let top = module.trim().split('.').next().unwrap_or("");
        libraries.iter().any(|l| l == top)
    };
    if let Some(rest) = starts_with_keyword(stmt, "import") {
        return rest
            .split(',')
            .map(|m| m.split_whitespace().next().unwrap_or(""))
            .any(allowed);
    }
    if let Some(rest) = starts_with_keyword(stmt, "from") {
        return allowed(rest.split_whitespace().next().unwrap_or(""));
    }
    false
}

/// True iff the code imports an allowlisted library or contains a loop or
/// branch statement. Lines in comments and string literals are ignored.
pub fn code_quality(code: &str, libraries: &[String]) -> bool {
    let mut st = Lex::Code;
    for line in code.lines() {
        let started_in_code = st == Lex::Code;
        let (next, text) = lex_line(line, st);
        st = next;
        if !started_in_code {
            continue;
        }
        for stmt in text.split(';') {
            let stmt = stmt.trim_start();
            if imports_allowed(stmt, libraries)
                || ["for", "while", "if"].iter().any(|kw| starts_with_keyword(stmt, kw).is_some())
            {
                return true;
            }
        }
    }
    false
}

pub fn filter_code_quality(traj: &Trajectory, libraries: &[String]) -> Result<(), &'static str> {
    if traj.has_failed_execution() {
        return Err(FAILED_EXECUTION);
    }
    let any_quality = traj
        .actions()
        .filter_map(|a| code_body(&a.text))
        .any(|c| code_quality(c, libraries));
    if any_quality {
        Ok(())
    } else {
        Err(LOW_QUALITY_CODE)
    }
}

/// Stratifies by Action count and down-samples each stratum to at most `cap`,
/// uniformly with a seeded generator. Input order is preserved.
pub fn balance_rounds<T>(dataset: Vec<T>, rounds: impl Fn(&T) -> usize, cap: usize, seed: u64) -> Vec<T> {
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in dataset.iter().enumerate() {
        strata.entry(rounds(item)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for members in strata.values() {
        if members.len() <= cap {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in index::sample(&mut rng, members.len(), cap) {
                keep[members[j]] = true;
            }
        }
    }
    dataset
        .into_iter()
        .zip(keep)
        .filter_map(|(item, k)| k.then_some(item))
        .collect()
}

/// Difficulty filter: keep iff none of `n_samples` tool-free baseline answers matches gold.
pub fn filter_cot_solvable(
    question: &str,
    gold: &str,
    baseline: &dyn LlmClient,
    n_samples: usize,
    cfg: &TirGenConfig,
) -> Result<bool, TirGenError> {
    let mut solved = false;
    for _ in 0..n_samples {
        let req = GenerationRequest::new(
            continuation_messages(&cfg.prompts.baseline_system, question, &[]),
            cfg.cot_max_tokens,
        )
        .with_temperature(cfg.temperature);
        let gen = baseline.generate(&req)?;
        if extract_final_answer(&gen.text).is_some_and(|a| answers_match(&a, gold)) {
            solved = true;
        }
    }
    Ok(!solved)
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub rejections: BTreeMap<String, usize>,
    /// Action count -> (before balancing, after balancing).
    pub stratum_counts: BTreeMap<usize, (usize, usize)>,
}

impl FilterReport {
    pub fn rejected(&self) -> usize {
        self.rejections.values().sum()
    }

    pub fn is_conserved(&self) -> bool {
        self.input_count == self.kept_count + self.rejected()
    }

    fn reject(&mut self, reason: &str) {
        *self.rejections.entry(reason.to_string()).or_insert(0) += 1;
    }
}

pub struct Agents<'a> {
    pub actor: &'a dyn LlmClient,
    pub critic: &'a dyn LlmClient,
    /// Tool-free baseline for the difficulty filter; skipped when absent.
    pub baseline: Option<&'a dyn LlmClient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub samples: Vec<SftSample>,
    pub report: FilterReport,
}

fn map_jobs<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
        Err(e) => {
            warn!(error = %e, "thread pool unavailable, running sequentially");
            items.iter().map(f).collect()
        }
    }
}

/// Synthesis for every question, then format, code-quality and difficulty
/// filtering, then per-stratum balancing.
pub fn run_pipeline(
    questions: &[QuestionRecord],
    agents: &Agents<'_>,
    executor: &dyn Executor,
    cfg: &TirGenConfig,
) -> Result<PipelineOutput, TirGenError> {
    cfg.validate()?;
    let synths = map_jobs(questions, cfg.jobs, |q| {
        synthesize(&q.question, agents.actor, agents.critic, executor, cfg)
    });
    let mut report = FilterReport {
        input_count: questions.len(),
        ..FilterReport::default()
    };
    let mut passed = Vec::new();
    for (q, s) in questions.iter().zip(synths) {
        let gold = cfg.check_gold.then_some(q.answer.as_str());
        let verdict = filter_format(&s.trajectory, gold)
            .and_then(|_| filter_code_quality(&s.trajectory, &cfg.libraries));
        match verdict {
            Ok(()) => passed.push(SftSample {
                id: q.id.clone(),
                question: q.question.clone(),
                answer: q.answer.clone(),
                trajectory: s.trajectory,
            }),
            Err(reason) => report.reject(reason),
        }
    }

    if let (Some(baseline), n) = (agents.baseline, cfg.cot_filter_samples) {
        if n > 0 {
            let verdicts = map_jobs(&passed, cfg.jobs, |s| {
                filter_cot_solvable(&s.question, &s.answer, baseline, n, cfg)
            });
            let mut kept = Vec::with_capacity(passed.len());
            for (s, v) in passed.into_iter().zip(verdicts) {
                match v {
                    Ok(true) => kept.push(s),
                    Ok(false) => report.reject(COT_SOLVABLE),
                    Err(e) => {
                        warn!(id = %s.id, error = %e, "baseline failed");
                        report.reject(BASELINE_ERROR);
                    }
                }
            }
            passed = kept;
        }
    }

    let rounds = |s: &SftSample| s.trajectory.action_count();
    for s in &passed {
        report.stratum_counts.entry(rounds(s)).or_insert((0, 0)).0 += 1;
    }
    let before = passed.len();
    let samples = balance_rounds(passed, rounds, cfg.per_stratum_cap, cfg.seed);
    for s in &samples {
        report.stratum_counts.get_mut(&rounds(s)).expect("stratum seen before balancing").1 += 1;
    }
    for _ in samples.len()..before {
        report.reject(DOWNSAMPLED);
    }
    report.kept_count = samples.len();
    Ok(PipelineOutput { samples, report })
}
