//! Tool-integrated trajectories: segments, answer extraction, step
//! partitioning, token records and the line-oriented trajectory file format.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::sandbox::ExecStatus;

/// Opening fence of an Action code block.
pub const CODE_OPEN: &str = "```python\n";
/// Closing fence of an Action code block. Also the rollout stop sequence.
pub const CODE_CLOSE: &str = "```\n";
/// Injected scaffolding placed before an Observation body in rendered text.
pub const OBS_OPEN: &str = "```output\n";
/// Injected scaffolding placed after an Observation body in rendered text.
pub const OBS_CLOSE: &str = "```\n";

const CODE_OPEN_ALIASES: [&str; 2] = ["```python\n", "```py\n"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("alternation violation: {found:?} cannot follow {after}")]
    AlternationViolation {
        after: String,
        found: SegmentKind,
    },
    #[error("invalid suffix length {0}, must be >= 1")]
    InvalidSuffixLen(usize),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Thought,
    Action,
    Observation,
}

impl SegmentKind {
    fn letter(self) -> char {
        match self {
            SegmentKind::Thought => 'T',
            SegmentKind::Action => 'A',
            SegmentKind::Observation => 'O',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub attempt_index: u32,
    /// Execution status of the Action this Observation reports on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec_status: Option<ExecStatus>,
}

impl Segment {
    pub fn thought(text: impl Into<String>) -> Self {
        Segment {
            kind: SegmentKind::Thought,
            text: text.into(),
            attempt_index: 0,
            exec_status: None,
        }
    }

    /// Builds an Action from a bare code body, adding the fences.
    pub fn action(code: &str) -> Self {
        Segment {
            kind: SegmentKind::Action,
            text: fence_code(code),
            attempt_index: 0,
            exec_status: None,
        }
    }

    pub fn observation(text: impl Into<String>, status: ExecStatus) -> Self {
        Segment {
            kind: SegmentKind::Observation,
            text: text.into(),
            attempt_index: 0,
            exec_status: Some(status),
        }
    }

    pub fn with_attempt(mut self, attempt_index: u32) -> Self {
        self.attempt_index = attempt_index;
        self
    }

    /// Code body of an Action segment, `None` for other kinds or a malformed block.
    pub fn code(&self) -> Option<&str> {
        match self.kind {
            SegmentKind::Action => code_body(&self.text),
            _ => None,
        }
    }

    /// Text this segment contributes to the rendered trajectory.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        match self.kind {
            SegmentKind::Thought | SegmentKind::Action => out.push_str(&self.text),
            SegmentKind::Observation => {
                out.push_str(OBS_OPEN);
                out.push_str(&self.text);
                if !self.text.is_empty() && !self.text.ends_with('\n') {
                    out.push('\n');
                }
                out.push_str(OBS_CLOSE);
            }
        }
    }
}

/// Wraps a code body in the Action fences, terminating the body with a newline.
pub fn fence_code(code: &str) -> String {
    let mut text = String::with_capacity(code.len() + CODE_OPEN.len() + CODE_CLOSE.len() + 1);
    text.push_str(CODE_OPEN);
    text.push_str(code);
    if !code.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(CODE_CLOSE);
    text
}

/// Extracts the body of a fenced code block that spans the whole text.
///
/// Returns `None` unless the text is exactly one fenced block with a
/// non-blank body.
pub fn code_body(text: &str) -> Option<&str> {
    let open = CODE_OPEN_ALIASES.iter().find(|o| text.starts_with(*o))?;
    let rest = &text[open.len()..];
    let body = rest
        .strip_suffix("```\n")
        .or_else(|| rest.strip_suffix("```"))?;
    if body.trim().is_empty() || body.contains("```") {
        return None;
    }
    Some(body)
}

/// Location of the first code block in freshly generated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSpan {
    /// Byte offset of the opening fence.
    pub fence_start: usize,
    /// Byte range of the code body.
    pub body: std::ops::Range<usize>,
    /// Byte offset just past the generated part of the block (closing
    /// fence included when the model produced it).
    pub generated_end: usize,
    /// Whether the generated text contained the closing fence.
    pub closed: bool,
}

/// Finds the first code block in generated text. An unclosed block (the
/// closing fence was consumed as a stop sequence) extends to the end.
pub fn find_code_block(text: &str) -> Option<CodeSpan> {
    let (fence_start, open) = CODE_OPEN_ALIASES
        .iter()
        .filter_map(|o| text.find(o).map(|i| (i, *o)))
        .min_by_key(|(i, _)| *i)?;
    let body_start = fence_start + open.len();
    let rest = &text[body_start..];
    match rest.find("```") {
        Some(close) => {
            let body_end = body_start + close;
            let mut generated_end = body_end + 3;
            if text[generated_end..].starts_with('\n') {
                generated_end += 1;
            }
            Some(CodeSpan {
                fence_start,
                body: body_start..body_end,
                generated_end,
                closed: true,
            })
        }
        None => Some(CodeSpan {
            fence_start,
            body: body_start..text.len(),
            generated_end: text.len(),
            closed: false,
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    RoundLimit,
    ContextLimit,
    ClientError,
    /// Generation ended without a boxed answer and without hitting a limit.
    Unanswered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: String,
    pub segments: Vec<Segment>,
    pub final_answer: Option<String>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn new(query: impl Into<String>) -> Self {
        Trajectory {
            query: query.into(),
            segments: Vec::new(),
            final_answer: None,
            termination: Termination::Unanswered,
        }
    }

    /// Returns a copy of this trajectory with `seg` appended.
    pub fn append_segment(&self, seg: Segment) -> Result<Trajectory, TrajectoryError> {
        let mut next = self.clone();
        next.push(seg)?;
        Ok(next)
    }

    /// In-place append with the same alternation check as [`append_segment`].
    ///
    /// [`append_segment`]: Trajectory::append_segment
    pub fn push(&mut self, seg: Segment) -> Result<(), TrajectoryError> {
        let last = self.segments.last().map(|s| s.kind);
        let allowed = matches!(
            (last, seg.kind),
            (None | Some(SegmentKind::Observation), SegmentKind::Thought)
                | (Some(SegmentKind::Thought), SegmentKind::Action)
                | (Some(SegmentKind::Action), SegmentKind::Observation)
        );
        if !allowed {
            return Err(TrajectoryError::AlternationViolation {
                after: last.map_or_else(|| "start".to_string(), |k| format!("{k:?}")),
                found: seg.kind,
            });
        }
        self.segments.push(seg);
        Ok(())
    }

    /// Appends reasoning text, merging into a trailing Thought if there is one.
    pub fn push_thought_text(&mut self, text: &str) {
        match self.segments.last_mut() {
            Some(last) if last.kind == SegmentKind::Thought => last.text.push_str(text),
            _ => self.segments.push(Segment::thought(text)),
        }
    }

    /// Sets the termination reason. `Answered` requires a boxed answer in the
    /// last Thought and records it as `final_answer`; any other reason clears it.
    pub fn finish(&mut self, termination: Termination) -> Result<(), TrajectoryError> {
        if termination == Termination::Answered {
            let answer = self
                .last_thought()
                .and_then(|t| extract_final_answer(&t.text))
                .ok_or_else(|| {
                    TrajectoryError::Invariant("Answered without a boxed answer".into())
                })?;
            self.final_answer = Some(answer);
        } else {
            self.final_answer = None;
        }
        self.termination = termination;
        Ok(())
    }

    pub fn last_thought(&self) -> Option<&Segment> {
        self.segments
            .last()
            .filter(|s| s.kind == SegmentKind::Thought)
    }

    pub fn actions(&self) -> impl Iterator<Item = &Segment> {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Action)
    }

    pub fn observations(&self) -> impl Iterator<Item = &Segment> {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Observation)
    }

    pub fn action_count(&self) -> usize {
        self.actions().count()
    }

    /// Whether any Observation reports a failed execution.
    pub fn has_failed_execution(&self) -> bool {
        self.observations()
            .any(|o| !o.exec_status.is_some_and(ExecStatus::is_success))
    }

    /// Segment kinds as a string over {T, A, O}.
    pub fn kind_string(&self) -> String {
        self.segments.iter().map(|s| s.kind.letter()).collect()
    }

    /// Full response text: segments in order, observations wrapped in
    /// their injected fences.
    pub fn render(&self) -> String {
        render_segments(&self.segments)
    }

    /// Checks the structural invariants of a finished trajectory.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let mut check = Trajectory::new(self.query.clone());
        for seg in &self.segments {
            check.push(seg.clone())?;
        }
        if let Some(last) = self.segments.last() {
            if last.kind == SegmentKind::Action {
                return Err(TrajectoryError::Invariant(
                    "trajectory ends with an Action lacking its Observation".into(),
                ));
            }
        }
        match (self.termination, &self.final_answer) {
            (Termination::Answered, None) => Err(TrajectoryError::Invariant(
                "termination Answered without final_answer".into(),
            )),
            (t, Some(_)) if t != Termination::Answered => Err(TrajectoryError::Invariant(
                format!("final_answer present with termination {t:?}"),
            )),
            _ => Ok(()),
        }
    }

    /// [`validate`](Trajectory::validate) plus the round-cap invariant.
    pub fn validate_with_round_cap(&self, max_code_rounds: usize) -> Result<(), TrajectoryError> {
        self.validate()?;
        if self.termination == Termination::RoundLimit && self.action_count() != max_code_rounds {
            return Err(TrajectoryError::Invariant(format!(
                "RoundLimit with {} actions, cap {}",
                self.action_count(),
                max_code_rounds
            )));
        }
        Ok(())
    }
}

pub fn render_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for seg in segments {
        seg.render_into(&mut out);
    }
    out
}

/// Content of the last `\boxed{...}` in `text`, matched by brace depth.
///
/// Returns `None` when there is no box or the last one is unbalanced.
pub fn extract_final_answer(text: &str) -> Option<String> {
    const OPEN: &str = "\\boxed{";
    let start = text.rfind(OPEN)? + OPEN.len();
    let mut depth = 1usize;
    for (i, ch) in text[start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[start..start + i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Splits text into units for [`partition_step`].
pub trait UnitTokenizer: Send + Sync {
    /// Byte offsets at which each unit starts, ascending.
    fn unit_starts(&self, text: &str) -> Vec<usize>;
}

#[derive(Clone, Default)]
pub enum PartitionUnit {
    Char,
    #[default]
    WhitespaceToken,
    Pluggable(Arc<dyn UnitTokenizer>),
}

impl fmt::Debug for PartitionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl PartialEq for PartitionUnit {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (PartitionUnit::Pluggable(a), PartitionUnit::Pluggable(b)) => Arc::ptr_eq(a, b),
            _ => self.name() == other.name(),
        }
    }
}

impl PartitionUnit {
    pub fn name(&self) -> &'static str {
        match self {
            PartitionUnit::Char => "char",
            PartitionUnit::WhitespaceToken => "whitespace",
            PartitionUnit::Pluggable(_) => "pluggable",
        }
    }

    fn unit_starts(&self, text: &str) -> Vec<usize> {
        match self {
            PartitionUnit::Char => text.char_indices().map(|(i, _)| i).collect(),
            PartitionUnit::WhitespaceToken => whitespace_token_starts(text),
            PartitionUnit::Pluggable(tok) => tok.unit_starts(text),
        }
    }

    /// Number of units in `text`.
    pub fn count(&self, text: &str) -> usize {
        self.unit_starts(text).len()
    }

    /// Keeps the first `cap` units; returns the kept text and whether anything was cut.
    pub fn truncate<'a>(&self, text: &'a str, cap: usize) -> (&'a str, bool) {
        let starts = self.unit_starts(text);
        if starts.len() <= cap {
            return (text, false);
        }
        let cut = starts[cap];
        let kept = match self {
            PartitionUnit::WhitespaceToken => text[..cut].trim_end(),
            _ => &text[..cut],
        };
        (kept, true)
    }
}

impl Serialize for PartitionUnit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PartitionUnit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        match name.as_str() {
            "char" => Ok(PartitionUnit::Char),
            "whitespace" => Ok(PartitionUnit::WhitespaceToken),
            other => Err(serde::de::Error::custom(format!(
                "unknown partition unit {other:?} (expected \"char\" or \"whitespace\")"
            ))),
        }
    }
}

fn whitespace_token_starts(text: &str) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut prev_ws = true;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if prev_ws && !ws {
            starts.push(i);
        }
        prev_ws = ws;
    }
    starts
}

/// Splits a reasoning step into `(prefix, suffix)` where the suffix holds the
/// last `suffix_len` units. Separators before the suffix stay on the prefix.
pub fn partition_step<'a>(
    step_text: &'a str,
    suffix_len: usize,
    unit: &PartitionUnit,
) -> Result<(&'a str, &'a str), TrajectoryError> {
    if suffix_len == 0 {
        return Err(TrajectoryError::InvalidSuffixLen(suffix_len));
    }
    let starts = unit.unit_starts(step_text);
    let cut = if starts.len() <= suffix_len {
        0
    } else {
        starts[starts.len() - suffix_len]
    };
    Ok(step_text.split_at(cut))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Model,
    Injected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_text: String,
    pub origin: Origin,
    pub logprob_old: f64,
    pub logprob_new: f64,
}

impl TokenRecord {
    pub fn model(text: impl Into<String>, logprob: f64) -> Self {
        TokenRecord {
            token_text: text.into(),
            origin: Origin::Model,
            logprob_old: logprob,
            logprob_new: logprob,
        }
    }

    pub fn injected(text: impl Into<String>) -> Self {
        TokenRecord {
            token_text: text.into(),
            origin: Origin::Injected,
            logprob_old: 0.0,
            logprob_new: 0.0,
        }
    }

    pub fn is_model(&self) -> bool {
        self.origin == Origin::Model
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedTrajectory {
    pub trajectory: Trajectory,
    pub records: Vec<TokenRecord>,
}

impl TokenizedTrajectory {
    /// Tokenizes a trajectory without model logprobs: Thought and Action text
    /// become whitespace-delimited Model tokens with `logprob`, observation
    /// text and fences become Injected.
    pub fn uniform(trajectory: Trajectory, logprob: f64) -> Self {
        let mut records = Vec::new();
        for seg in &trajectory.segments {
            match seg.kind {
                SegmentKind::Thought | SegmentKind::Action => records.extend(
                    split_word_tokens(&seg.text)
                        .into_iter()
                        .map(|t| TokenRecord::model(t, logprob)),
                ),
                SegmentKind::Observation => {
                    records.push(TokenRecord::injected(seg.render()));
                }
            }
        }
        TokenizedTrajectory {
            trajectory,
            records,
        }
    }

    pub fn model_token_count(&self) -> usize {
        self.records.iter().filter(|r| r.is_model()).count()
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let joined: String = self.records.iter().map(|r| r.token_text.as_str()).collect();
        if joined != self.trajectory.render() {
            return Err(TrajectoryError::Invariant(
                "token records do not reproduce the rendered trajectory".into(),
            ));
        }
        if !self.trajectory.segments.is_empty()
            && !self.records.is_empty()
            && !self.records.iter().any(TokenRecord::is_model)
        {
            return Err(TrajectoryError::Invariant(
                "non-empty trajectory without Model tokens".into(),
            ));
        }
        for rec in &self.records {
            if rec.is_model() && (rec.logprob_old > 0.0 || rec.logprob_new > 0.0) {
                return Err(TrajectoryError::Invariant(format!(
                    "positive logprob on token {:?}",
                    rec.token_text
                )));
            }
        }
        Ok(())
    }
}

/// Splits text into tokens of one non-whitespace run plus its trailing
/// whitespace; leading whitespace forms its own token. Concatenation of the
/// output equals the input.
pub fn split_word_tokens(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start = 0;
    let mut prev_ws = false;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if !ws && prev_ws {
            tokens.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        tokens.push(&text[start..]);
    }
    tokens
}

/// Sum of current-policy logprobs over Model tokens.
pub fn trajectory_log_likelihood(tokens: &TokenizedTrajectory) -> f64 {
    tokens
        .records
        .iter()
        .filter(|r| r.is_model())
        .map(|r| r.logprob_new)
        .sum()
}

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads one JSON record per non-blank line, reporting the 1-based line on error.
pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(
    input: R,
) -> Result<Vec<T>, TrajectoryError> {
    let mut items = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TrajectoryError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| TrajectoryError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn serialize_trajectory(traj: &Trajectory) -> String {
    serde_json::to_string(traj).expect("trajectory serialization is infallible")
}

/// Parses a trajectory file, validating each record's structure.
pub fn deserialize_trajectories<R: BufRead>(input: R) -> Result<Vec<Trajectory>, TrajectoryError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TrajectoryError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| TrajectoryError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        traj.validate().map_err(|e| TrajectoryError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(traj);
    }
    Ok(out)
}
