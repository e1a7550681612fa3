//! The forecasting agent: tasks, forecasts, research tools with a hard
//! information cutoff, and the turn-limited predict loop.
//!
//! The agent converses with a chat backend using a text protocol: each model
//! reply carries exactly one JSON object — a tool action (`search`/`fetch`)
//! or the final map from candidate names to probabilities. Every reply and
//! tool result is recorded in a [`Trajectory`] for later reflection and
//! experience summarization.

use std::fmt;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cognition::{
    BackendError, CallContext, ChatBackend, ChatMessage, ChatRequest, Guideline, Operation,
};

/// One forecasting task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Task {
    /// Stable unique id.
    pub id: String,
    /// The question being forecast.
    pub question: String,
    /// Outcome candidates (at least two, distinct, non-empty).
    pub candidates: Vec<String>,
    /// Market prices aligned with `candidates`, each in `[0, 1]`, if the
    /// task trades on a market.
    pub market_prices: Option<Vec<f64>>,
    /// When the question closes.
    pub close_time: DateTime<Utc>,
    /// The batch (week) the task belongs to.
    pub batch_id: u32,
}

/// A task failed structural validation.
#[derive(Debug, Error)]
#[error("task {id:?}: {message}")]
pub struct TaskError {
    pub id: String,
    pub message: String,
}

impl Task {
    /// Checks structural invariants; every task entering the engine must
    /// pass.
    pub fn validate(&self) -> Result<(), TaskError> {
        let fail = |message: String| {
            Err(TaskError {
                id: self.id.clone(),
                message,
            })
        };
        if self.id.trim().is_empty() {
            return fail("empty id".into());
        }
        if self.question.trim().is_empty() {
            return fail("empty question".into());
        }
        if self.candidates.len() < 2 {
            return fail(format!(
                "{} candidate(s); need at least 2",
                self.candidates.len()
            ));
        }
        if self.candidates.iter().any(|c| c.trim().is_empty()) {
            return fail("empty candidate name".into());
        }
        for (i, a) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(a) {
                return fail(format!("duplicate candidate {a:?}"));
            }
        }
        if let Some(prices) = &self.market_prices {
            if prices.len() != self.candidates.len() {
                return fail(format!(
                    "{} prices for {} candidates",
                    prices.len(),
                    self.candidates.len()
                ));
            }
            for (i, &p) in prices.iter().enumerate() {
                if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                    return fail(format!("price {p} at index {i} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// The hard information cutoff for this task: `close_time` minus the
    /// configured offset.
    pub fn cutoff(&self, offset_hours: i64) -> DateTime<Utc> {
        self.close_time - Duration::hours(offset_hours)
    }
}

/// A forecast failed validation.
#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("forecast needs at least 2 components, got {0}")]
    TooFewComponents(usize),
    #[error("forecast component {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("forecast component {index} is negative ({value})")]
    Negative { index: usize, value: f64 },
    #[error("forecast weights sum to zero")]
    ZeroSum,
    #[error("probabilities sum to {sum}, not 1")]
    NotADistribution { sum: f64 },
}

/// A probability distribution over a task's candidates.
///
/// Constructed from non-negative weights which are renormalized to sum to 1;
/// the stored probabilities are exactly `w_i / Σw`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast(Vec<f64>);

impl Forecast {
    /// Validates and renormalizes raw weights into a forecast.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self, ForecastError> {
        if weights.len() < 2 {
            return Err(ForecastError::TooFewComponents(weights.len()));
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() {
                return Err(ForecastError::NonFinite { index, value });
            }
            if value < 0.0 {
                return Err(ForecastError::Negative { index, value });
            }
        }
        let sum: f64 = {
            let mut s = 0.0;
            for &w in &weights {
                s += w;
            }
            s
        };
        if sum == 0.0 {
            return Err(ForecastError::ZeroSum);
        }
        Ok(Forecast(weights.into_iter().map(|w| w / sum).collect()))
    }

    /// Accepts probabilities that already form a distribution (sum within
    /// `1e-6` of 1) and stores them bit-for-bit, without renormalizing.
    /// This is how persisted forecasts round-trip exactly.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self, ForecastError> {
        if probs.len() < 2 {
            return Err(ForecastError::TooFewComponents(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(ForecastError::NonFinite { index, value });
            }
            if value < 0.0 {
                return Err(ForecastError::Negative { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ForecastError::NotADistribution { sum });
        }
        Ok(Forecast(probs))
    }

    /// The uniform forecast over `k` candidates.
    pub fn uniform(k: usize) -> Result<Self, ForecastError> {
        Forecast::from_weights(vec![1.0; k.max(1)])
    }

    /// The probabilities, aligned with the task's candidates.
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

impl Serialize for Forecast {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Forecast {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        // Persisted forecasts are already distributions; parsing must not
        // perturb them, or replayed ledgers would not re-score exactly.
        let probs = Vec::<f64>::deserialize(deserializer)?;
        Forecast::from_probs(probs).map_err(serde::de::Error::custom)
    }
}

/// The resolved outcome of a task: which of the `k` candidates won.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    winner: usize,
    k: usize,
}

impl Outcome {
    /// Builds an outcome, validating `winner < k` and `k ≥ 2`.
    pub fn from_index(winner: usize, k: usize) -> Result<Self, TaskError> {
        if k < 2 {
            return Err(TaskError {
                id: String::new(),
                message: format!("outcome needs at least 2 candidates, got {k}"),
            });
        }
        if winner >= k {
            return Err(TaskError {
                id: String::new(),
                message: format!("winner index {winner} out of range for {k} candidates"),
            });
        }
        Ok(Outcome { winner, k })
    }

    pub fn winner(&self) -> usize {
        self.winner
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Kind of one trajectory step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    ModelMessage,
    ToolCall,
    ToolResult,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepKind::ModelMessage => write!(f, "model"),
            StepKind::ToolCall => write!(f, "tool_call"),
            StepKind::ToolResult => write!(f, "tool_result"),
        }
    }
}

/// One step of an agent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub kind: StepKind,
    pub content: String,
    /// Wall-clock time, recorded only when
    /// [`PredictorSettings::record_timestamps`] is set (scripted runs keep
    /// this `None` so outputs stay byte-reproducible).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamp: Option<DateTime<Utc>>,
}

/// Everything the agent said and observed while answering one task.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// Renders the trajectory as plain text for prompts.
    pub fn render(&self) -> String {
        self.steps
            .iter()
            .map(|s| format!("[{}] {}", s.kind, s.content))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Behaviour knobs of the predict loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorSettings {
    /// Maximum number of chat turns before falling back to uniform.
    pub turn_cap: usize,
    /// Sampling temperature for every chat call.
    pub temperature: f64,
    /// Information cutoff: hours before the task's close time.
    pub cutoff_offset_hours: i64,
    /// Fetched pages longer than this many characters are summarized.
    pub page_char_budget: usize,
    /// Record wall-clock timestamps in trajectories (off for reproducible
    /// runs).
    pub record_timestamps: bool,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            turn_cap: 20,
            temperature: 0.2,
            cutoff_offset_hours: 6,
            page_char_budget: 20_000,
            record_timestamps: false,
        }
    }
}

/// Errors from research tools.
#[derive(Debug, Error)]
pub enum ToolError {
    #[error("page is dated after the information cutoff")]
    AfterCutoff,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("tool backend error: {0}")]
    Backend(String),
}

/// One search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub title: String,
    pub url: String,
    pub text: String,
    pub published_at: Option<DateTime<Utc>>,
}

/// One fetched page.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchedPage {
    pub text: String,
    pub published_at: Option<DateTime<Utc>>,
}

/// A search/fetch provider. Implementations do NOT enforce the cutoff;
/// the wrappers [`search`] and [`fetch_page`] do, so enforcement cannot be
/// forgotten by a backend.
pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, cutoff: DateTime<Utc>) -> Result<Vec<Snippet>, ToolError>;
    fn fetch(&self, url: &str) -> Result<FetchedPage, ToolError>;
}

/// Cutoff-enforcing search: drops undated snippets and snippets published
/// after the cutoff, whatever the backend returned.
pub fn search(
    backend: &dyn SearchBackend,
    query: &str,
    cutoff: DateTime<Utc>,
) -> Result<Vec<Snippet>, ToolError> {
    let snippets = backend.search(query, cutoff)?;
    Ok(snippets
        .into_iter()
        .filter(|s| matches!(s.published_at, Some(t) if t <= cutoff))
        .collect())
}

/// Cutoff-enforcing fetch: errors on pages dated after the cutoff and
/// summarizes pages longer than `page_char_budget` through the chat backend.
pub fn fetch_page(
    backend: &dyn SearchBackend,
    chat: &dyn ChatBackend,
    task_id: &str,
    url: &str,
    cutoff: DateTime<Utc>,
    page_char_budget: usize,
    temperature: f64,
) -> Result<String, ToolError> {
    let page = backend.fetch(url)?;
    if matches!(page.published_at, Some(t) if t > cutoff) {
        return Err(ToolError::AfterCutoff);
    }
    if page.text.chars().count() <= page_char_budget {
        return Ok(page.text);
    }
    let prompt = format!(
        "Summarize the following page in at most 300 words, keeping every \
         concrete fact, number, and date.\n\nURL: {url}\n\n{}",
        page.text
    );
    let ctx = CallContext {
        operation: Operation::SummarizePage,
        task_id: task_id.to_owned(),
    };
    let request = ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature,
    };
    chat.complete(&ctx, &request)
        .map_err(|err| ToolError::Backend(err.to_string()))
}

/// A dated document in a fixture corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub url: String,
    pub title: String,
    pub text: String,
    pub published_at: DateTime<Utc>,
}

/// A fixture corpus failed to load.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic search backend over a JSONL corpus of dated documents.
///
/// `search` returns documents whose title or body contains the whole query
/// case-insensitively, in file order, capped at 10; `fetch` matches by exact
/// URL. Every document must carry a publication date so cutoff filtering is
/// meaningful.
#[derive(Debug)]
pub struct FixtureSearchBackend {
    docs: Vec<CorpusDoc>,
}

impl FixtureSearchBackend {
    pub fn new(docs: Vec<CorpusDoc>) -> Self {
        FixtureSearchBackend { docs }
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let content = fs::read_to_string(path)?;
        let mut docs = Vec::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: CorpusDoc = serde_json::from_str(line).map_err(|err| CorpusError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: err.to_string(),
            })?;
            docs.push(doc);
        }
        Ok(FixtureSearchBackend { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl SearchBackend for FixtureSearchBackend {
    fn search(&self, query: &str, _cutoff: DateTime<Utc>) -> Result<Vec<Snippet>, ToolError> {
        let needle = query.to_lowercase();
        Ok(self
            .docs
            .iter()
            .filter(|d| {
                d.title.to_lowercase().contains(&needle) || d.text.to_lowercase().contains(&needle)
            })
            .take(10)
            .map(|d| Snippet {
                title: d.title.clone(),
                url: d.url.clone(),
                text: d.text.clone(),
                published_at: Some(d.published_at),
            })
            .collect())
    }

    fn fetch(&self, url: &str) -> Result<FetchedPage, ToolError> {
        self.docs
            .iter()
            .find(|d| d.url == url)
            .map(|d| FetchedPage {
                text: d.text.clone(),
                published_at: Some(d.published_at),
            })
            .ok_or_else(|| ToolError::NotFound(url.to_owned()))
    }
}

/// A search backend with no documents: searches return nothing and fetches
/// fail. Used when a scripted run provides no corpus.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSearchBackend;

impl SearchBackend for NullSearchBackend {
    fn search(&self, _query: &str, _cutoff: DateTime<Utc>) -> Result<Vec<Snippet>, ToolError> {
        Ok(Vec::new())
    }

    fn fetch(&self, url: &str) -> Result<FetchedPage, ToolError> {
        Err(ToolError::NotFound(url.to_owned()))
    }
}

/// The predict loop failed.
#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("chat backend failed: {0}")]
    Backend(#[from] BackendError),
}

enum ParsedAction {
    Search(String),
    Fetch(String),
    Final(Vec<f64>),
    None,
}

/// Extracts the first balanced JSON object or array from free text,
/// honouring string literals and escapes.
pub fn extract_json(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|&b| b == b'{' || b == b'[')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_action(reply: &str, candidates: &[String]) -> ParsedAction {
    let Some(json) = extract_json(reply) else {
        return ParsedAction::None;
    };
    let Ok(value) = serde_json::from_str::<serde_json::Value>(json) else {
        return ParsedAction::None;
    };
    let Some(object) = value.as_object() else {
        return ParsedAction::None;
    };
    match object.get("action").and_then(|a| a.as_str()) {
        Some("search") => {
            if let Some(query) = object.get("query").and_then(|q| q.as_str()) {
                return ParsedAction::Search(query.to_owned());
            }
            ParsedAction::None
        }
        Some("fetch") => {
            if let Some(url) = object.get("url").and_then(|u| u.as_str()) {
                return ParsedAction::Fetch(url.to_owned());
            }
            ParsedAction::None
        }
        _ => {
            // Interpret as the final candidate -> probability map. Missing
            // candidates get weight 0; at least one candidate must appear.
            if !candidates.iter().any(|c| object.contains_key(c)) {
                return ParsedAction::None;
            }
            let weights: Vec<f64> = candidates
                .iter()
                .map(|c| object.get(c).and_then(|v| v.as_f64()).unwrap_or(0.0))
                .collect();
            ParsedAction::Final(weights)
        }
    }
}

fn render_snippets(snippets: &[Snippet]) -> String {
    if snippets.is_empty() {
        return "No results found before the information cutoff.".to_owned();
    }
    snippets
        .iter()
        .map(|s| {
            let date = s
                .published_at
                .map(|t| t.to_rfc3339())
                .unwrap_or_else(|| "undated".to_owned());
            format!("[{}] ({}, {}) {}", s.title, s.url, date, s.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the agent prompt for a task, with the compiled guideline block
/// when one is supplied and non-empty.
pub fn render_prediction_prompt(task: &Task, guideline: Option<&Guideline>) -> String {
    let candidate_list = task
        .candidates
        .iter()
        .map(|c| format!("{c:?}"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut prompt = format!(
        "You are a forecasting agent. Estimate the probability of each possible \
         outcome of the event below.\n\n\
         Event: {}\n\
         Possible outcomes: {}\n",
        task.question, candidate_list
    );
    if let Some(g) = guideline {
        if !g.is_empty() {
            prompt.push_str("\nTask-Specific Guideline (compiled from past experiences):\n");
            for bullet in &g.bullets {
                prompt.push_str(&format!("- {bullet}\n"));
            }
            prompt.push_str(
                "\nCRITICAL: How to Properly Use This Guideline\n\
                 1. Verify Applicability: before applying any point, check that it \
                 genuinely fits this specific task; adapt or ignore points that do not.\n\
                 2. Trust Your Current Research: when fresh evidence contradicts the \
                 guideline, favor the fresh evidence.\n",
            );
        }
    }
    let example = format!(
        "{{{:?}: 0.7, {:?}: 0.3}}",
        task.candidates[0], task.candidates[1]
    );
    prompt.push_str(&format!(
        "\nYour task:\n\
         1. Research the event using the tools.\n\
         2. Weigh the evidence for each possible outcome.\n\
         3. Output your final probability for every outcome.\n\n\
         Output as JSON.\n\n\
         Tools (reply with exactly one JSON object per turn):\n\
         - {{\"action\": \"search\", \"query\": \"<terms>\"}} searches for dated articles.\n\
         - {{\"action\": \"fetch\", \"url\": \"<url>\"}} fetches one page.\n\
         - When done, reply with a JSON object mapping every outcome to its \
         probability, e.g. {example}.\n"
    ));
    prompt
}

const NUDGE: &str =
    "Reply with exactly one JSON object: a tool action or your final outcome probabilities.";

/// Runs the research-and-forecast loop for one task.
///
/// Each turn the model replies with one JSON action; tool results are fed
/// back as user messages. Tool failures are recorded in the trajectory and
/// the loop continues. If the turn cap is reached without a final answer the
/// forecast falls back to uniform, recorded as a `uniform-fallback` tool
/// call/result pair. Only chat-backend failures abort.
pub fn predict(
    chat: &dyn ChatBackend,
    tools: &dyn SearchBackend,
    settings: &PredictorSettings,
    operation: Operation,
    task: &Task,
    guideline: Option<&Guideline>,
) -> Result<(Forecast, Trajectory), PredictError> {
    task.validate()?;
    let cutoff = task.cutoff(settings.cutoff_offset_hours);
    let ctx = CallContext {
        operation,
        task_id: task.id.clone(),
    };
    let mut trajectory = Trajectory::default();
    let stamp = |settings: &PredictorSettings| {
        if settings.record_timestamps {
            Some(Utc::now())
        } else {
            None
        }
    };
    let mut messages = vec![ChatMessage::user(render_prediction_prompt(task, guideline))];
    for _turn in 0..settings.turn_cap {
        let request = ChatRequest {
            messages: messages.clone(),
            temperature: settings.temperature,
        };
        let reply = chat.complete(&ctx, &request)?;
        trajectory.steps.push(TrajectoryStep {
            kind: StepKind::ModelMessage,
            content: reply.clone(),
            timestamp: stamp(settings),
        });
        match parse_action(&reply, &task.candidates) {
            ParsedAction::Search(query) => {
                let call = extract_json(&reply).unwrap_or(&reply).to_owned();
                let result_text = match search(tools, &query, cutoff) {
                    Ok(snippets) => render_snippets(&snippets),
                    Err(err) => format!("error: {err}"),
                };
                trajectory.steps.push(TrajectoryStep {
                    kind: StepKind::ToolCall,
                    content: call,
                    timestamp: stamp(settings),
                });
                trajectory.steps.push(TrajectoryStep {
                    kind: StepKind::ToolResult,
                    content: result_text.clone(),
                    timestamp: stamp(settings),
                });
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!("Tool result:\n{result_text}")));
            }
            ParsedAction::Fetch(url) => {
                let call = extract_json(&reply).unwrap_or(&reply).to_owned();
                let result_text = match fetch_page(
                    tools,
                    chat,
                    &task.id,
                    &url,
                    cutoff,
                    settings.page_char_budget,
                    settings.temperature,
                ) {
                    Ok(text) => text,
                    Err(err) => format!("error: {err}"),
                };
                trajectory.steps.push(TrajectoryStep {
                    kind: StepKind::ToolCall,
                    content: call,
                    timestamp: stamp(settings),
                });
                trajectory.steps.push(TrajectoryStep {
                    kind: StepKind::ToolResult,
                    content: result_text.clone(),
                    timestamp: stamp(settings),
                });
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!("Tool result:\n{result_text}")));
            }
            ParsedAction::Final(weights) => match Forecast::from_weights(weights) {
                Ok(forecast) => return Ok((forecast, trajectory)),
                Err(err) => {
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(format!(
                        "Your probabilities were invalid ({err}). {NUDGE}"
                    )));
                }
            },
            ParsedAction::None => {
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(NUDGE.to_owned()));
            }
        }
    }
    trajectory.steps.push(TrajectoryStep {
        kind: StepKind::ToolCall,
        content: "uniform-fallback".to_owned(),
        timestamp: stamp(settings),
    });
    trajectory.steps.push(TrajectoryStep {
        kind: StepKind::ToolResult,
        content: "turn cap reached; defaulting to uniform probabilities".to_owned(),
        timestamp: stamp(settings),
    });
    let uniform =
        Forecast::uniform(task.candidates.len()).expect("validated task has at least 2 candidates");
    Ok((uniform, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;
    use std::sync::Mutex;

    fn utc(s: &str) -> DateTime<Utc> {
        s.parse().unwrap()
    }

    fn task() -> Task {
        Task {
            id: "t1".into(),
            question: "Will it rain tomorrow?".into(),
            candidates: vec!["yes".into(), "no".into()],
            market_prices: Some(vec![0.5, 0.5]),
            close_time: utc("2025-06-01T12:00:00Z"),
            batch_id: 1,
        }
    }

    /// Chat stub replaying replies in order, recording operations seen.
    struct ReplyQueue {
        replies: Mutex<VecDeque<String>>,
        operations: Mutex<Vec<Operation>>,
    }

    impl ReplyQueue {
        fn new(replies: &[&str]) -> Self {
            ReplyQueue {
                replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()),
                operations: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatBackend for ReplyQueue {
        fn complete(
            &self,
            ctx: &CallContext,
            _request: &ChatRequest,
        ) -> Result<String, BackendError> {
            self.operations.lock().unwrap().push(ctx.operation);
            self.replies
                .lock()
                .unwrap()
                .pop_front()
                .ok_or(BackendError::ScriptExhausted {
                    operation: ctx.operation,
                    task_id: ctx.task_id.clone(),
                })
        }
    }

    #[test]
    fn task_validation_catches_structural_errors() {
        assert!(task().validate().is_ok());
        let mut t = task();
        t.candidates = vec!["only".into()];
        assert!(t.validate().is_err());
        let mut t = task();
        t.candidates = vec!["a".into(), "a".into()];
        assert!(t.validate().unwrap_err().to_string().contains("duplicate"));
        let mut t = task();
        t.market_prices = Some(vec![0.5]);
        assert!(t.validate().is_err());
        let mut t = task();
        t.market_prices = Some(vec![0.5, 1.5]);
        assert!(t.validate().is_err());
        let mut t = task();
        t.question = "  ".into();
        assert!(t.validate().is_err());
    }

    #[test]
    fn cutoff_subtracts_offset_from_close_time() {
        assert_eq!(task().cutoff(6), utc("2025-06-01T06:00:00Z"));
        assert_eq!(task().cutoff(0), utc("2025-06-01T12:00:00Z"));
    }

    #[test]
    fn forecast_renormalizes_weights() {
        let f = Forecast::from_weights(vec![2.0, 1.0, 1.0]).unwrap();
        assert_eq!(f.probs(), &[0.5, 0.25, 0.25]);
        let f = Forecast::from_weights(vec![0.0, 3.0]).unwrap();
        assert_eq!(f.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn forecast_validates_weights() {
        assert!(matches!(
            Forecast::from_weights(vec![1.0]),
            Err(ForecastError::TooFewComponents(1))
        ));
        assert!(matches!(
            Forecast::from_weights(vec![1.0, f64::NAN]),
            Err(ForecastError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Forecast::from_weights(vec![1.0, -0.1]),
            Err(ForecastError::Negative { index: 1, .. })
        ));
        assert!(matches!(
            Forecast::from_weights(vec![0.0, 0.0]),
            Err(ForecastError::ZeroSum)
        ));
    }

    #[test]
    fn forecast_uniform_and_serde() {
        let u = Forecast::uniform(4).unwrap();
        assert_eq!(u.probs(), &[0.25, 0.25, 0.25, 0.25]);
        let f = Forecast::from_weights(vec![1.0, 3.0]).unwrap();
        assert_eq!(serde_json::to_string(&f).unwrap(), "[0.25,0.75]");
        // Parsing accepts distributions verbatim and rejects anything else:
        // persisted forecasts must round-trip without renormalization drift.
        let parsed: Forecast = serde_json::from_str("[0.75,0.25]").unwrap();
        assert_eq!(parsed.probs(), &[0.75, 0.25]);
        assert!(serde_json::from_str::<Forecast>("[3, 1]").is_err());
        assert!(serde_json::from_str::<Forecast>("[1.0]").is_err());
        assert!(serde_json::from_str::<Forecast>("[-1.0, 2.0]").is_err());
    }

    #[test]
    fn forecast_from_probs_is_verbatim_within_tolerance() {
        // A renormalized triple whose stored components do not sum to
        // exactly 1.0 still round-trips bit-for-bit.
        let f = Forecast::from_weights(vec![0.1, 0.2, 0.7]).unwrap();
        let round_tripped = Forecast::from_probs(f.probs().to_vec()).unwrap();
        assert_eq!(f, round_tripped);
        assert!(matches!(
            Forecast::from_probs(vec![0.6, 0.6]),
            Err(ForecastError::NotADistribution { .. })
        ));
        assert!(matches!(
            Forecast::from_probs(vec![0.25]),
            Err(ForecastError::TooFewComponents(1))
        ));
    }

    #[test]
    fn outcome_validates_indices() {
        let o = Outcome::from_index(1, 3).unwrap();
        assert_eq!(o.winner(), 1);
        assert_eq!(o.k(), 3);
        assert!(Outcome::from_index(3, 3).is_err());
        assert!(Outcome::from_index(0, 1).is_err());
    }

    #[test]
    fn extract_json_handles_nesting_strings_and_prose() {
        assert_eq!(
            extract_json(r#"I think {"a": {"b": 1}} works"#),
            Some(r#"{"a": {"b": 1}}"#)
        );
        assert_eq!(
            extract_json(r#"{"s": "braces } in \" string"} tail"#),
            Some(r#"{"s": "braces } in \" string"}"#)
        );
        assert_eq!(extract_json("pick [1, [2, 3]] please"), Some("[1, [2, 3]]"));
        assert_eq!(extract_json("no json here"), None);
        assert_eq!(extract_json("{ unbalanced"), None);
    }

    struct StubSearch {
        snippets: Vec<Snippet>,
        page: Option<FetchedPage>,
    }

    impl SearchBackend for StubSearch {
        fn search(&self, _q: &str, _c: DateTime<Utc>) -> Result<Vec<Snippet>, ToolError> {
            Ok(self.snippets.clone())
        }
        fn fetch(&self, url: &str) -> Result<FetchedPage, ToolError> {
            self.page
                .clone()
                .ok_or_else(|| ToolError::NotFound(url.to_owned()))
        }
    }

    fn snippet(title: &str, date: Option<&str>) -> Snippet {
        Snippet {
            title: title.into(),
            url: format!("https://example.com/{title}"),
            text: format!("text of {title}"),
            published_at: date.map(utc),
        }
    }

    #[test]
    fn search_wrapper_drops_undated_and_post_cutoff_snippets() {
        let backend = StubSearch {
            snippets: vec![
                snippet("early", Some("2025-05-01T00:00:00Z")),
                snippet("late", Some("2025-07-01T00:00:00Z")),
                snippet("undated", None),
                snippet("exactly-at", Some("2025-06-01T00:00:00Z")),
            ],
            page: None,
        };
        let hits = search(&backend, "q", utc("2025-06-01T00:00:00Z")).unwrap();
        let titles: Vec<_> = hits.iter().map(|s| s.title.as_str()).collect();
        assert_eq!(titles, vec!["early", "exactly-at"]);
    }

    #[test]
    fn fetch_page_enforces_cutoff_and_budget() {
        let cutoff = utc("2025-06-01T00:00:00Z");
        let chat = ReplyQueue::new(&["a concise summary"]);
        // After cutoff: hard error.
        let late = StubSearch {
            snippets: vec![],
            page: Some(FetchedPage {
                text: "secret".into(),
                published_at: Some(utc("2025-06-02T00:00:00Z")),
            }),
        };
        assert!(matches!(
            fetch_page(&late, &chat, "t1", "u", cutoff, 100, 0.2),
            Err(ToolError::AfterCutoff)
        ));
        // Within budget: raw text passes through, no chat call.
        let small = StubSearch {
            snippets: vec![],
            page: Some(FetchedPage {
                text: "short page".into(),
                published_at: Some(utc("2025-05-01T00:00:00Z")),
            }),
        };
        assert_eq!(
            fetch_page(&small, &chat, "t1", "u", cutoff, 100, 0.2).unwrap(),
            "short page"
        );
        assert!(chat.operations.lock().unwrap().is_empty());
        // Over budget: summarized via the chat backend.
        let big = StubSearch {
            snippets: vec![],
            page: Some(FetchedPage {
                text: "x".repeat(101),
                published_at: Some(utc("2025-05-01T00:00:00Z")),
            }),
        };
        assert_eq!(
            fetch_page(&big, &chat, "t1", "u", cutoff, 100, 0.2).unwrap(),
            "a concise summary"
        );
        assert_eq!(
            *chat.operations.lock().unwrap(),
            vec![Operation::SummarizePage]
        );
        // Undated page within budget is allowed (cutoff can't be checked,
        // fetch is explicit user intent; search-level filtering already
        // dropped undated discovery paths).
        let undated = StubSearch {
            snippets: vec![],
            page: Some(FetchedPage {
                text: "undated page".into(),
                published_at: None,
            }),
        };
        assert_eq!(
            fetch_page(&undated, &chat, "t1", "u", cutoff, 100, 0.2).unwrap(),
            "undated page"
        );
    }

    #[test]
    fn fixture_backend_searches_by_substring_and_fetches_by_url() {
        let docs = vec![
            CorpusDoc {
                url: "https://a".into(),
                title: "Rates decision".into(),
                text: "The central bank held rates steady.".into(),
                published_at: utc("2025-05-01T00:00:00Z"),
            },
            CorpusDoc {
                url: "https://b".into(),
                title: "Weather".into(),
                text: "Heavy rain expected; RATES of precipitation are high.".into(),
                published_at: utc("2025-05-02T00:00:00Z"),
            },
        ];
        let backend = FixtureSearchBackend::new(docs);
        let hits = backend
            .search("rates", utc("2025-06-01T00:00:00Z"))
            .unwrap();
        assert_eq!(
            hits.len(),
            2,
            "matching is case-insensitive over title and body"
        );
        assert_eq!(hits[0].url, "https://a", "file order is preserved");
        let hits = backend
            .search("held rates steady", utc("2025-06-01T00:00:00Z"))
            .unwrap();
        assert_eq!(hits.len(), 1);
        assert!(backend
            .search("absent", utc("2025-06-01T00:00:00Z"))
            .unwrap()
            .is_empty());
        assert_eq!(
            backend.fetch("https://b").unwrap().text.contains("rain"),
            true
        );
        assert!(matches!(
            backend.fetch("https://zz"),
            Err(ToolError::NotFound(_))
        ));
    }

    #[test]
    fn fixture_backend_caps_results_at_ten() {
        let docs: Vec<CorpusDoc> = (0..15)
            .map(|i| CorpusDoc {
                url: format!("https://doc/{i}"),
                title: format!("common doc {i}"),
                text: "shared token".into(),
                published_at: utc("2025-05-01T00:00:00Z"),
            })
            .collect();
        let backend = FixtureSearchBackend::new(docs);
        let hits = backend
            .search("shared", utc("2025-06-01T00:00:00Z"))
            .unwrap();
        assert_eq!(hits.len(), 10);
        assert_eq!(hits[9].url, "https://doc/9");
    }

    #[test]
    fn fixture_corpus_load_reports_line_numbers_and_requires_dates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(
            &path,
            "{\"url\":\"u\",\"title\":\"t\",\"text\":\"x\",\"published_at\":\"2025-05-01T00:00:00Z\"}\n\
             {\"url\":\"v\",\"title\":\"t2\",\"text\":\"y\"}\n",
        )
        .unwrap();
        let err = FixtureSearchBackend::load(&path).unwrap_err().to_string();
        assert!(
            err.contains(":2:"),
            "undated doc rejected with line number: {err}"
        );
    }

    #[test]
    fn predict_runs_search_then_final() {
        let chat = ReplyQueue::new(&[
            r#"Let me research. {"action": "search", "query": "rain forecast"}"#,
            r#"Based on the result: {"yes": 0.7, "no": 0.3}"#,
        ]);
        let tools = StubSearch {
            snippets: vec![snippet("forecast", Some("2025-05-30T00:00:00Z"))],
            page: None,
        };
        let settings = PredictorSettings::default();
        let (forecast, trajectory) = predict(
            &chat,
            &tools,
            &settings,
            Operation::PredictBaseline,
            &task(),
            None,
        )
        .unwrap();
        assert_eq!(forecast.probs(), &[0.7, 0.3]);
        let kinds: Vec<StepKind> = trajectory.steps.iter().map(|s| s.kind).collect();
        assert_eq!(
            kinds,
            vec![
                StepKind::ModelMessage,
                StepKind::ToolCall,
                StepKind::ToolResult,
                StepKind::ModelMessage
            ]
        );
        assert!(trajectory.steps[2].content.contains("forecast"));
        assert!(trajectory.steps.iter().all(|s| s.timestamp.is_none()));
        assert_eq!(
            *chat.operations.lock().unwrap(),
            vec![Operation::PredictBaseline, Operation::PredictBaseline]
        );
    }

    #[test]
    fn predict_final_map_fills_missing_candidates_with_zero() {
        let chat = ReplyQueue::new(&[r#"{"yes": 0.8}"#]);
        let tools = NullSearchBackend;
        let (forecast, _) = predict(
            &chat,
            &tools,
            &PredictorSettings::default(),
            Operation::PredictBaseline,
            &task(),
            None,
        )
        .unwrap();
        assert_eq!(forecast.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn predict_renormalizes_unnormalized_finals() {
        let chat = ReplyQueue::new(&[r#"{"yes": 3, "no": 1}"#]);
        let (forecast, _) = predict(
            &chat,
            &NullSearchBackend,
            &PredictorSettings::default(),
            Operation::PredictBaseline,
            &task(),
            None,
        )
        .unwrap();
        assert_eq!(forecast.probs(), &[0.75, 0.25]);
    }

    #[test]
    fn predict_nudges_on_non_action_replies() {
        let chat = ReplyQueue::new(&[
            "I will look into this question in depth.",
            r#"{"yes": 0.6, "no": 0.4}"#,
        ]);
        let (forecast, trajectory) = predict(
            &chat,
            &NullSearchBackend,
            &PredictorSettings::default(),
            Operation::PredictBaseline,
            &task(),
            None,
        )
        .unwrap();
        assert_eq!(forecast.probs(), &[0.6, 0.4]);
        // Both model replies recorded; the nudge itself is not a step.
        let kinds: Vec<StepKind> = trajectory.steps.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![StepKind::ModelMessage, StepKind::ModelMessage]);
    }

    #[test]
    fn predict_nudges_on_invalid_final_probabilities() {
        let chat = ReplyQueue::new(&[r#"{"yes": 0, "no": 0}"#, r#"{"yes": 1, "no": 0}"#]);
        let (forecast, _) = predict(
            &chat,
            &NullSearchBackend,
            &PredictorSettings::default(),
            Operation::PredictBaseline,
            &task(),
            None,
        )
        .unwrap();
        assert_eq!(forecast.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn predict_falls_back_to_uniform_at_turn_cap() {
        let chat = ReplyQueue::new(&["thinking...", "still thinking...", "hmm..."]);
        let settings = PredictorSettings {
            turn_cap: 3,
            ..Default::default()
        };
        let (forecast, trajectory) = predict(
            &chat,
            &NullSearchBackend,
            &settings,
            Operation::PredictMemory,
            &task(),
            None,
        )
        .unwrap();
        assert_eq!(forecast.probs(), &[0.5, 0.5]);
        let tail: Vec<&str> = trajectory.steps[3..]
            .iter()
            .map(|s| s.content.as_str())
            .collect();
        assert_eq!(tail[0], "uniform-fallback");
        assert!(tail[1].contains("turn cap"));
    }

    #[test]
    fn predict_records_tool_errors_and_continues() {
        let chat = ReplyQueue::new(&[
            r#"{"action": "fetch", "url": "https://missing"}"#,
            r#"{"yes": 0.5, "no": 0.5}"#,
        ]);
        let (_, trajectory) = predict(
            &chat,
            &NullSearchBackend,
            &PredictorSettings::default(),
            Operation::PredictBaseline,
            &task(),
            None,
        )
        .unwrap();
        let result = trajectory
            .steps
            .iter()
            .find(|s| s.kind == StepKind::ToolResult)
            .unwrap();
        assert!(result.content.starts_with("error:"), "{}", result.content);
    }

    #[test]
    fn predict_propagates_chat_backend_failure() {
        let chat = ReplyQueue::new(&[]);
        let err = predict(
            &chat,
            &NullSearchBackend,
            &PredictorSettings::default(),
            Operation::PredictBaseline,
            &task(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, PredictError::Backend(_)));
    }

    #[test]
    fn prediction_prompt_includes_guideline_only_when_nonempty() {
        let t = task();
        let bare = render_prediction_prompt(&t, None);
        assert!(bare.contains("Event: Will it rain tomorrow?"));
        assert!(bare.contains(r#"Possible outcomes: "yes", "no""#));
        assert!(!bare.contains("Task-Specific Guideline"));

        let g = Guideline {
            bullets: vec!["check the radar".into()],
            source_experience_ids: vec!["e1".into()],
            meta_guideline_id: "default".into(),
        };
        let with = render_prediction_prompt(&t, Some(&g));
        assert!(with.contains("- check the radar"));
        assert!(with.contains("Verify Applicability"));
        assert!(with.contains("Trust Your Current Research"));

        let empty = Guideline::empty();
        let without = render_prediction_prompt(&t, Some(&empty));
        assert_eq!(without, bare);
    }

    #[test]
    fn trajectory_render_labels_steps() {
        let t = Trajectory {
            steps: vec![
                TrajectoryStep {
                    kind: StepKind::ModelMessage,
                    content: "hi".into(),
                    timestamp: None,
                },
                TrajectoryStep {
                    kind: StepKind::ToolCall,
                    content: "call".into(),
                    timestamp: None,
                },
            ],
        };
        assert_eq!(t.render(), "[model] hi\n[tool_call] call");
    }

    #[test]
    fn trajectory_serde_omits_null_timestamps() {
        let t = Trajectory {
            steps: vec![TrajectoryStep {
                kind: StepKind::ModelMessage,
                content: "hi".into(),
                timestamp: None,
            }],
        };
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(
            json,
            r#"{"steps":[{"kind":"model_message","content":"hi"}]}"#
        );
        let back: Trajectory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }
}
