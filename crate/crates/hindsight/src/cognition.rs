//! Chat-backend abstraction and the cognitive operations the engine asks a
//! language model to perform: retrieval-query generation, guideline
//! compilation, failure reflection, and experience summarization.
//!
//! Every call is tagged with a [`CallContext`] naming the [`Operation`] and
//! task id. The [`ScriptedBackend`] replays recorded transcripts keyed by
//! that pair, which makes the entire engine loop hermetic and
//! byte-reproducible; [`crate::live::HttpChatBackend`] serves the same trait
//! against a real chat API.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{Experience, MetaGuideline, QueryTarget, RetrievalQuery};
use crate::predictor::{extract_json, Task, Trajectory};

/// Maximum retrieval queries kept from one generation reply.
pub const MAX_RETRIEVAL_QUERIES: usize = 3;
/// Maximum bullets kept in one compiled guideline.
pub const MAX_GUIDELINE_BULLETS: usize = 8;

/// One chat message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

/// One chat completion request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

/// The distinct LLM operations the engine performs. Scripted transcripts are
/// keyed by operation and task id, so each call site replays independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    /// Produce retrieval queries for a task.
    GenerateQueries,
    /// Compile retrieved experiences into a task guideline.
    CompileGuideline,
    /// Compile a candidate experience into a guideline during acquisition.
    CompileCandidate,
    /// Diagnose why memory hurt and propose a synthesis instruction.
    Reflect,
    /// Distill a failed trajectory into a candidate experience.
    SummarizeExperience,
    /// Forecast with the compiled guideline.
    PredictMemory,
    /// Forecast without memory.
    PredictBaseline,
    /// Forecast with a candidate guideline during verification.
    PredictCandidate,
    /// Compress an over-budget fetched page.
    SummarizePage,
}

impl Operation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Operation::GenerateQueries => "generate_queries",
            Operation::CompileGuideline => "compile_guideline",
            Operation::CompileCandidate => "compile_candidate",
            Operation::Reflect => "reflect",
            Operation::SummarizeExperience => "summarize_experience",
            Operation::PredictMemory => "predict_memory",
            Operation::PredictBaseline => "predict_baseline",
            Operation::PredictCandidate => "predict_candidate",
            Operation::SummarizePage => "summarize_page",
        }
    }
}

/// Which operation on which task a chat call belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub operation: Operation,
    pub task_id: String,
}

/// Chat backend failures.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no scripted replies for operation {} on task {task_id:?}", operation.as_str())]
    MissingScript {
        operation: Operation,
        task_id: String,
    },
    #[error("scripted replies exhausted for operation {} on task {task_id:?}", operation.as_str())]
    ScriptExhausted {
        operation: Operation,
        task_id: String,
    },
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
}

/// Something that can complete a chat request.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, ctx: &CallContext, request: &ChatRequest) -> Result<String, BackendError>;
}

/// One transcript line: the ordered replies for an (operation, task) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub operation: Operation,
    pub task_id: String,
    pub replies: Vec<String>,
}

/// A transcript file failed to load.
#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Deterministic chat backend replaying a recorded transcript.
///
/// Replies are keyed by (operation, task id) and consumed front to back;
/// repeated keys in the file concatenate in file order. Asking for a key the
/// transcript never defined is [`BackendError::MissingScript`]; draining a
/// defined key is [`BackendError::ScriptExhausted`].
#[derive(Debug)]
pub struct ScriptedBackend {
    scripts: Mutex<HashMap<(Operation, String), VecDeque<String>>>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        let mut scripts: HashMap<(Operation, String), VecDeque<String>> = HashMap::new();
        for entry in entries {
            scripts
                .entry((entry.operation, entry.task_id))
                .or_default()
                .extend(entry.replies);
        }
        ScriptedBackend {
            scripts: Mutex::new(scripts),
        }
    }

    /// Loads a JSONL transcript; errors carry the offending line number.
    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let content = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(line).map_err(|err| TranscriptError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: err.to_string(),
                })?;
            entries.push(entry);
        }
        Ok(ScriptedBackend::from_entries(entries))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, ctx: &CallContext, _request: &ChatRequest) -> Result<String, BackendError> {
        let mut scripts = self.scripts.lock().expect("script table poisoned");
        let key = (ctx.operation, ctx.task_id.clone());
        match scripts.get_mut(&key) {
            None => Err(BackendError::MissingScript {
                operation: ctx.operation,
                task_id: ctx.task_id.clone(),
            }),
            Some(queue) => queue.pop_front().ok_or(BackendError::ScriptExhausted {
                operation: ctx.operation,
                task_id: ctx.task_id.clone(),
            }),
        }
    }
}

/// A cognitive operation failed.
#[derive(Debug, Error)]
pub enum CognitionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("malformed {} reply: {detail}", operation.as_str())]
    MalformedReply {
        operation: Operation,
        detail: String,
    },
    #[error("cannot summarize an empty trajectory")]
    EmptyTrajectory,
}

/// An experience paired with the weighted score it was retrieved at.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedExperience {
    pub experience: Experience,
    pub weighted_score: f64,
}

/// A compiled task guideline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guideline {
    /// Actionable bullet points (empty = no guideline).
    pub bullets: Vec<String>,
    /// Ids of the experiences the guideline was compiled from, best first.
    pub source_experience_ids: Vec<String>,
    /// Id of the meta-guideline that steered compilation.
    pub meta_guideline_id: String,
}

impl Guideline {
    /// The no-guideline sentinel (nothing retrieved).
    pub fn empty() -> Self {
        Guideline {
            bullets: Vec::new(),
            source_experience_ids: Vec::new(),
            meta_guideline_id: String::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.bullets.is_empty()
    }
}

/// Output of failure reflection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionRecord {
    pub failure_pattern: String,
    pub synthesis_instruction: String,
}

/// Prompt for retrieval-query generation.
pub fn render_query_prompt(task: &Task) -> String {
    format!(
        "You are preparing to forecast the event below and want to recall \
         relevant lessons from an experience bank.\n\n\
         Event: {}\n\n\
         Propose up to {MAX_RETRIEVAL_QUERIES} short retrieval queries. Each query \
         targets either the original questions of stored experiences \
         (\"question\") or the lesson content itself (\"experience\").\n\n\
         Reply with JSON only:\n\
         {{\"queries\": [{{\"query\": \"<terms>\", \"search_target\": \"question\"}}]}}\n",
        task.question
    )
}

/// Prompt for compiling ranked experiences into a guideline under a
/// meta-guideline.
pub fn render_compile_prompt(
    task: &Task,
    ranked: &[RankedExperience],
    meta: &MetaGuideline,
) -> String {
    let mut prompt = format!(
        "You are synthesizing insights from past prediction experiences into \
         one guideline for the task below.\n\n\
         Task: {}\n\n\
         Past experiences (most relevant first):\n",
        task.question
    );
    for (i, r) in ranked.iter().enumerate() {
        prompt.push_str(&format!(
            "[Experience {} Summary: {} Improvement: {}]\n",
            i + 1,
            r.experience.failure_reason,
            r.experience.improvement
        ));
    }
    prompt.push_str(&format!(
        "\nCRITICAL: Experience Applicability Check\n{}\n\n\
         Produce one FOCUSED and ACTIONABLE guideline (3-5 bullet points) for \
         this task. Output ONLY the bullet points.\n",
        meta.synthesis_instruction
    ));
    prompt
}

/// Prompt for reflecting on a task where memory hurt.
pub fn render_reflect_prompt(task: &Task, gain: f64, guideline: &Guideline) -> String {
    let bullets = if guideline.bullets.is_empty() {
        "(none)".to_owned()
    } else {
        guideline
            .bullets
            .iter()
            .map(|b| format!("- {b}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    format!(
        "Using retrieved experiences made this forecast WORSE than forecasting \
         without memory (utility gain {gain}).\n\n\
         Task: {}\n\n\
         Guideline that was applied:\n{bullets}\n\n\
         Diagnose the failure pattern and write an instruction for how future \
         guideline compilation should treat experiences for tasks like this.\n\n\
         Reply with JSON only:\n\
         {{\"failure_pattern\": \"<what went wrong>\", \
         \"synthesis_instruction\": \"<how to compile better>\"}}\n",
        task.question
    )
}

/// Prompt for distilling a trajectory into a candidate experience.
pub fn render_summarize_prompt(
    task: &Task,
    trajectory: &Trajectory,
    outcome_label: &str,
) -> String {
    format!(
        "The forecast below scored poorly. Distill ONE reusable lesson from it.\n\n\
         Task: {}\n\
         Actual outcome: {}\n\n\
         Trajectory:\n{}\n\n\
         Reply with JSON only:\n\
         {{\"category\": \"<topic>\", \"failure_reason\": \"<why it went wrong>\", \
         \"improvement\": \"<what to do differently>\", \
         \"missed_information\": \"<what was available but missed>\"}}\n",
        task.question,
        outcome_label,
        trajectory.render()
    )
}

fn one_shot(
    chat: &dyn ChatBackend,
    operation: Operation,
    task_id: &str,
    prompt: String,
    temperature: f64,
) -> Result<String, BackendError> {
    let ctx = CallContext {
        operation,
        task_id: task_id.to_owned(),
    };
    let request = ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature,
    };
    chat.complete(&ctx, &request)
}

#[derive(Deserialize)]
struct QueriesReply {
    queries: Vec<QueryItem>,
}

#[derive(Deserialize)]
struct QueryItem {
    query: String,
    #[serde(default)]
    search_target: Option<String>,
}

/// Asks the model for retrieval queries.
///
/// Malformed replies never fail the task: anything unusable degrades to a
/// single query of the raw task question targeting stored questions. At most
/// [`MAX_RETRIEVAL_QUERIES`] queries are kept; unknown targets coerce to
/// `question`; empty query strings are dropped.
pub fn generate_queries(
    chat: &dyn ChatBackend,
    task: &Task,
    temperature: f64,
) -> Result<Vec<RetrievalQuery>, BackendError> {
    let reply = one_shot(
        chat,
        Operation::GenerateQueries,
        &task.id,
        render_query_prompt(task),
        temperature,
    )?;
    let fallback = || {
        vec![RetrievalQuery {
            query: task.question.clone(),
            target: QueryTarget::Question,
        }]
    };
    let Some(json) = extract_json(&reply) else {
        return Ok(fallback());
    };
    let Ok(parsed) = serde_json::from_str::<QueriesReply>(json) else {
        return Ok(fallback());
    };
    let queries: Vec<RetrievalQuery> = parsed
        .queries
        .into_iter()
        .filter(|q| !q.query.trim().is_empty())
        .take(MAX_RETRIEVAL_QUERIES)
        .map(|q| RetrievalQuery {
            query: q.query,
            target: match q.search_target.as_deref() {
                Some("experience") => QueryTarget::Experience,
                _ => QueryTarget::Question,
            },
        })
        .collect();
    if queries.is_empty() {
        return Ok(fallback());
    }
    Ok(queries)
}

/// Extracts guideline bullets from a model reply: JSON first (an object with
/// a `bullets` array, or a bare string array), then marker lines
/// (`-`, `*`, `•`, `1.`, `1)`), then any non-empty lines.
fn parse_bullets(reply: &str) -> Vec<String> {
    fn clean(items: Vec<String>) -> Vec<String> {
        items
            .into_iter()
            .map(|s| s.trim().to_owned())
            .filter(|s| !s.is_empty())
            .take(MAX_GUIDELINE_BULLETS)
            .collect()
    }
    if let Some(json) = extract_json(reply) {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(json) {
            let array = match &value {
                serde_json::Value::Array(items) => Some(items),
                serde_json::Value::Object(map) => map.get("bullets").and_then(|b| b.as_array()),
                _ => None,
            };
            if let Some(items) = array {
                let bullets: Vec<String> = items
                    .iter()
                    .filter_map(|v| v.as_str().map(str::to_owned))
                    .collect();
                if !bullets.is_empty() {
                    return clean(bullets);
                }
            }
        }
    }
    let marker_lines: Vec<String> = reply
        .lines()
        .filter_map(|line| {
            let trimmed = line.trim();
            let stripped = trimmed
                .strip_prefix("- ")
                .or_else(|| trimmed.strip_prefix("* "))
                .or_else(|| trimmed.strip_prefix("• "))
                .or_else(|| trimmed.strip_prefix('-'))
                .or_else(|| trimmed.strip_prefix('*'))
                .or_else(|| trimmed.strip_prefix('•'))
                .or_else(|| {
                    let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
                    if digits > 0 {
                        let rest = &trimmed[digits..];
                        rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))
                    } else {
                        None
                    }
                })?;
            let bullet = stripped.trim();
            (!bullet.is_empty()).then(|| bullet.to_owned())
        })
        .collect();
    if !marker_lines.is_empty() {
        return clean(marker_lines);
    }
    clean(reply.lines().map(str::to_owned).collect())
}

/// Compiles ranked experiences into a task guideline under a meta-guideline.
///
/// With nothing retrieved this returns the empty sentinel without any model
/// call. The ranked list is re-sorted by weighted score descending
/// (defensively; retrieval already orders it). A reply with no extractable
/// bullets is a [`CognitionError::MalformedReply`].
pub fn compile_guideline(
    chat: &dyn ChatBackend,
    task: &Task,
    ranked: &[RankedExperience],
    meta: &MetaGuideline,
    operation: Operation,
    temperature: f64,
) -> Result<Guideline, CognitionError> {
    if ranked.is_empty() {
        return Ok(Guideline::empty());
    }
    let mut ordered: Vec<&RankedExperience> = ranked.iter().collect();
    ordered.sort_by(|a, b| {
        b.weighted_score
            .partial_cmp(&a.weighted_score)
            .expect("weighted scores are finite")
    });
    let ordered_owned: Vec<RankedExperience> = ordered.iter().map(|r| (*r).clone()).collect();
    let reply = one_shot(
        chat,
        operation,
        &task.id,
        render_compile_prompt(task, &ordered_owned, meta),
        temperature,
    )?;
    let bullets = parse_bullets(&reply);
    if bullets.is_empty() {
        return Err(CognitionError::MalformedReply {
            operation,
            detail: format!("no bullets could be extracted from {reply:?}"),
        });
    }
    Ok(Guideline {
        bullets,
        source_experience_ids: ordered_owned
            .iter()
            .map(|r| r.experience.id.clone())
            .collect(),
        meta_guideline_id: meta.id.clone(),
    })
}

#[derive(Deserialize)]
struct ReflectReply {
    failure_pattern: String,
    synthesis_instruction: String,
}

/// Reflects on a task where memory hurt, producing a failure pattern and a
/// new synthesis instruction. Strict: malformed replies error so the
/// meta-guideline bank is never polluted with junk.
pub fn reflect(
    chat: &dyn ChatBackend,
    task: &Task,
    gain: f64,
    guideline: &Guideline,
    temperature: f64,
) -> Result<ReflectionRecord, CognitionError> {
    let reply = one_shot(
        chat,
        Operation::Reflect,
        &task.id,
        render_reflect_prompt(task, gain, guideline),
        temperature,
    )?;
    let json = extract_json(&reply).ok_or_else(|| CognitionError::MalformedReply {
        operation: Operation::Reflect,
        detail: format!("no JSON object in {reply:?}"),
    })?;
    let parsed: ReflectReply =
        serde_json::from_str(json).map_err(|err| CognitionError::MalformedReply {
            operation: Operation::Reflect,
            detail: err.to_string(),
        })?;
    if parsed.failure_pattern.trim().is_empty() || parsed.synthesis_instruction.trim().is_empty() {
        return Err(CognitionError::MalformedReply {
            operation: Operation::Reflect,
            detail: "empty failure_pattern or synthesis_instruction".into(),
        });
    }
    Ok(ReflectionRecord {
        failure_pattern: parsed.failure_pattern,
        synthesis_instruction: parsed.synthesis_instruction,
    })
}

#[derive(Deserialize)]
struct SummarizeReply {
    #[serde(default)]
    category: String,
    #[serde(default)]
    failure_reason: String,
    improvement: String,
    #[serde(default)]
    missed_information: String,
}

/// Distills a failed trajectory into a candidate [`Experience`] at initial
/// weight. Strict: the reply must be JSON with a non-empty `improvement`, or
/// the candidate is rejected — the experience bank is never polluted by
/// parsing accidents.
#[allow(clippy::too_many_arguments)]
pub fn summarize_experience(
    chat: &dyn ChatBackend,
    task: &Task,
    trajectory: &Trajectory,
    outcome_label: &str,
    new_id: &str,
    created_batch: u32,
    temperature: f64,
) -> Result<Experience, CognitionError> {
    if trajectory.steps.is_empty() {
        return Err(CognitionError::EmptyTrajectory);
    }
    let reply = one_shot(
        chat,
        Operation::SummarizeExperience,
        &task.id,
        render_summarize_prompt(task, trajectory, outcome_label),
        temperature,
    )?;
    let json = extract_json(&reply).ok_or_else(|| CognitionError::MalformedReply {
        operation: Operation::SummarizeExperience,
        detail: format!("no JSON object in {reply:?}"),
    })?;
    let parsed: SummarizeReply =
        serde_json::from_str(json).map_err(|err| CognitionError::MalformedReply {
            operation: Operation::SummarizeExperience,
            detail: err.to_string(),
        })?;
    if parsed.improvement.trim().is_empty() {
        return Err(CognitionError::MalformedReply {
            operation: Operation::SummarizeExperience,
            detail: "empty improvement".into(),
        });
    }
    Ok(Experience::new(
        new_id,
        task.question.clone(),
        parsed.category,
        parsed.failure_reason,
        parsed.improvement,
        parsed.missed_information,
        created_batch,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::default_meta_guideline;
    use crate::predictor::{StepKind, TrajectoryStep};

    fn task() -> Task {
        Task {
            id: "t1".into(),
            question: "Will rates rise?".into(),
            candidates: vec!["yes".into(), "no".into()],
            market_prices: None,
            close_time: "2025-06-01T12:00:00Z".parse().unwrap(),
            batch_id: 1,
        }
    }

    fn scripted(op: Operation, replies: &[&str]) -> ScriptedBackend {
        ScriptedBackend::from_entries(vec![TranscriptEntry {
            operation: op,
            task_id: "t1".into(),
            replies: replies.iter().map(|s| s.to_string()).collect(),
        }])
    }

    #[test]
    fn operation_serde_uses_snake_case() {
        assert_eq!(
            serde_json::to_string(&Operation::GenerateQueries).unwrap(),
            "\"generate_queries\""
        );
        let op: Operation = serde_json::from_str("\"predict_baseline\"").unwrap();
        assert_eq!(op, Operation::PredictBaseline);
        assert_eq!(Operation::SummarizePage.as_str(), "summarize_page");
    }

    #[test]
    fn scripted_backend_replays_in_order_and_reports_exhaustion() {
        let backend = scripted(Operation::Reflect, &["first", "second"]);
        let ctx = CallContext {
            operation: Operation::Reflect,
            task_id: "t1".into(),
        };
        let req = ChatRequest {
            messages: vec![],
            temperature: 0.2,
        };
        assert_eq!(backend.complete(&ctx, &req).unwrap(), "first");
        assert_eq!(backend.complete(&ctx, &req).unwrap(), "second");
        assert!(matches!(
            backend.complete(&ctx, &req),
            Err(BackendError::ScriptExhausted { .. })
        ));
        let missing = CallContext {
            operation: Operation::Reflect,
            task_id: "other".into(),
        };
        assert!(matches!(
            backend.complete(&missing, &req),
            Err(BackendError::MissingScript { .. })
        ));
    }

    #[test]
    fn scripted_backend_load_concatenates_duplicate_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcript.jsonl");
        std::fs::write(
            &path,
            r#"{"operation":"reflect","task_id":"t1","replies":["a"]}
{"operation":"reflect","task_id":"t1","replies":["b"]}
"#,
        )
        .unwrap();
        let backend = ScriptedBackend::load(&path).unwrap();
        let ctx = CallContext {
            operation: Operation::Reflect,
            task_id: "t1".into(),
        };
        let req = ChatRequest {
            messages: vec![],
            temperature: 0.2,
        };
        assert_eq!(backend.complete(&ctx, &req).unwrap(), "a");
        assert_eq!(backend.complete(&ctx, &req).unwrap(), "b");
    }

    #[test]
    fn scripted_backend_load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"operation\":\"reflect\",\"task_id\":\"t1\",\"replies\":[]}\nnot json\n",
        )
        .unwrap();
        let err = ScriptedBackend::load(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn generate_queries_parses_targets_and_truncates() {
        let backend = scripted(
            Operation::GenerateQueries,
            &[r#"{"queries": [
                {"query": "rate history", "search_target": "question"},
                {"query": "rate lessons", "search_target": "experience"},
                {"query": "inflation", "search_target": "bogus"},
                {"query": "extra", "search_target": "question"}
            ]}"#],
        );
        let queries = generate_queries(&backend, &task(), 0.2).unwrap();
        assert_eq!(queries.len(), MAX_RETRIEVAL_QUERIES);
        assert_eq!(queries[0].target, QueryTarget::Question);
        assert_eq!(queries[1].target, QueryTarget::Experience);
        assert_eq!(
            queries[2].target,
            QueryTarget::Question,
            "unknown target coerces"
        );
    }

    #[test]
    fn generate_queries_falls_back_on_malformed_replies() {
        for reply in [
            "no json at all",
            r#"{"queries": []}"#,
            r#"{"queries": [{"query": "  "}]}"#,
            r#"{"wrong": "shape"}"#,
        ] {
            let backend = scripted(Operation::GenerateQueries, &[reply]);
            let queries = generate_queries(&backend, &task(), 0.2).unwrap();
            assert_eq!(queries.len(), 1, "reply {reply:?} should fall back");
            assert_eq!(queries[0].query, task().question);
            assert_eq!(queries[0].target, QueryTarget::Question);
        }
    }

    #[test]
    fn generate_queries_skips_empty_strings_but_keeps_valid() {
        let backend = scripted(
            Operation::GenerateQueries,
            &[r#"{"queries": [{"query": ""}, {"query": "good terms"}]}"#],
        );
        let queries = generate_queries(&backend, &task(), 0.2).unwrap();
        assert_eq!(queries.len(), 1);
        assert_eq!(queries[0].query, "good terms");
    }

    #[test]
    fn generate_queries_propagates_backend_errors() {
        let backend = scripted(Operation::GenerateQueries, &[]);
        assert!(matches!(
            generate_queries(&backend, &task(), 0.2),
            Err(BackendError::ScriptExhausted { .. })
        ));
    }

    fn ranked(id: &str, score: f64) -> RankedExperience {
        RankedExperience {
            experience: Experience::new(
                id,
                "q",
                "cat",
                format!("{id} failed"),
                format!("{id} fix"),
                "",
                0,
            ),
            weighted_score: score,
        }
    }

    #[test]
    fn compile_with_nothing_retrieved_is_empty_without_model_call() {
        // An exhausted backend would error if called; it must not be.
        let backend = scripted(Operation::CompileGuideline, &[]);
        let g = compile_guideline(
            &backend,
            &task(),
            &[],
            &default_meta_guideline(),
            Operation::CompileGuideline,
            0.2,
        )
        .unwrap();
        assert!(g.is_empty());
        assert!(g.source_experience_ids.is_empty());
    }

    #[test]
    fn compile_parses_bullet_formats() {
        let cases: Vec<(&str, Vec<&str>)> = vec![
            (
                r#"{"bullets": ["check base rates", "verify dates"]}"#,
                vec!["check base rates", "verify dates"],
            ),
            (
                r#"["from a bare array", "second"]"#,
                vec!["from a bare array", "second"],
            ),
            ("- dash one\n- dash two", vec!["dash one", "dash two"]),
            (
                "* star\n• dot\n3. numbered\n4) parens",
                vec!["star", "dot", "numbered", "parens"],
            ),
            (
                "first plain line\nsecond plain line",
                vec!["first plain line", "second plain line"],
            ),
        ];
        for (reply, expected) in cases {
            let backend = scripted(Operation::CompileGuideline, &[reply]);
            let g = compile_guideline(
                &backend,
                &task(),
                &[ranked("e1", 1.0)],
                &default_meta_guideline(),
                Operation::CompileGuideline,
                0.2,
            )
            .unwrap();
            assert_eq!(g.bullets, expected, "reply: {reply:?}");
        }
    }

    #[test]
    fn compile_caps_bullets() {
        let many = (0..12)
            .map(|i| format!("- b{i}"))
            .collect::<Vec<_>>()
            .join("\n");
        let backend = scripted(Operation::CompileGuideline, &[&many]);
        let g = compile_guideline(
            &backend,
            &task(),
            &[ranked("e1", 1.0)],
            &default_meta_guideline(),
            Operation::CompileGuideline,
            0.2,
        )
        .unwrap();
        assert_eq!(g.bullets.len(), MAX_GUIDELINE_BULLETS);
    }

    #[test]
    fn compile_orders_sources_by_score_and_records_meta() {
        let backend = scripted(Operation::CompileGuideline, &["- apply lessons"]);
        let meta = default_meta_guideline();
        let g = compile_guideline(
            &backend,
            &task(),
            &[ranked("low", 0.4), ranked("high", 2.0)],
            &meta,
            Operation::CompileGuideline,
            0.2,
        )
        .unwrap();
        assert_eq!(g.source_experience_ids, vec!["high", "low"]);
        assert_eq!(g.meta_guideline_id, meta.id);
    }

    #[test]
    fn compile_blank_reply_is_malformed() {
        let backend = scripted(Operation::CompileGuideline, &["   \n \n"]);
        let err = compile_guideline(
            &backend,
            &task(),
            &[ranked("e1", 1.0)],
            &default_meta_guideline(),
            Operation::CompileGuideline,
            0.2,
        )
        .unwrap_err();
        assert!(matches!(err, CognitionError::MalformedReply { .. }));
    }

    #[test]
    fn compile_prompt_embeds_experiences_and_meta_instruction() {
        let meta = default_meta_guideline();
        let prompt = render_compile_prompt(&task(), &[ranked("e1", 1.0)], &meta);
        assert!(prompt.contains("Task: Will rates rise?"));
        assert!(prompt.contains("[Experience 1 Summary: e1 failed Improvement: e1 fix]"));
        assert!(prompt.contains("CRITICAL: Experience Applicability Check"));
        assert!(prompt.contains(&meta.synthesis_instruction));
        assert!(prompt.contains("Output ONLY the bullet points."));
    }

    #[test]
    fn reflect_parses_strictly() {
        let backend = scripted(
            Operation::Reflect,
            &[
                r#"{"failure_pattern": "overtrusted stale data", "synthesis_instruction": "discount old lessons"}"#,
            ],
        );
        let g = Guideline::empty();
        let record = reflect(&backend, &task(), -0.2, &g, 0.2).unwrap();
        assert_eq!(record.failure_pattern, "overtrusted stale data");
        assert_eq!(record.synthesis_instruction, "discount old lessons");

        for bad in [
            "no json",
            r#"{"failure_pattern": "x"}"#,
            r#"{"failure_pattern": "", "synthesis_instruction": "y"}"#,
        ] {
            let backend = scripted(Operation::Reflect, &[bad]);
            assert!(
                matches!(
                    reflect(&backend, &task(), -0.2, &Guideline::empty(), 0.2),
                    Err(CognitionError::MalformedReply { .. })
                ),
                "reply {bad:?} must be rejected"
            );
        }
    }

    fn trajectory() -> Trajectory {
        Trajectory {
            steps: vec![TrajectoryStep {
                kind: StepKind::ModelMessage,
                content: "I froze and guessed.".into(),
                timestamp: None,
            }],
        }
    }

    #[test]
    fn summarize_builds_candidate_experience() {
        let backend = scripted(
            Operation::SummarizeExperience,
            &[
                r#"{"category": "rates", "failure_reason": "ignored the dissent votes",
                 "improvement": "weigh committee composition", "missed_information": "two dissents"}"#,
            ],
        );
        let e =
            summarize_experience(&backend, &task(), &trajectory(), "yes", "exp-x", 4, 0.2).unwrap();
        assert_eq!(e.id, "exp-x");
        assert_eq!(e.question, task().question);
        assert_eq!(e.weight, crate::memory::INITIAL_WEIGHT);
        assert_eq!(e.created_batch, 4);
        assert_eq!(e.improvement, "weigh committee composition");
        assert_eq!(e.times_retrieved, 0);
    }

    #[test]
    fn summarize_defaults_optional_fields() {
        let backend = scripted(
            Operation::SummarizeExperience,
            &[r#"{"improvement": "only the required field"}"#],
        );
        let e =
            summarize_experience(&backend, &task(), &trajectory(), "yes", "exp-x", 1, 0.2).unwrap();
        assert_eq!(e.category, "");
        assert_eq!(e.failure_reason, "");
        assert_eq!(e.missed_information, "");
    }

    #[test]
    fn summarize_rejects_missing_improvement_and_empty_trajectory() {
        let backend = scripted(
            Operation::SummarizeExperience,
            &[r#"{"improvement": "  "}"#, r#"{"category": "x"}"#],
        );
        assert!(matches!(
            summarize_experience(&backend, &task(), &trajectory(), "yes", "e", 1, 0.2),
            Err(CognitionError::MalformedReply { .. })
        ));
        assert!(matches!(
            summarize_experience(&backend, &task(), &trajectory(), "yes", "e", 1, 0.2),
            Err(CognitionError::MalformedReply { .. })
        ));
        let empty = Trajectory::default();
        assert!(matches!(
            summarize_experience(&backend, &task(), &empty, "yes", "e", 1, 0.2),
            Err(CognitionError::EmptyTrajectory)
        ));
    }

    #[test]
    fn summarize_prompt_embeds_trajectory_and_outcome() {
        let prompt = render_summarize_prompt(&task(), &trajectory(), "yes");
        assert!(prompt.contains("Actual outcome: yes"));
        assert!(prompt.contains("[model] I froze and guessed."));
        assert!(prompt.contains("\"improvement\""));
    }

    #[test]
    fn query_and_reflect_prompts_mention_their_contracts() {
        let qp = render_query_prompt(&task());
        assert!(qp.contains("Event: Will rates rise?"));
        assert!(qp.contains("\"search_target\""));
        let rp = render_reflect_prompt(&task(), -0.25, &Guideline::empty());
        assert!(rp.contains("-0.25"));
        assert!(rp.contains("\"failure_pattern\""));
        assert!(rp.contains("(none)"));
    }
}
