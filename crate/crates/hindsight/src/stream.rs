//! Task-stream ingestion and generation: the JSONL benchmark format with
//! validation and batch grouping, plus a synthetic drift generator that
//! emits a stream, a scripted chat transcript, seed experiences, and an
//! expected per-task ledger for hermetic desk-scale experiments.
//!
//! # Stream format
//!
//! One JSON object per line, in batch order:
//!
//! ```json
//! {"id":"b001t000","batch_id":1,"question":"...","candidates":["yes","no"],
//!  "market_prices":[0.5,0.5],"close_time":"2025-01-06T12:00:00Z",
//!  "outcome_index":0,"price_snapshot_time":"2025-01-06T06:00:00Z"}
//! ```
//!
//! `batch_id` must be non-decreasing; consecutive equal ids form one batch.
//! `market_prices` and `price_snapshot_time` are optional.
//!
//! # Synthetic streams
//!
//! [`generate_synthetic`] builds a stream whose questions are routing tags:
//! each non-empty tag gets one seed experience whose question is the tag
//! verbatim, and the scripted retrieval query for a tagged task is the tag
//! itself, so tag and seed embed to the same one-hot token vector and match
//! at cosine exactly 1.0 while every other pairing scores exactly 0.0.
//! Retrieving the seed steers the scripted forecast to the regime's
//! `base_brier_on`; not retrieving leaves the `base_brier_off` baseline.
//! Harmful tags invert the arrangement: retrieval yields a Brier of
//! `2·base_brier_off − base_brier_on`, so the contrastive gain is the exact
//! negative of the helpful gain.
//!
//! The generator simulates the engine's weight arithmetic bit-for-bit (same
//! renormalization, scoring, gain, and clamp operations) so it can script a
//! reply for every call the engine will actually make — a task whose seed
//! has decayed below the retrieval threshold gets no memory-conditioned
//! replies, exactly as the engine will skip them. The simulation assumes the
//! run uses [`SuggestedConfig`] (retrieval threshold, worst-case fraction);
//! running a generated bundle under a different configuration may leave the
//! transcript missing replies, which the engine surfaces loudly.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cognition::{Operation, TranscriptEntry};
use crate::embedding::{token_bucket, tokenize};
use crate::memory::Experience;
use crate::metrics;
use crate::predictor::{Forecast, Outcome, Task};

/// Retrieval threshold the synthetic simulation assumes (and suggests).
pub const SYNTHETIC_RETRIEVAL_THRESHOLD: f64 = 0.1;
/// Worst-case acquisition fraction the synthetic simulation assumes.
pub const SYNTHETIC_BAD_CASE_FRACTION: f64 = 0.3;
/// Candidate list shared by every synthetic task.
pub const SYNTHETIC_CANDIDATES: [&str; 2] = ["yes", "no"];
/// Query scripted for untagged tasks; its token bucket is reserved so it can
/// never match a seed experience.
pub const UNTAGGED_QUERY: &str = "zzznoise";

/// One stream line: a task, its resolved outcome, and snapshot metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub id: String,
    pub batch_id: u32,
    pub question: String,
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market_prices: Option<Vec<f64>>,
    pub close_time: DateTime<Utc>,
    pub outcome_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_snapshot_time: Option<DateTime<Utc>>,
}

/// A validated stream item ready for the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTask {
    pub task: Task,
    pub outcome: Outcome,
    /// When the market prices were snapshotted, if recorded.
    pub price_snapshot_time: Option<DateTime<Utc>>,
}

impl StreamTask {
    pub fn to_record(&self) -> StreamRecord {
        StreamRecord {
            id: self.task.id.clone(),
            batch_id: self.task.batch_id,
            question: self.task.question.clone(),
            candidates: self.task.candidates.clone(),
            market_prices: self.task.market_prices.clone(),
            close_time: self.task.close_time,
            outcome_index: self.outcome.winner(),
            price_snapshot_time: self.price_snapshot_time,
        }
    }
}

/// Stream loading, validation, and synthetic-spec failures.
#[derive(Debug, Error)]
pub enum StreamError {
    #[error("{path}:{line}: {message}")]
    Load {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Loads and validates a stream file, grouping consecutive equal `batch_id`
/// runs into batches. Errors carry the 1-based offending line number.
pub fn load_stream(path: &Path) -> Result<Vec<Vec<StreamTask>>, StreamError> {
    let content = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let fail = |line: usize, message: String| {
        Err(StreamError::Load {
            path: display.clone(),
            line,
            message,
        })
    };

    let mut batches: Vec<Vec<StreamTask>> = Vec::new();
    let mut previous_batch: Option<u32> = None;
    let mut seen_ids: HashSet<String> = HashSet::new();
    for (index, raw) in content.lines().enumerate() {
        let line = index + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: StreamRecord = match serde_json::from_str(raw) {
            Ok(record) => record,
            Err(err) => return fail(line, err.to_string()),
        };
        if let Some(previous) = previous_batch {
            if record.batch_id < previous {
                return fail(
                    line,
                    format!(
                        "batch_id {} decreases after batch_id {previous}",
                        record.batch_id
                    ),
                );
            }
        }
        if !seen_ids.insert(record.id.clone()) {
            return fail(line, format!("duplicate task id {:?}", record.id));
        }
        let task = Task {
            id: record.id,
            question: record.question,
            candidates: record.candidates,
            market_prices: record.market_prices,
            close_time: record.close_time,
            batch_id: record.batch_id,
        };
        if let Err(err) = task.validate() {
            return fail(line, err.to_string());
        }
        let outcome = match Outcome::from_index(record.outcome_index, task.candidates.len()) {
            Ok(outcome) => outcome,
            Err(err) => return fail(line, format!("outcome_index: {}", err.message)),
        };
        let stream_task = StreamTask {
            task,
            outcome,
            price_snapshot_time: record.price_snapshot_time,
        };
        if previous_batch == Some(stream_task.task.batch_id) {
            batches
                .last_mut()
                .expect("a batch exists for the previous batch_id")
                .push(stream_task);
        } else {
            previous_batch = Some(stream_task.task.batch_id);
            batches.push(vec![stream_task]);
        }
    }
    Ok(batches)
}

/// Writes batches back to the JSONL stream format, one record per line.
pub fn write_stream(path: &Path, batches: &[Vec<StreamTask>]) -> Result<(), StreamError> {
    let mut out = String::new();
    for batch in batches {
        for stream_task in batch {
            let line = serde_json::to_string(&stream_task.to_record())
                .expect("stream records serialize to JSON");
            out.push_str(&line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// One regime of a synthetic stream: which tags help, which hurt, and the
/// Brier levels a scripted forecast realizes with and without memory.
///
/// Tag lists may contain `""` entries: those slots in the task cycle are
/// untagged filler whose scripted retrieval query matches nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    /// 0-based index into the batch sequence where the regime takes over
    /// (emitted stream `batch_id`s are 1-based, so index 5 is batch_id 6).
    pub start_batch: u32,
    pub helpful_experience_tags: Vec<String>,
    pub harmful_experience_tags: Vec<String>,
    /// Brier score of a scripted forecast aided by a helpful retrieval.
    pub base_brier_on: f64,
    /// Brier score of the scripted memory-free baseline forecast.
    pub base_brier_off: f64,
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_batches: u32,
    pub tasks_per_batch: u32,
    pub regimes: Vec<RegimeSpec>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), StreamError> {
        let fail = |message: String| Err(StreamError::Spec(message));
        if self.n_batches == 0 {
            return fail("n_batches must be at least 1".into());
        }
        if self.tasks_per_batch == 0 {
            return fail("tasks_per_batch must be at least 1".into());
        }
        if self.regimes.is_empty() {
            return fail("at least one regime is required".into());
        }
        if self.regimes[0].start_batch != 0 {
            return fail(format!(
                "first regime must start at batch 0, got {}",
                self.regimes[0].start_batch
            ));
        }
        for pair in self.regimes.windows(2) {
            if pair[1].start_batch <= pair[0].start_batch {
                return fail(format!(
                    "regime starts must be strictly increasing, got {} after {}",
                    pair[1].start_batch, pair[0].start_batch
                ));
            }
        }
        let mut buckets: HashMap<usize, String> = HashMap::new();
        buckets.insert(token_bucket(UNTAGGED_QUERY), UNTAGGED_QUERY.to_owned());
        let mut seen_tags: HashSet<String> = HashSet::new();
        for (index, regime) in self.regimes.iter().enumerate() {
            if regime.start_batch >= self.n_batches {
                return fail(format!(
                    "regime {index} starts at batch {} but the stream has only {} batches",
                    regime.start_batch, self.n_batches
                ));
            }
            let on = regime.base_brier_on;
            let off = regime.base_brier_off;
            if !on.is_finite() || !off.is_finite() {
                return fail(format!("regime {index}: Brier levels must be finite"));
            }
            if !(0.0..=2.0).contains(&on) || !(0.0..=2.0).contains(&off) {
                return fail(format!(
                    "regime {index}: Brier levels must lie in [0, 2], got on={on} off={off}"
                ));
            }
            if on >= off {
                return fail(format!(
                    "regime {index}: base_brier_on ({on}) must be below base_brier_off ({off})"
                ));
            }
            if 2.0 * off - on > 2.0 {
                return fail(format!(
                    "regime {index}: harmful-retrieval Brier 2*off-on = {} exceeds 2",
                    2.0 * off - on
                ));
            }
            for tag in &regime.helpful_experience_tags {
                if !tag.is_empty() && regime.harmful_experience_tags.contains(tag) {
                    return fail(format!(
                        "regime {index}: tag {tag:?} is both helpful and harmful"
                    ));
                }
            }
            for tag in regime
                .helpful_experience_tags
                .iter()
                .chain(&regime.harmful_experience_tags)
            {
                if tag.is_empty() || !seen_tags.insert(tag.clone()) {
                    continue;
                }
                let tokens = tokenize(tag);
                if tokens.len() != 1 {
                    return fail(format!(
                        "tag {tag:?} must be a single token, found {}",
                        tokens.len()
                    ));
                }
                let bucket = token_bucket(&tokens[0]);
                if let Some(existing) = buckets.get(&bucket) {
                    return fail(format!(
                        "tags {existing:?} and {tag:?} share token bucket {bucket}; \
                         retrieval routing requires distinct buckets"
                    ));
                }
                buckets.insert(bucket, tag.clone());
            }
        }
        Ok(())
    }

    fn regime_for(&self, batch_index: u32) -> &RegimeSpec {
        self.regimes
            .iter()
            .rev()
            .find(|r| r.start_batch <= batch_index)
            .expect("validation guarantees a regime starting at batch 0")
    }
}

/// Engine configuration a generated bundle is scripted for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestedConfig {
    pub retrieval_threshold: f64,
    pub top_k: usize,
    pub bad_case_fraction: f64,
    pub min_improvement: f64,
}

impl Default for SuggestedConfig {
    fn default() -> Self {
        SuggestedConfig {
            retrieval_threshold: SYNTHETIC_RETRIEVAL_THRESHOLD,
            top_k: 5,
            bad_case_fraction: SYNTHETIC_BAD_CASE_FRACTION,
            min_improvement: 0.05,
        }
    }
}

/// What the generator's engine simulation predicts for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedTask {
    pub task_id: String,
    pub batch_id: u32,
    /// Routing tag of the task's cycle slot; empty for untagged filler.
    pub tag: String,
    /// Whether the tag's seed experience clears the retrieval threshold.
    pub retrieved: bool,
    pub brier_on: f64,
    pub brier_off: f64,
    pub gain: f64,
    /// Seed weight after this task's update (`None` for untagged tasks).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_after: Option<f64>,
}

/// Everything [`generate_synthetic`] emits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBundle {
    pub batches: Vec<Vec<StreamTask>>,
    pub transcript: Vec<TranscriptEntry>,
    pub seed_experiences: Vec<Experience>,
    pub suggested_config: SuggestedConfig,
    pub expected: Vec<ExpectedTask>,
}

/// Winner-side probability realizing Brier level `b` for two candidates:
/// a forecast putting `p` on the winner scores `2(1-p)^2`, so `p = 1 - sqrt(b/2)`.
fn winner_probability(brier_level: f64) -> f64 {
    1.0 - (brier_level / 2.0).sqrt()
}

/// Raw forecast weights with `q` on the winner side.
fn side_weights(q: f64, winner: usize) -> [f64; 2] {
    let mut weights = [0.0_f64; 2];
    weights[winner] = q;
    weights[1 - winner] = 1.0 - q;
    weights
}

/// The Brier score the engine will compute for a scripted forecast reply,
/// produced by the same renormalization and scoring code the engine runs.
fn realized_brier(q: f64, winner: usize, outcome: &Outcome) -> f64 {
    let weights = side_weights(q, winner);
    let forecast = Forecast::from_weights(weights.to_vec())
        .expect("synthetic forecast weights are positive and finite");
    metrics::brier(&forecast, outcome).expect("forecast and outcome dimensions match")
}

fn forecast_reply(q: f64, winner: usize) -> String {
    let weights = side_weights(q, winner);
    serde_json::json!({
        SYNTHETIC_CANDIDATES[0]: weights[0],
        SYNTHETIC_CANDIDATES[1]: weights[1],
    })
    .to_string()
}

fn query_reply(query: &str) -> String {
    serde_json::json!({
        "queries": [{ "query": query, "search_target": "question" }]
    })
    .to_string()
}

fn compile_reply(tag: &str) -> String {
    serde_json::json!({
        "bullets": [
            format!(
                "The {tag} signal has recurred weekly; shift probability toward the side it favors."
            ),
            "Answer with a calibrated probability map over the listed candidates.",
            "Do not hedge toward uniform when the recurring signal is present.",
        ]
    })
    .to_string()
}

fn reflect_reply() -> String {
    serde_json::json!({
        "failure_pattern":
            "A recalled lesson no longer matches the current regime; applying it pushed \
             probability onto the losing side.",
        "synthesis_instruction":
            "Before applying a recalled lesson, check whether its regime still holds this \
             week; if the regime has flipped, discard the lesson.",
    })
    .to_string()
}

fn summarize_reply(question: &str) -> String {
    serde_json::json!({
        "category": "synthetic",
        "failure_reason": format!("Scored poorly on {question:?} this week."),
        "improvement":
            "Weigh the recurring weekly signal more heavily than the uninformative market price.",
        "missed_information": "The routing tag in the question indicates the favored side.",
    })
    .to_string()
}

fn seed_experience(tag: &str) -> Experience {
    Experience::new(
        format!("seed-{tag}"),
        tag,
        "synthetic",
        format!("Ignored the recurring {tag} signal in an earlier week."),
        format!("When the question matches the {tag} signal, shift probability onto the side it favors."),
        format!("The {tag} signal telegraphs the winning side ahead of close."),
        0,
    )
}

/// Generates a synthetic stream bundle: tasks, scripted transcript, seed
/// experiences, the configuration the script assumes, and the simulation's
/// expected per-task ledger. Deterministic under `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticBundle, StreamError> {
    spec.validate()?;
    let suggested = SuggestedConfig::default();

    // Seed experiences, in first-appearance order across regimes.
    let mut seed_tags: Vec<String> = Vec::new();
    for regime in &spec.regimes {
        for tag in regime
            .helpful_experience_tags
            .iter()
            .chain(&regime.harmful_experience_tags)
        {
            if !tag.is_empty() && !seed_tags.contains(tag) {
                seed_tags.push(tag.clone());
            }
        }
    }
    let seed_experiences: Vec<Experience> = seed_tags.iter().map(|t| seed_experience(t)).collect();
    let bank_nonempty = !seed_experiences.is_empty();

    let mut weights: HashMap<String, f64> =
        seed_tags.iter().map(|t| (t.clone(), 1.0_f64)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let base_time = Utc
        .with_ymd_and_hms(2025, 1, 6, 12, 0, 0)
        .single()
        .expect("base timestamp is valid");

    let mut batches: Vec<Vec<StreamTask>> = Vec::new();
    let mut transcript: Vec<TranscriptEntry> = Vec::new();
    let mut expected: Vec<ExpectedTask> = Vec::new();

    let mut script = |operation: Operation, task_id: &str, reply: String| {
        transcript.push(TranscriptEntry {
            operation,
            task_id: task_id.to_owned(),
            replies: vec![reply],
        });
    };

    for batch_index in 0..spec.n_batches {
        let regime = spec.regime_for(batch_index);
        let batch_id = batch_index + 1;
        let mut cycle: Vec<&str> = regime
            .helpful_experience_tags
            .iter()
            .chain(&regime.harmful_experience_tags)
            .map(String::as_str)
            .collect();
        if cycle.is_empty() {
            cycle.push("");
        }
        let q_off = winner_probability(regime.base_brier_off);
        let q_on = winner_probability(regime.base_brier_on);
        let q_harm = winner_probability(2.0 * regime.base_brier_off - regime.base_brier_on);

        let mut batch: Vec<StreamTask> = Vec::new();
        // (task id, memory-on utility, winner, realized memory-on q) for
        // worst-case selection and candidate scripting after the loop.
        let mut utilities: Vec<(String, f64, usize, f64)> = Vec::new();

        for task_index in 0..spec.tasks_per_batch {
            let slot = cycle[task_index as usize % cycle.len()];
            let winner = rng.random_range(0..2u32) as usize;
            let id = format!("b{batch_id:03}t{task_index:03}");
            let question = if slot.is_empty() {
                format!("Will the untagged filler event {id} resolve yes?")
            } else {
                slot.to_owned()
            };
            let close_time = base_time
                + Duration::weeks(i64::from(batch_index))
                + Duration::hours(i64::from(task_index));
            let task = Task {
                id: id.clone(),
                question,
                candidates: SYNTHETIC_CANDIDATES
                    .iter()
                    .map(|c| (*c).to_owned())
                    .collect(),
                market_prices: Some(vec![0.5, 0.5]),
                close_time,
                batch_id,
            };
            let outcome = Outcome::from_index(winner, 2).expect("two candidates, winner in range");
            let brier_off = realized_brier(q_off, winner, &outcome);

            if bank_nonempty {
                let query = if slot.is_empty() {
                    UNTAGGED_QUERY
                } else {
                    slot
                };
                script(Operation::GenerateQueries, &id, query_reply(query));
            }
            script(
                Operation::PredictBaseline,
                &id,
                forecast_reply(q_off, winner),
            );

            // Mirror the engine: seed similarity is exactly 1.0, so the
            // weighted score equals the current weight bit-for-bit.
            let (retrieved, brier_on, gain, q_memory, weight_after) = if slot.is_empty() {
                (false, brier_off, 0.0, q_off, None)
            } else {
                let weight = weights[slot];
                if weight >= suggested.retrieval_threshold {
                    let helpful = regime.helpful_experience_tags.iter().any(|t| t == slot);
                    let q_memory = if helpful { q_on } else { q_harm };
                    let brier_on = realized_brier(q_memory, winner, &outcome);
                    let gain = (-brier_on) - (-brier_off);
                    let updated = (weight + gain).clamp(0.0, 10.0);
                    weights.insert(slot.to_owned(), updated);
                    script(
                        Operation::PredictMemory,
                        &id,
                        forecast_reply(q_memory, winner),
                    );
                    script(Operation::CompileGuideline, &id, compile_reply(slot));
                    if gain <= 0.0 {
                        script(Operation::Reflect, &id, reflect_reply());
                    }
                    (true, brier_on, gain, q_memory, Some(updated))
                } else {
                    (false, brier_off, 0.0, q_off, Some(weight))
                }
            };

            utilities.push((id.clone(), -brier_on, winner, q_memory));
            expected.push(ExpectedTask {
                task_id: id,
                batch_id,
                tag: slot.to_owned(),
                retrieved,
                brier_on,
                brier_off,
                gain,
                weight_after,
            });
            batch.push(StreamTask {
                task,
                outcome,
                price_snapshot_time: Some(close_time - Duration::hours(6)),
            });
        }

        // Script the acquisition chain for exactly the tasks the engine will
        // worst-case: the ceil(fraction * n) lowest memory-on utilities,
        // ties broken by ascending task id. The candidate forecast repeats
        // the task's realized memory-on forecast, so the verification
        // improvement is exactly zero and no candidate is ever committed
        // (the bank composition stays what this simulation assumed).
        let n = utilities.len();
        let count = ((suggested.bad_case_fraction * n as f64).ceil() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            utilities[a]
                .1
                .partial_cmp(&utilities[b].1)
                .expect("utilities are finite")
                .then_with(|| utilities[a].0.cmp(&utilities[b].0))
        });
        for &index in order.iter().take(count) {
            let (ref id, _, winner, q_memory) = utilities[index];
            let question = &batch[index].task.question;
            script(
                Operation::SummarizeExperience,
                id,
                summarize_reply(question),
            );
            script(Operation::CompileCandidate, id, compile_reply("candidate"));
            script(
                Operation::PredictCandidate,
                id,
                forecast_reply(q_memory, winner),
            );
        }

        batches.push(batch);
    }

    Ok(SyntheticBundle {
        batches,
        transcript,
        seed_experiences,
        suggested_config: suggested,
        expected,
    })
}
