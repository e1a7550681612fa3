//! The orchestrator: one full pass of the self-evolving loop per batch.
//!
//! Per task (in ascending task-id order, each seeing the banks as left by
//! the previous task): generate retrieval queries, retrieve weighted
//! experiences, select a meta-guideline, compile a task guideline, run the
//! predictor twice — with the guideline and without — score both, compute
//! the contrastive gain, add the gain to every retrieved experience's
//! weight, and reflect into the meta-guideline bank when memory did not
//! help. Per batch: select the worst-scoring fraction of tasks, summarize
//! each into a candidate experience, re-evaluate the task with the
//! candidate alone, and commit the candidate only if it measurably improves
//! on the original attempt.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cognition::{self, ChatBackend, Guideline, Operation, RankedExperience};
use crate::embedding::Embedder;
use crate::memory::{
    default_meta_guideline, Experience, ExperienceBank, MemoryError, MetaAddOutcome, MetaGuideline,
    MetaGuidelineBank, RetrievalHit,
};
use crate::metrics::{self, MetricsError, TaskScore, UtilityPolicy, WeeklyReport};
use crate::predictor::{predict, Forecast, PredictorSettings, SearchBackend, Trajectory};
use crate::stream::StreamTask;

/// Knobs of the evolution loop. All fields have the documented defaults and
/// are validated by [`EvolutionConfig::validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    /// Fraction of each batch selected for experience acquisition,
    /// in `(0, 1]`; the selection count is `ceil(fraction * batch_size)`.
    pub bad_case_fraction: f64,
    /// Minimum Brier improvement a candidate experience must demonstrate on
    /// re-evaluation to be committed (inclusive).
    pub min_improvement: f64,
    /// Maximum experiences retrieved per task.
    pub top_k: usize,
    /// Minimum weighted score (weight × cosine) a retrieval hit must reach.
    pub retrieval_threshold: f64,
    /// Maximum predictor turns before the uniform fallback.
    pub turn_cap: usize,
    /// Sampling temperature for every chat call.
    pub temperature: f64,
    /// Notional stake placed per batch for portfolio accounting.
    pub stake_per_week: f64,
    /// Information cutoff: hours before each task's close time.
    pub cutoff_offset_hours: i64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            bad_case_fraction: 0.3,
            min_improvement: 0.05,
            top_k: 5,
            retrieval_threshold: 0.5,
            turn_cap: 20,
            temperature: 0.2,
            stake_per_week: 100.0,
            cutoff_offset_hours: 6,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let fail = |message: String| Err(EvolutionError::Config(message));
        if !self.bad_case_fraction.is_finite()
            || self.bad_case_fraction <= 0.0
            || self.bad_case_fraction > 1.0
        {
            return fail(format!(
                "bad_case_fraction must lie in (0, 1], got {}",
                self.bad_case_fraction
            ));
        }
        if !self.min_improvement.is_finite() || self.min_improvement < 0.0 {
            return fail(format!(
                "min_improvement must be finite and non-negative, got {}",
                self.min_improvement
            ));
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        if !self.retrieval_threshold.is_finite() {
            return fail(format!(
                "retrieval_threshold must be finite, got {}",
                self.retrieval_threshold
            ));
        }
        if self.turn_cap == 0 {
            return fail("turn_cap must be at least 1".into());
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return fail(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            ));
        }
        if !self.stake_per_week.is_finite() || self.stake_per_week < 0.0 {
            return fail(format!(
                "stake_per_week must be finite and non-negative, got {}",
                self.stake_per_week
            ));
        }
        if self.cutoff_offset_hours < 0 {
            return fail(format!(
                "cutoff_offset_hours must be non-negative, got {}",
                self.cutoff_offset_hours
            ));
        }
        Ok(())
    }
}

/// One applied weight update, for the run ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdate {
    pub experience_id: String,
    /// Weight after adding the task's gain (post-clamp).
    pub weight_after: f64,
}

/// Everything the contrastive evaluation of one task produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveResult {
    pub task_id: String,
    pub forecast_on: Forecast,
    pub forecast_off: Forecast,
    pub score_on: TaskScore,
    pub score_off: TaskScore,
    /// `utility_on − utility_off`; exactly `0.0` when memory was unused.
    pub gain: f64,
    pub trajectory_on: Trajectory,
    /// Experience ids retrieved for the memory-conditioned attempt, best
    /// first; empty when the task ran memory-free.
    pub retrieved_ids: Vec<String>,
    /// Weight updates applied from this task's gain, in retrieval order.
    pub weight_updates: Vec<WeightUpdate>,
}

/// What one processed batch produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub batch_id: u32,
    /// Per-task results in processing (ascending task-id) order; tasks that
    /// failed outright are logged and absent.
    pub results: Vec<ContrastiveResult>,
    /// Candidate experiences committed by verify-before-commit this batch.
    pub committed_experience_ids: Vec<String>,
    /// Meta-guidelines added by reflection this batch (deduplicated adds
    /// are not listed).
    pub added_meta_guideline_ids: Vec<String>,
    pub weekly_report: WeeklyReport,
}

/// The model, tool, and embedding providers an engine runs against.
#[derive(Clone)]
pub struct EngineBackends {
    pub chat: Arc<dyn ChatBackend>,
    pub search: Arc<dyn SearchBackend>,
    pub embedder: Arc<dyn Embedder>,
}

/// Engine behaviour not covered by [`EvolutionConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineOptions {
    pub utility: UtilityPolicy,
    /// Fetched pages longer than this many characters are summarized.
    pub page_char_budget: usize,
    /// Record wall-clock timestamps in trajectories (off for reproducible
    /// runs).
    pub record_timestamps: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            utility: UtilityPolicy::NegBrier,
            page_char_budget: 20_000,
            record_timestamps: false,
        }
    }
}

/// Evolution failures that abort a batch (per-task failures are logged and
/// skipped instead).
#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch {expected}: task {task_id} carries batch_id {found}")]
    MixedBatchIds {
        expected: u32,
        task_id: String,
        found: u32,
    },
    #[error("batch {batch_id}: all {n} tasks failed; first failure: {first}")]
    AllTasksFailed {
        batch_id: u32,
        n: usize,
        first: String,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Selects the `ceil(fraction * n)` results with the lowest
/// memory-conditioned utility (ties broken by ascending task id) and
/// returns their task ids, worst first.
pub fn select_worst(results: &[ContrastiveResult], fraction: f64) -> Vec<String> {
    let n = results.len();
    if n == 0 {
        return Vec::new();
    }
    let count = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<&ContrastiveResult> = results.iter().collect();
    order.sort_by(|a, b| {
        a.score_on
            .utility
            .partial_cmp(&b.score_on.utility)
            .expect("utilities are finite")
            .then_with(|| a.task_id.cmp(&b.task_id))
    });
    order
        .iter()
        .take(count)
        .map(|r| r.task_id.clone())
        .collect()
}

/// A successful memory-conditioned rollout.
struct MemoryRollout {
    hits: Vec<RetrievalHit>,
    guideline: Guideline,
    forecast: Forecast,
    trajectory: Trajectory,
}

/// The evolution engine: owns the banks and drives batches through the
/// retrieve → compile → contrastive-evaluate → update loop.
pub struct EvolutionEngine {
    config: EvolutionConfig,
    options: EngineOptions,
    backends: EngineBackends,
    experiences: ExperienceBank,
    meta: MetaGuidelineBank,
    portfolio_value: f64,
}

impl EvolutionEngine {
    pub fn new(
        config: EvolutionConfig,
        options: EngineOptions,
        backends: EngineBackends,
        experiences: ExperienceBank,
        meta: MetaGuidelineBank,
    ) -> Result<Self, EvolutionError> {
        config.validate()?;
        Ok(EvolutionEngine {
            config,
            options,
            backends,
            experiences,
            meta,
            portfolio_value: 0.0,
        })
    }

    pub fn config(&self) -> &EvolutionConfig {
        &self.config
    }

    pub fn experiences(&self) -> &ExperienceBank {
        &self.experiences
    }

    pub fn meta_guidelines(&self) -> &MetaGuidelineBank {
        &self.meta
    }

    /// Cumulative portfolio value after the batches processed so far.
    pub fn portfolio_value(&self) -> f64 {
        self.portfolio_value
    }

    /// Seeds the portfolio value, e.g. when resuming a run whose earlier
    /// batches were accounted in a previous process.
    pub fn set_portfolio_value(&mut self, value: f64) {
        self.portfolio_value = value;
    }

    fn predictor_settings(&self) -> PredictorSettings {
        PredictorSettings {
            turn_cap: self.config.turn_cap,
            temperature: self.config.temperature,
            cutoff_offset_hours: self.config.cutoff_offset_hours,
            page_char_budget: self.options.page_char_budget,
            record_timestamps: self.config_record_timestamps(),
        }
    }

    fn config_record_timestamps(&self) -> bool {
        self.options.record_timestamps
    }

    /// Runs one batch end to end. Tasks are processed in ascending task-id
    /// order and each sees the banks exactly as the previous task left them.
    pub fn process_batch(&mut self, batch: &[StreamTask]) -> Result<BatchOutcome, EvolutionError> {
        if batch.is_empty() {
            return Err(EvolutionError::EmptyBatch);
        }
        let batch_id = batch[0].task.batch_id;
        for stream_task in batch {
            if stream_task.task.batch_id != batch_id {
                return Err(EvolutionError::MixedBatchIds {
                    expected: batch_id,
                    task_id: stream_task.task.id.clone(),
                    found: stream_task.task.batch_id,
                });
            }
        }
        let mut ordered: Vec<&StreamTask> = batch.iter().collect();
        ordered.sort_by(|a, b| a.task.id.cmp(&b.task.id));

        let mut results: Vec<ContrastiveResult> = Vec::new();
        let mut added_meta: Vec<String> = Vec::new();
        let mut failures = 0usize;
        let mut first_failure: Option<String> = None;
        for stream_task in &ordered {
            match self.process_task(stream_task, batch_id) {
                Ok((result, reflected)) => {
                    results.push(result);
                    added_meta.extend(reflected);
                }
                Err(message) => {
                    failures += 1;
                    log::warn!(
                        "batch {batch_id}: task {} skipped: {message}",
                        stream_task.task.id
                    );
                    if first_failure.is_none() {
                        first_failure = Some(format!("task {}: {message}", stream_task.task.id));
                    }
                }
            }
        }
        if results.is_empty() {
            return Err(EvolutionError::AllTasksFailed {
                batch_id,
                n: failures,
                first: first_failure.unwrap_or_default(),
            });
        }

        let worst = select_worst(&results, self.config.bad_case_fraction);
        let committed = self.acquire_experiences(&ordered, &results, &worst, batch_id);

        let scores_on: Vec<TaskScore> = results.iter().map(|r| r.score_on.clone()).collect();
        let weekly_report = metrics::build_weekly_report(
            batch_id,
            &scores_on,
            self.portfolio_value,
            self.config.stake_per_week,
        )?;
        self.portfolio_value = weekly_report.portfolio_value_after;

        Ok(BatchOutcome {
            batch_id,
            results,
            committed_experience_ids: committed,
            added_meta_guideline_ids: added_meta,
            weekly_report,
        })
    }

    /// Contrastively evaluates one task and applies the weight updates.
    /// Returns the result plus the id of a meta-guideline added by
    /// reflection, if any. `Err` means the whole task is skipped.
    fn process_task(
        &mut self,
        stream_task: &StreamTask,
        batch_id: u32,
    ) -> Result<(ContrastiveResult, Option<String>), String> {
        let task = &stream_task.task;
        task.validate().map_err(|err| err.to_string())?;
        let settings = self.predictor_settings();
        let prices = task.market_prices.as_deref();

        // The memory-free baseline must succeed, or there is nothing to
        // contrast against and the task is skipped.
        let (forecast_off, trajectory_off) = predict(
            self.backends.chat.as_ref(),
            self.backends.search.as_ref(),
            &settings,
            Operation::PredictBaseline,
            task,
            None,
        )
        .map_err(|err| format!("baseline prediction failed: {err}"))?;
        let score_off = metrics::score_task(
            self.options.utility,
            &task.id,
            &forecast_off,
            prices,
            &stream_task.outcome,
        )
        .map_err(|err| format!("baseline scoring failed: {err}"))?;

        // The memory-conditioned attempt degrades to memory-free on backend
        // failure: the task still counts, memory just gets no credit.
        let rollout = match self.memory_rollout(task, &settings) {
            Ok(rollout) => rollout,
            Err(reason) => {
                log::warn!(
                    "task {}: memory path degraded to memory-free: {reason}",
                    task.id
                );
                None
            }
        };

        let Some(MemoryRollout {
            hits,
            guideline,
            forecast: forecast_on,
            trajectory: trajectory_on,
        }) = rollout
        else {
            // Memory unused: mirror the baseline, change nothing.
            let result = ContrastiveResult {
                task_id: task.id.clone(),
                forecast_on: forecast_off.clone(),
                forecast_off,
                score_on: score_off.clone(),
                score_off,
                gain: 0.0,
                trajectory_on: trajectory_off,
                retrieved_ids: Vec::new(),
                weight_updates: Vec::new(),
            };
            return Ok((result, None));
        };

        let score_on = metrics::score_task(
            self.options.utility,
            &task.id,
            &forecast_on,
            prices,
            &stream_task.outcome,
        )
        .map_err(|err| format!("memory-conditioned scoring failed: {err}"))?;
        let gain = score_on.utility - score_off.utility;

        let mut weight_updates = Vec::with_capacity(hits.len());
        for hit in &hits {
            let weight_after = self
                .experiences
                .update_weight(&hit.experience_id, gain)
                .map_err(|err| format!("weight update failed: {err}"))?;
            weight_updates.push(WeightUpdate {
                experience_id: hit.experience_id.clone(),
                weight_after,
            });
        }

        let mut reflected_id = None;
        if gain <= 0.0 {
            reflected_id = self.reflect_into_meta(task, gain, &guideline, batch_id);
        }

        let result = ContrastiveResult {
            task_id: task.id.clone(),
            forecast_on,
            forecast_off,
            score_on,
            score_off,
            gain,
            trajectory_on,
            retrieved_ids: hits.iter().map(|h| h.experience_id.clone()).collect(),
            weight_updates,
        };
        Ok((result, reflected_id))
    }

    /// Query generation → retrieval → meta selection → compilation →
    /// prediction. `Ok(None)` is a legitimate memory-free outcome (empty
    /// bank or nothing above threshold); `Err` is a degradation reason.
    fn memory_rollout(
        &self,
        task: &crate::predictor::Task,
        settings: &PredictorSettings,
    ) -> Result<Option<MemoryRollout>, String> {
        if self.experiences.is_empty() {
            return Ok(None);
        }
        let queries =
            cognition::generate_queries(self.backends.chat.as_ref(), task, self.config.temperature)
                .map_err(|err| format!("query generation failed: {err}"))?;
        let hits = self
            .experiences
            .retrieve(
                &queries,
                self.config.top_k,
                self.config.retrieval_threshold,
                self.backends.embedder.as_ref(),
            )
            .map_err(|err| format!("retrieval failed: {err}"))?;
        if hits.is_empty() {
            return Ok(None);
        }
        let ranked: Vec<RankedExperience> = hits
            .iter()
            .map(|hit| RankedExperience {
                experience: self
                    .experiences
                    .get(&hit.experience_id)
                    .expect("retrieval returns ids present in the bank")
                    .clone(),
                weighted_score: hit.weighted_score,
            })
            .collect();
        let meta = self
            .meta
            .select(&task.question, self.backends.embedder.as_ref())
            .map_err(|err| format!("meta-guideline selection failed: {err}"))?;
        let guideline = cognition::compile_guideline(
            self.backends.chat.as_ref(),
            task,
            &ranked,
            &meta,
            Operation::CompileGuideline,
            self.config.temperature,
        )
        .map_err(|err| format!("guideline compilation failed: {err}"))?;
        let (forecast, trajectory) = predict(
            self.backends.chat.as_ref(),
            self.backends.search.as_ref(),
            settings,
            Operation::PredictMemory,
            task,
            Some(&guideline),
        )
        .map_err(|err| format!("memory-conditioned prediction failed: {err}"))?;
        Ok(Some(MemoryRollout {
            hits,
            guideline,
            forecast,
            trajectory,
        }))
    }

    /// Reflection on a non-positive gain; returns the added meta-guideline
    /// id, or `None` when deduplicated or failed (both logged, not fatal).
    fn reflect_into_meta(
        &mut self,
        task: &crate::predictor::Task,
        gain: f64,
        guideline: &Guideline,
        batch_id: u32,
    ) -> Option<String> {
        let record = match cognition::reflect(
            self.backends.chat.as_ref(),
            task,
            gain,
            guideline,
            self.config.temperature,
        ) {
            Ok(record) => record,
            Err(err) => {
                log::warn!("task {}: reflection failed: {err}", task.id);
                return None;
            }
        };
        let id = format!("mg-{}", task.id);
        let meta_guideline = MetaGuideline {
            id: id.clone(),
            failure_pattern: record.failure_pattern,
            synthesis_instruction: record.synthesis_instruction,
            created_batch: batch_id,
        };
        match self
            .meta
            .add(meta_guideline, self.backends.embedder.as_ref())
        {
            Ok(MetaAddOutcome::Added) => Some(id),
            Ok(MetaAddOutcome::Duplicate { existing_id }) => {
                log::debug!(
                    "task {}: reflection deduplicated against meta-guideline {existing_id}",
                    task.id
                );
                None
            }
            Err(err) => {
                log::warn!(
                    "task {}: reflection meta-guideline rejected: {err}",
                    task.id
                );
                None
            }
        }
    }

    /// Verify-before-commit acquisition over the selected worst tasks:
    /// summarize the memory-conditioned trajectory into a candidate
    /// experience, re-evaluate the task with the candidate alone (under the
    /// default meta-guideline), and commit at initial weight only if the
    /// re-run improves the original Brier by at least `min_improvement`.
    /// Any failure in the chain skips that task's candidate.
    fn acquire_experiences(
        &mut self,
        ordered: &[&StreamTask],
        results: &[ContrastiveResult],
        worst: &[String],
        batch_id: u32,
    ) -> Vec<String> {
        let settings = self.predictor_settings();
        let mut committed = Vec::new();
        for task_id in worst {
            let result = results
                .iter()
                .find(|r| &r.task_id == task_id)
                .expect("worst ids are drawn from results");
            let stream_task = ordered
                .iter()
                .find(|s| &s.task.id == task_id)
                .expect("results are drawn from the batch");
            let candidate_id = format!("exp-b{batch_id:04}-{task_id}");
            match self.evaluate_candidate(stream_task, result, &candidate_id, batch_id, &settings) {
                Ok(Some(candidate)) => match self.experiences.add(candidate) {
                    Ok(()) => committed.push(candidate_id),
                    Err(err) => {
                        log::warn!("batch {batch_id}: candidate {candidate_id} rejected: {err}");
                    }
                },
                Ok(None) => {}
                Err(reason) => {
                    log::warn!("batch {batch_id}: task {task_id}: acquisition skipped: {reason}");
                }
            }
        }
        committed
    }

    /// Runs one candidate through summarize → compile → re-predict and
    /// applies the commit gate. `Ok(None)` means measured and discarded.
    fn evaluate_candidate(
        &self,
        stream_task: &StreamTask,
        result: &ContrastiveResult,
        candidate_id: &str,
        batch_id: u32,
        settings: &PredictorSettings,
    ) -> Result<Option<Experience>, String> {
        let task = &stream_task.task;
        let outcome_label = &task.candidates[stream_task.outcome.winner()];
        let candidate = cognition::summarize_experience(
            self.backends.chat.as_ref(),
            task,
            &result.trajectory_on,
            outcome_label,
            candidate_id,
            batch_id,
            self.config.temperature,
        )
        .map_err(|err| format!("candidate summarization failed: {err}"))?;
        let ranked = vec![RankedExperience {
            experience: candidate.clone(),
            weighted_score: 1.0,
        }];
        let guideline = cognition::compile_guideline(
            self.backends.chat.as_ref(),
            task,
            &ranked,
            &default_meta_guideline(),
            Operation::CompileCandidate,
            self.config.temperature,
        )
        .map_err(|err| format!("candidate guideline compilation failed: {err}"))?;
        let (forecast, _trajectory) = predict(
            self.backends.chat.as_ref(),
            self.backends.search.as_ref(),
            settings,
            Operation::PredictCandidate,
            task,
            Some(&guideline),
        )
        .map_err(|err| format!("candidate re-evaluation failed: {err}"))?;
        let candidate_brier = metrics::brier(&forecast, &stream_task.outcome)
            .map_err(|err| format!("candidate scoring failed: {err}"))?;
        let improvement = result.score_on.brier - candidate_brier;
        if improvement >= self.config.min_improvement {
            Ok(Some(candidate))
        } else {
            log::info!(
                "batch {batch_id}: candidate {candidate_id} discarded \
                 (improvement {improvement} below {})",
                self.config.min_improvement
            );
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cognition::{ScriptedBackend, TranscriptEntry};
    use crate::embedding::TokenHashEmbedder;
    use crate::predictor::{NullSearchBackend, Outcome, Task};

    fn stream_task(id: &str, question: &str, batch_id: u32, winner: usize) -> StreamTask {
        let task = Task {
            id: id.into(),
            question: question.into(),
            candidates: vec!["yes".into(), "no".into()],
            market_prices: Some(vec![0.5, 0.5]),
            close_time: "2025-06-01T12:00:00Z".parse().unwrap(),
            batch_id,
        };
        StreamTask {
            outcome: Outcome::from_index(winner, task.candidates.len()).unwrap(),
            task,
            price_snapshot_time: None,
        }
    }

    fn entry(operation: Operation, task_id: &str, replies: &[String]) -> TranscriptEntry {
        TranscriptEntry {
            operation,
            task_id: task_id.into(),
            replies: replies.to_vec(),
        }
    }

    fn forecast_reply(q_winner: f64, winner: usize) -> String {
        let mut weights = [0.0_f64; 2];
        weights[winner] = q_winner;
        weights[1 - winner] = 1.0 - q_winner;
        serde_json::json!({ "yes": weights[0], "no": weights[1] }).to_string()
    }

    fn query_reply(query: &str) -> String {
        serde_json::json!({
            "queries": [{ "query": query, "search_target": "question" }]
        })
        .to_string()
    }

    fn compile_reply() -> String {
        serde_json::json!({ "bullets": ["Lean on the recurring signal."] }).to_string()
    }

    fn reflect_reply() -> String {
        serde_json::json!({
            "failure_pattern": "Stale lesson applied after the regime flipped.",
            "synthesis_instruction": "Check regime freshness before applying lessons.",
        })
        .to_string()
    }

    fn summarize_reply() -> String {
        serde_json::json!({
            "category": "test",
            "failure_reason": "Overweighted the market price.",
            "improvement": "Weigh the recurring signal more heavily.",
            "missed_information": "The signal telegraphs the winner.",
        })
        .to_string()
    }

    fn engine_with(
        entries: Vec<TranscriptEntry>,
        config: EvolutionConfig,
        experiences: ExperienceBank,
    ) -> EvolutionEngine {
        let backends = EngineBackends {
            chat: Arc::new(ScriptedBackend::from_entries(entries)),
            search: Arc::new(NullSearchBackend),
            embedder: Arc::new(TokenHashEmbedder),
        };
        EvolutionEngine::new(
            config,
            EngineOptions::default(),
            backends,
            experiences,
            MetaGuidelineBank::new(),
        )
        .unwrap()
    }

    fn seed(id: &str, question: &str) -> Experience {
        Experience::new(
            id,
            question,
            "test",
            "Missed the signal.",
            "Follow the signal.",
            "Signal history.",
            0,
        )
    }

    #[test]
    fn config_validation_rejects_out_of_range_values() {
        let cases: Vec<(Box<dyn Fn(&mut EvolutionConfig)>, &str)> = vec![
            (Box::new(|c| c.bad_case_fraction = 0.0), "bad_case_fraction"),
            (Box::new(|c| c.bad_case_fraction = 1.5), "bad_case_fraction"),
            (Box::new(|c| c.min_improvement = -0.1), "min_improvement"),
            (Box::new(|c| c.top_k = 0), "top_k"),
            (
                Box::new(|c| c.retrieval_threshold = f64::NAN),
                "retrieval_threshold",
            ),
            (Box::new(|c| c.turn_cap = 0), "turn_cap"),
            (Box::new(|c| c.temperature = -1.0), "temperature"),
            (
                Box::new(|c| c.stake_per_week = f64::INFINITY),
                "stake_per_week",
            ),
            (
                Box::new(|c| c.cutoff_offset_hours = -1),
                "cutoff_offset_hours",
            ),
        ];
        for (mutate, field) in cases {
            let mut config = EvolutionConfig::default();
            mutate(&mut config);
            let err = config.validate().unwrap_err().to_string();
            assert!(err.contains(field), "{field} missing from {err}");
        }
        EvolutionConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_bank_runs_memory_free_and_changes_nothing() {
        let entries = vec![entry(
            Operation::PredictBaseline,
            "t1",
            &[forecast_reply(0.5, 0)],
        )];
        let mut engine = engine_with(entries, EvolutionConfig::default(), ExperienceBank::new());
        let outcome = engine
            .process_batch(&[stream_task("t1", "any question", 1, 0)])
            .unwrap();
        let result = &outcome.results[0];
        assert_eq!(result.gain, 0.0);
        assert!(result.retrieved_ids.is_empty());
        assert!(result.weight_updates.is_empty());
        assert_eq!(result.forecast_on, result.forecast_off);
        assert_eq!(result.score_on, result.score_off);
        assert!(engine.experiences().is_empty());
        assert!(engine.meta_guidelines().is_empty());
        assert!(outcome.added_meta_guideline_ids.is_empty());
    }

    #[test]
    fn positive_gain_raises_every_retrieved_weight_by_gain() {
        // Two experiences match the scripted query at cosine 1.0; the
        // memory-conditioned forecast scores 0.28125 vs baseline 0.5, so the
        // exact dyadic gain 0.21875 lands on both weights.
        let mut bank = ExperienceBank::new();
        bank.add(seed("exp-a", "goodseed")).unwrap();
        bank.add(seed("exp-b", "goodseed")).unwrap();
        let entries = vec![
            entry(Operation::GenerateQueries, "t1", &[query_reply("goodseed")]),
            entry(Operation::CompileGuideline, "t1", &[compile_reply()]),
            entry(Operation::PredictMemory, "t1", &[forecast_reply(0.625, 0)]),
            entry(Operation::PredictBaseline, "t1", &[forecast_reply(0.5, 0)]),
            entry(Operation::SummarizeExperience, "t1", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t1", &[compile_reply()]),
            entry(
                Operation::PredictCandidate,
                "t1",
                &[forecast_reply(0.625, 0)],
            ),
        ];
        let mut engine = engine_with(entries, EvolutionConfig::default(), bank);
        let outcome = engine
            .process_batch(&[stream_task("t1", "goodseed", 1, 0)])
            .unwrap();
        let result = &outcome.results[0];
        assert_eq!(result.gain, 0.21875);
        assert_eq!(result.score_on.brier, 0.28125);
        assert_eq!(result.score_off.brier, 0.5);
        assert_eq!(result.retrieved_ids, vec!["exp-a", "exp-b"]);
        assert_eq!(result.weight_updates.len(), 2);
        for update in &result.weight_updates {
            assert_eq!(update.weight_after, 1.21875);
        }
        for id in ["exp-a", "exp-b"] {
            let exp = engine.experiences().get(id).unwrap();
            assert_eq!(exp.weight, 1.21875);
            assert_eq!(exp.times_retrieved, 1);
            assert_eq!(exp.cumulative_gain, 0.21875);
        }
        // Positive gain means no reflection.
        assert!(outcome.added_meta_guideline_ids.is_empty());
        assert!(engine.meta_guidelines().is_empty());
        // Improvement of the identical candidate forecast is zero: discarded.
        assert!(outcome.committed_experience_ids.is_empty());
        assert_eq!(engine.experiences().len(), 2);
    }

    #[test]
    fn harmful_memory_drops_weight_and_adds_one_reflection() {
        // Memory-conditioned Brier ~0.9 vs baseline ~0.1: gain ~= -0.8.
        let q_on = 1.0 - (0.9_f64 / 2.0).sqrt();
        let q_off = 1.0 - (0.1_f64 / 2.0).sqrt();
        let mut bank = ExperienceBank::new();
        bank.add(seed("exp-bad", "badseed")).unwrap();
        let entries = vec![
            entry(Operation::GenerateQueries, "t1", &[query_reply("badseed")]),
            entry(Operation::CompileGuideline, "t1", &[compile_reply()]),
            entry(Operation::PredictMemory, "t1", &[forecast_reply(q_on, 1)]),
            entry(
                Operation::PredictBaseline,
                "t1",
                &[forecast_reply(q_off, 1)],
            ),
            entry(Operation::Reflect, "t1", &[reflect_reply()]),
            entry(Operation::SummarizeExperience, "t1", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t1", &[compile_reply()]),
            entry(
                Operation::PredictCandidate,
                "t1",
                &[forecast_reply(q_on, 1)],
            ),
        ];
        let mut engine = engine_with(entries, EvolutionConfig::default(), bank);
        let outcome = engine
            .process_batch(&[stream_task("t1", "badseed", 1, 1)])
            .unwrap();
        let result = &outcome.results[0];
        assert!((result.gain + 0.8).abs() < 1e-12, "gain {}", result.gain);
        let exp = engine.experiences().get("exp-bad").unwrap();
        assert_eq!(
            exp.weight,
            1.0 + result.gain,
            "weight moved by exactly the gain"
        );
        assert_eq!(exp.cumulative_gain, result.gain);
        assert_eq!(outcome.added_meta_guideline_ids, vec!["mg-t1"]);
        assert_eq!(engine.meta_guidelines().len(), 1);
    }

    #[test]
    fn select_worst_takes_ceil_fraction_lowest_utilities() {
        let result = |id: &str, brier: f64| ContrastiveResult {
            task_id: id.into(),
            forecast_on: Forecast::from_weights(vec![0.5, 0.5]).unwrap(),
            forecast_off: Forecast::from_weights(vec![0.5, 0.5]).unwrap(),
            score_on: TaskScore {
                task_id: id.into(),
                brier,
                market_return: None,
                utility: -brier,
            },
            score_off: TaskScore {
                task_id: id.into(),
                brier: 0.5,
                market_return: None,
                utility: -0.5,
            },
            gain: 0.0,
            trajectory_on: Trajectory::default(),
            retrieved_ids: Vec::new(),
            weight_updates: Vec::new(),
        };

        let ten: Vec<ContrastiveResult> = (0..10).map(|i| result(&format!("t{i}"), 0.5)).collect();
        assert_eq!(select_worst(&ten, 0.3).len(), 3);
        assert_eq!(select_worst(&ten[..1], 0.3), vec!["t0"]);

        let three = vec![result("a", 0.5), result("b", 0.9), result("c", 0.1)];
        assert_eq!(select_worst(&three, 0.34), vec!["b", "a"]);

        // Bitwise-equal utilities fall back to ascending task id.
        let tied = vec![result("z", 0.5), result("m", 0.5), result("a", 0.5)];
        assert_eq!(select_worst(&tied, 0.6), vec!["a", "m"]);

        assert!(select_worst(&[], 0.3).is_empty());
        assert_eq!(select_worst(&ten, 1.0).len(), 10);
    }

    #[test]
    fn commit_gate_is_inclusive_at_min_improvement() {
        // Original memory-free Brier 0.5; candidate re-run Brier
        // 0.388671875 improves by 0.111328125 >= 0.05: committed.
        let mut config = EvolutionConfig::default();
        config.bad_case_fraction = 1.0;
        let entries = vec![
            entry(Operation::PredictBaseline, "t1", &[forecast_reply(0.5, 0)]),
            entry(Operation::SummarizeExperience, "t1", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t1", &[compile_reply()]),
            entry(
                Operation::PredictCandidate,
                "t1",
                &[forecast_reply(0.53125, 0)],
            ),
            entry(Operation::PredictBaseline, "t2", &[forecast_reply(0.5, 0)]),
            entry(Operation::SummarizeExperience, "t2", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t2", &[compile_reply()]),
            entry(
                Operation::PredictCandidate,
                "t2",
                &[forecast_reply(0.515625, 0)],
            ),
        ];
        let mut engine = engine_with(entries, config, ExperienceBank::new());
        let outcome = engine
            .process_batch(&[
                stream_task("t1", "q one", 1, 0),
                stream_task("t2", "q two", 1, 0),
            ])
            .unwrap();
        // t1: 0.5 - 0.388671875 = 0.111328125 commits; t2: 0.5 -
        // 0.46923828125 = 0.03076171875 discards.
        assert_eq!(outcome.committed_experience_ids, vec!["exp-b0001-t1"]);
        assert_eq!(engine.experiences().len(), 1);
        let committed = engine.experiences().get("exp-b0001-t1").unwrap();
        assert_eq!(committed.weight, 1.0);
        assert_eq!(committed.created_batch, 1);
        assert_eq!(committed.question, "q one");
    }

    #[test]
    fn acquisition_chain_failure_skips_candidate_without_commit() {
        let mut config = EvolutionConfig::default();
        config.bad_case_fraction = 1.0;
        // No summarize script: the acquisition chain fails and is skipped.
        let entries = vec![entry(
            Operation::PredictBaseline,
            "t1",
            &[forecast_reply(0.5, 0)],
        )];
        let mut engine = engine_with(entries, config, ExperienceBank::new());
        let outcome = engine
            .process_batch(&[stream_task("t1", "q", 1, 0)])
            .unwrap();
        assert!(outcome.committed_experience_ids.is_empty());
        assert!(engine.experiences().is_empty());
    }

    #[test]
    fn weight_decay_is_visible_to_later_tasks_in_the_batch() {
        // t1 retrieves the seed at weight 1.0 and drops it by 0.5; with the
        // threshold at 0.6 the seed is invisible to t2, which runs
        // memory-free. Unconsumed t2 memory scripts prove the path is never
        // taken (a wrong retrieval would flip t2's forecasts).
        let mut config = EvolutionConfig::default();
        config.retrieval_threshold = 0.6;
        let mut bank = ExperienceBank::new();
        bank.add(seed("exp-g", "goodseed")).unwrap();
        let entries = vec![
            entry(Operation::GenerateQueries, "t1", &[query_reply("goodseed")]),
            entry(Operation::CompileGuideline, "t1", &[compile_reply()]),
            // Memory Brier 0.78125 vs baseline 0.28125: gain exactly -0.5.
            entry(Operation::PredictMemory, "t1", &[forecast_reply(0.375, 0)]),
            entry(
                Operation::PredictBaseline,
                "t1",
                &[forecast_reply(0.625, 0)],
            ),
            entry(Operation::Reflect, "t1", &[reflect_reply()]),
            entry(Operation::GenerateQueries, "t2", &[query_reply("goodseed")]),
            entry(Operation::CompileGuideline, "t2", &[compile_reply()]),
            entry(Operation::PredictMemory, "t2", &[forecast_reply(0.9, 0)]),
            entry(
                Operation::PredictBaseline,
                "t2",
                &[forecast_reply(0.625, 0)],
            ),
            entry(Operation::SummarizeExperience, "t1", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t1", &[compile_reply()]),
            entry(
                Operation::PredictCandidate,
                "t1",
                &[forecast_reply(0.375, 0)],
            ),
        ];
        let mut engine = engine_with(entries, config, bank);
        let outcome = engine
            .process_batch(&[
                stream_task("t1", "goodseed", 1, 0),
                stream_task("t2", "goodseed", 1, 0),
            ])
            .unwrap();
        let t1 = &outcome.results[0];
        let t2 = &outcome.results[1];
        assert_eq!(t1.gain, -0.5);
        assert_eq!(t1.weight_updates[0].weight_after, 0.5);
        assert!(t2.retrieved_ids.is_empty(), "decayed seed is not retrieved");
        assert_eq!(t2.gain, 0.0);
        assert_eq!(t2.forecast_on, t2.forecast_off);
        assert_eq!(
            engine.experiences().get("exp-g").unwrap().times_retrieved,
            1
        );
    }

    #[test]
    fn memory_backend_failure_degrades_to_memory_free() {
        // Retrieval succeeds but compilation returns unusable bullets: the
        // task degrades to memory-free with gain 0 and no weight movement.
        let mut bank = ExperienceBank::new();
        bank.add(seed("exp-g", "goodseed")).unwrap();
        let entries = vec![
            entry(Operation::GenerateQueries, "t1", &[query_reply("goodseed")]),
            entry(
                Operation::CompileGuideline,
                "t1",
                &[serde_json::json!({ "bullets": [] }).to_string()],
            ),
            entry(Operation::PredictBaseline, "t1", &[forecast_reply(0.5, 0)]),
            entry(Operation::SummarizeExperience, "t1", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t1", &[compile_reply()]),
            entry(Operation::PredictCandidate, "t1", &[forecast_reply(0.5, 0)]),
        ];
        let mut engine = engine_with(entries, EvolutionConfig::default(), bank);
        let outcome = engine
            .process_batch(&[stream_task("t1", "goodseed", 1, 0)])
            .unwrap();
        let result = &outcome.results[0];
        assert_eq!(result.gain, 0.0);
        assert!(result.retrieved_ids.is_empty());
        assert!(result.weight_updates.is_empty());
        assert_eq!(result.forecast_on, result.forecast_off);
        let exp = engine.experiences().get("exp-g").unwrap();
        assert_eq!(exp.weight, 1.0);
        assert_eq!(
            exp.times_retrieved, 0,
            "degraded task never updates weights"
        );
    }

    #[test]
    fn failing_task_is_skipped_and_excluded_from_the_report() {
        // t1 has no baseline script at all: skipped with a diagnostic.
        let entries = vec![entry(
            Operation::PredictBaseline,
            "t2",
            &[forecast_reply(0.5, 0)],
        )];
        let mut engine = engine_with(entries, EvolutionConfig::default(), ExperienceBank::new());
        let outcome = engine
            .process_batch(&[
                stream_task("t1", "q one", 1, 0),
                stream_task("t2", "q two", 1, 0),
            ])
            .unwrap();
        assert_eq!(outcome.results.len(), 1);
        assert_eq!(outcome.results[0].task_id, "t2");
        assert_eq!(outcome.weekly_report.n_tasks, 1);
    }

    #[test]
    fn batch_validation_errors() {
        let mut engine = engine_with(vec![], EvolutionConfig::default(), ExperienceBank::new());
        assert!(matches!(
            engine.process_batch(&[]),
            Err(EvolutionError::EmptyBatch)
        ));
        let err = engine
            .process_batch(&[stream_task("t1", "q", 1, 0), stream_task("t2", "q", 2, 0)])
            .unwrap_err();
        assert!(matches!(err, EvolutionError::MixedBatchIds { .. }));
        // Nothing scripted: every task fails.
        let err = engine
            .process_batch(&[stream_task("t1", "q", 1, 0)])
            .unwrap_err();
        assert!(matches!(err, EvolutionError::AllTasksFailed { .. }));
    }

    #[test]
    fn portfolio_accumulates_across_batches() {
        let entries = vec![
            entry(Operation::PredictBaseline, "t1", &[forecast_reply(0.5, 0)]),
            entry(Operation::PredictBaseline, "t2", &[forecast_reply(1.0, 0)]),
            entry(Operation::SummarizeExperience, "t1", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t1", &[compile_reply()]),
            entry(Operation::PredictCandidate, "t1", &[forecast_reply(0.5, 0)]),
            entry(Operation::SummarizeExperience, "t2", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t2", &[compile_reply()]),
            entry(Operation::PredictCandidate, "t2", &[forecast_reply(1.0, 0)]),
        ];
        let mut engine = engine_with(entries, EvolutionConfig::default(), ExperienceBank::new());
        // Batch 1: uniform forecast never clears the 0.5 price: return 0.0.
        let b1 = engine
            .process_batch(&[stream_task("t1", "q one", 1, 0)])
            .unwrap();
        assert_eq!(b1.weekly_report.mean_return, 0.0);
        assert_eq!(b1.weekly_report.portfolio_value_after, 100.0);
        // Batch 2: all-in on the winner: return 1 - 0.5 = 0.5.
        let b2 = engine
            .process_batch(&[stream_task("t2", "q two", 2, 0)])
            .unwrap();
        assert_eq!(b2.weekly_report.mean_return, 0.5);
        assert_eq!(b2.weekly_report.portfolio_value_after, 250.0);
        assert_eq!(engine.portfolio_value(), 250.0);
    }

    #[test]
    fn reflection_failure_keeps_result_and_meta_bank_clean() {
        let mut bank = ExperienceBank::new();
        bank.add(seed("exp-bad", "badseed")).unwrap();
        let entries = vec![
            entry(Operation::GenerateQueries, "t1", &[query_reply("badseed")]),
            entry(Operation::CompileGuideline, "t1", &[compile_reply()]),
            entry(Operation::PredictMemory, "t1", &[forecast_reply(0.375, 0)]),
            entry(
                Operation::PredictBaseline,
                "t1",
                &[forecast_reply(0.625, 0)],
            ),
            entry(Operation::Reflect, "t1", &["not json at all".to_string()]),
            entry(Operation::SummarizeExperience, "t1", &[summarize_reply()]),
            entry(Operation::CompileCandidate, "t1", &[compile_reply()]),
            entry(
                Operation::PredictCandidate,
                "t1",
                &[forecast_reply(0.375, 0)],
            ),
        ];
        let mut engine = engine_with(entries, EvolutionConfig::default(), bank);
        let outcome = engine
            .process_batch(&[stream_task("t1", "badseed", 1, 0)])
            .unwrap();
        assert_eq!(outcome.results[0].gain, -0.5);
        assert!(outcome.added_meta_guideline_ids.is_empty());
        assert!(
            engine.meta_guidelines().is_empty(),
            "malformed reflection never lands"
        );
        // The weight update still happened: reflection is post-scoring.
        assert_eq!(engine.experiences().get("exp-bad").unwrap().weight, 0.5);
    }
}
