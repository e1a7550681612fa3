//! Experience and meta-guideline banks: weighted storage, retrieval, weight
//! updates, deduplication, and JSONL persistence.
//!
//! An *experience* is a structured lesson distilled from a past task
//! trajectory. Its retrieval priority is `weight × cosine similarity`; the
//! weight moves additively with the measured gain each time the experience is
//! retrieved, clamped to `[0, 10]`, so helpful lessons rise and harmful or
//! stale ones decay toward exclusion.
//!
//! A *meta-guideline* tells the compiler how to synthesize retrieved
//! experiences into a task guideline. The bank grows through reflection on
//! failures, deduplicates near-identical instructions, and serves the most
//! relevant instruction per task (falling back to a built-in default).

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, EmbedError, Embedder};

/// Lower clamp bound for experience weights.
pub const WEIGHT_MIN: f64 = 0.0;
/// Upper clamp bound for experience weights.
pub const WEIGHT_MAX: f64 = 10.0;
/// Weight assigned to a newly committed experience.
pub const INITIAL_WEIGHT: f64 = 1.0;
/// Meta-guidelines whose instructions are more similar than this are
/// considered duplicates (strict `>` comparison).
pub const META_DEDUP_SIMILARITY: f64 = 0.9;
/// Minimum similarity (inclusive) for a stored meta-guideline to be selected
/// over the built-in default.
pub const META_SELECT_SIMILARITY: f64 = 0.3;
/// Id of the built-in default meta-guideline.
pub const DEFAULT_META_GUIDELINE_ID: &str = "default";
/// Synthesis instruction used when no stored meta-guideline is relevant.
pub const DEFAULT_SYNTHESIS_INSTRUCTION: &str = "Before applying lessons from past experiences, \
you MUST assess whether each experience is truly applicable to this specific task type. \
Identify which lessons are directly applicable vs. need adaptation.";

/// Errors from bank operations and persistence.
#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("experience id {0:?} already exists in the bank")]
    DuplicateId(String),
    #[error("no experience with id {0:?}")]
    UnknownId(String),
    #[error("{path}:{line}: {message}")]
    Load {
        path: String,
        line: usize,
        message: String,
    },
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A structured lesson distilled from one past task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Experience {
    /// Stable unique id.
    pub id: String,
    /// The question of the task the lesson came from.
    pub question: String,
    /// Free-form topic label.
    pub category: String,
    /// Why the original attempt went wrong.
    pub failure_reason: String,
    /// What to do differently next time.
    pub improvement: String,
    /// Information that was available but missed.
    pub missed_information: String,
    /// Retrieval weight in `[WEIGHT_MIN, WEIGHT_MAX]`.
    pub weight: f64,
    /// Batch in which the experience was committed.
    pub created_batch: u32,
    /// How many times the experience has been retrieved (and hence updated).
    pub times_retrieved: u64,
    /// Sum of all gains ever applied, before clamping.
    pub cumulative_gain: f64,
}

impl Experience {
    /// Creates a fresh experience at [`INITIAL_WEIGHT`] with zeroed counters.
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        category: impl Into<String>,
        failure_reason: impl Into<String>,
        improvement: impl Into<String>,
        missed_information: impl Into<String>,
        created_batch: u32,
    ) -> Self {
        Experience {
            id: id.into(),
            question: question.into(),
            category: category.into(),
            failure_reason: failure_reason.into(),
            improvement: improvement.into(),
            missed_information: missed_information.into(),
            weight: INITIAL_WEIGHT,
            created_batch,
            times_retrieved: 0,
            cumulative_gain: 0.0,
        }
    }

    /// The text embedded when a query targets lesson content rather than the
    /// originating question.
    pub fn retrieval_text(&self) -> String {
        format!(
            "{}\n{}\n{}",
            self.improvement, self.failure_reason, self.missed_information
        )
    }
}

/// Which text of an experience a retrieval query is matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTarget {
    /// Match against the experience's originating question.
    Question,
    /// Match against the lesson content (improvement, failure reason,
    /// missed information).
    Experience,
}

/// One retrieval query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub query: String,
    pub target: QueryTarget,
}

/// One retrieval result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub experience_id: String,
    /// Cosine similarity of the best-matching query.
    pub similarity: f64,
    /// `weight × similarity` of the best-matching query.
    pub weighted_score: f64,
}

/// Weighted store of experiences with exact-scan retrieval.
#[derive(Debug, Default)]
pub struct ExperienceBank {
    entries: Vec<Experience>,
    by_id: HashMap<String, usize>,
}

impl ExperienceBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Experiences in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.entries.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Experience> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    /// Adds an experience; the id must be new.
    pub fn add(&mut self, experience: Experience) -> Result<(), MemoryError> {
        if self.by_id.contains_key(&experience.id) {
            return Err(MemoryError::DuplicateId(experience.id));
        }
        self.by_id.insert(experience.id.clone(), self.entries.len());
        self.entries.push(experience);
        Ok(())
    }

    /// Applies one retrieval-and-update cycle to an experience: the weight
    /// moves by `gain` and is clamped to `[WEIGHT_MIN, WEIGHT_MAX]`, the
    /// retrieval counter increments, and the raw gain accumulates. Returns
    /// the new weight.
    pub fn update_weight(&mut self, id: &str, gain: f64) -> Result<f64, MemoryError> {
        let index = *self
            .by_id
            .get(id)
            .ok_or_else(|| MemoryError::UnknownId(id.to_owned()))?;
        let entry = &mut self.entries[index];
        entry.weight = (entry.weight + gain).clamp(WEIGHT_MIN, WEIGHT_MAX);
        entry.times_retrieved += 1;
        entry.cumulative_gain += gain;
        Ok(entry.weight)
    }

    /// Exact-scan weighted retrieval.
    ///
    /// Every experience is scored against every query (`weight × cosine`,
    /// using the query's target text), the best score per experience is
    /// kept, scores below `threshold` are dropped (the threshold itself is
    /// kept), survivors are sorted by score descending with ties broken by
    /// ascending experience id, and the top `top_k` are returned.
    ///
    /// Queries or experiences whose text cannot be embedded (e.g. empty) are
    /// skipped with a warning rather than failing the whole retrieval.
    pub fn retrieve(
        &self,
        queries: &[RetrievalQuery],
        top_k: usize,
        threshold: f64,
        embedder: &dyn Embedder,
    ) -> Result<Vec<RetrievalHit>, MemoryError> {
        if top_k == 0 || queries.is_empty() || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        // experience id -> (similarity, weighted_score) of the best query
        let mut best: HashMap<&str, (f64, f64)> = HashMap::new();
        for query in queries {
            let query_vector = match embedder.embed(&query.query) {
                Ok(v) => v,
                Err(err) => {
                    log::warn!(
                        "skipping unembeddable retrieval query {:?}: {err}",
                        query.query
                    );
                    continue;
                }
            };
            for experience in &self.entries {
                let text = match query.target {
                    QueryTarget::Question => experience.question.clone(),
                    QueryTarget::Experience => experience.retrieval_text(),
                };
                let experience_vector = match embedder.embed(&text) {
                    Ok(v) => v,
                    Err(err) => {
                        log::warn!(
                            "skipping unembeddable experience {:?} during retrieval: {err}",
                            experience.id
                        );
                        continue;
                    }
                };
                let similarity = cosine(&query_vector, &experience_vector)?;
                let weighted_score = experience.weight * similarity;
                let slot = best
                    .entry(&experience.id)
                    .or_insert((similarity, weighted_score));
                if weighted_score > slot.1 {
                    *slot = (similarity, weighted_score);
                }
            }
        }
        let mut hits: Vec<RetrievalHit> = best
            .into_iter()
            .filter(|(_, (_, score))| *score >= threshold)
            .map(|(id, (similarity, weighted_score))| RetrievalHit {
                experience_id: id.to_owned(),
                similarity,
                weighted_score,
            })
            .collect();
        hits.sort_by(|a, b| {
            b.weighted_score
                .partial_cmp(&a.weighted_score)
                .expect("weighted scores are finite")
                .then_with(|| a.experience_id.cmp(&b.experience_id))
        });
        hits.truncate(top_k);
        Ok(hits)
    }

    /// Writes the bank as JSONL in insertion order.
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        save_jsonl(path, &self.entries)
    }

    /// Loads a bank saved by [`ExperienceBank::save`]. Errors carry the
    /// offending line number. Weights outside the clamp range are rejected.
    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let mut bank = ExperienceBank::new();
        for (line_no, line) in read_lines(path)? {
            let experience: Experience =
                serde_json::from_str(&line).map_err(|err| MemoryError::Load {
                    path: path.display().to_string(),
                    line: line_no,
                    message: err.to_string(),
                })?;
            if !(WEIGHT_MIN..=WEIGHT_MAX).contains(&experience.weight) {
                return Err(MemoryError::Load {
                    path: path.display().to_string(),
                    line: line_no,
                    message: format!(
                        "weight {} outside [{WEIGHT_MIN}, {WEIGHT_MAX}]",
                        experience.weight
                    ),
                });
            }
            bank.add(experience).map_err(|err| MemoryError::Load {
                path: path.display().to_string(),
                line: line_no,
                message: err.to_string(),
            })?;
        }
        Ok(bank)
    }
}

/// A stored instruction for compiling experiences into a guideline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetaGuideline {
    pub id: String,
    /// The failure pattern that prompted this instruction.
    pub failure_pattern: String,
    /// How to synthesize retrieved experiences for tasks matching the
    /// pattern.
    pub synthesis_instruction: String,
    pub created_batch: u32,
}

/// The built-in meta-guideline used when nothing stored is relevant.
pub fn default_meta_guideline() -> MetaGuideline {
    MetaGuideline {
        id: DEFAULT_META_GUIDELINE_ID.to_owned(),
        failure_pattern: String::new(),
        synthesis_instruction: DEFAULT_SYNTHESIS_INSTRUCTION.to_owned(),
        created_batch: 0,
    }
}

/// Result of attempting to add a meta-guideline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetaAddOutcome {
    Added,
    /// A stored instruction was more similar than [`META_DEDUP_SIMILARITY`];
    /// nothing was added.
    Duplicate {
        existing_id: String,
    },
}

/// Deduplicated store of meta-guidelines.
#[derive(Debug, Default)]
pub struct MetaGuidelineBank {
    entries: Vec<MetaGuideline>,
}

impl MetaGuidelineBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Meta-guidelines in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &MetaGuideline> {
        self.entries.iter()
    }

    pub fn get(&self, id: &str) -> Option<&MetaGuideline> {
        self.entries.iter().find(|m| m.id == id)
    }

    /// Adds unless an existing instruction is near-identical (cosine of the
    /// synthesis instructions strictly above [`META_DEDUP_SIMILARITY`]); the
    /// first such existing entry wins.
    pub fn add(
        &mut self,
        guideline: MetaGuideline,
        embedder: &dyn Embedder,
    ) -> Result<MetaAddOutcome, MemoryError> {
        if self.entries.iter().any(|m| m.id == guideline.id) {
            return Err(MemoryError::DuplicateId(guideline.id));
        }
        let new_vector = embedder.embed(&guideline.synthesis_instruction)?;
        for existing in &self.entries {
            let existing_vector = embedder.embed(&existing.synthesis_instruction)?;
            let similarity = cosine(&new_vector, &existing_vector)?;
            if similarity > META_DEDUP_SIMILARITY {
                return Ok(MetaAddOutcome::Duplicate {
                    existing_id: existing.id.clone(),
                });
            }
        }
        self.entries.push(guideline);
        Ok(MetaAddOutcome::Added)
    }

    /// Picks the stored instruction most similar to the task question, if
    /// that similarity reaches [`META_SELECT_SIMILARITY`] (inclusive);
    /// otherwise returns the built-in default. Ties keep the earliest entry.
    pub fn select(
        &self,
        question: &str,
        embedder: &dyn Embedder,
    ) -> Result<MetaGuideline, MemoryError> {
        let question_vector = match embedder.embed(question) {
            Ok(v) => v,
            Err(err) => {
                log::warn!("meta-guideline selection fell back to default: {err}");
                return Ok(default_meta_guideline());
            }
        };
        let mut best: Option<(f64, &MetaGuideline)> = None;
        for entry in &self.entries {
            let vector = embedder.embed(&entry.synthesis_instruction)?;
            let similarity = cosine(&question_vector, &vector)?;
            if best.map_or(true, |(best_sim, _)| similarity > best_sim) {
                best = Some((similarity, entry));
            }
        }
        match best {
            Some((similarity, entry)) if similarity >= META_SELECT_SIMILARITY => Ok(entry.clone()),
            _ => Ok(default_meta_guideline()),
        }
    }

    /// Writes the bank as JSONL in insertion order.
    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        save_jsonl(path, &self.entries)
    }

    /// Loads a bank saved by [`MetaGuidelineBank::save`], re-enforcing the
    /// dedup invariant: a file containing near-duplicate instructions is
    /// rejected.
    pub fn load(path: &Path, embedder: &dyn Embedder) -> Result<Self, MemoryError> {
        let mut bank = MetaGuidelineBank::new();
        for (line_no, line) in read_lines(path)? {
            let guideline: MetaGuideline =
                serde_json::from_str(&line).map_err(|err| MemoryError::Load {
                    path: path.display().to_string(),
                    line: line_no,
                    message: err.to_string(),
                })?;
            match bank.add(guideline, embedder) {
                Ok(MetaAddOutcome::Added) => {}
                Ok(MetaAddOutcome::Duplicate { existing_id }) => {
                    return Err(MemoryError::Load {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("near-duplicate of stored meta-guideline {existing_id:?}"),
                    });
                }
                Err(err) => {
                    return Err(MemoryError::Load {
                        path: path.display().to_string(),
                        line: line_no,
                        message: err.to_string(),
                    });
                }
            }
        }
        Ok(bank)
    }
}

fn save_jsonl<T: Serialize>(path: &Path, entries: &[T]) -> Result<(), MemoryError> {
    let mut out = Vec::new();
    for entry in entries {
        serde_json::to_writer(&mut out, entry).expect("bank entries serialize infallibly");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, MemoryError> {
    let content = fs::read_to_string(path)?;
    Ok(content
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| (i + 1, line.to_owned()))
        .collect())
}
