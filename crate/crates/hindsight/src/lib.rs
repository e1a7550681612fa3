//! An online, self-evolving experience memory for agents forecasting a stream
//! of tasks (e.g. weekly prediction-market questions).
//!
//! The engine runs a four-stage loop per batch of tasks:
//!
//! 1. **Retrieve** — weighted cosine retrieval of past experiences relevant to
//!    the task ([`memory`]).
//! 2. **Compile** — an LLM turns the retrieved experiences into a
//!    task-specific guideline under a meta-guideline ([`cognition`]).
//! 3. **Act** — the forecasting agent answers the task twice, with and
//!    without the guideline ([`predictor`]).
//! 4. **Update** — the score difference (gain) between the two runs is added
//!    to each retrieved experience's weight; failures trigger reflection and
//!    the batch's worst cases are distilled into new candidate experiences
//!    that must prove themselves before being committed ([`evolution`]).
//!
//! Supporting modules: [`embedding`] (deterministic token-hash embedder plus
//! a pluggable trait), [`metrics`] (Brier score, market return, portfolio
//! accounting), [`stream`] (task-stream format and a synthetic drift
//! generator), [`live`] (HTTP chat/embedding/search backends), and
//! [`runner`] (end-to-end orchestration and persistence).

pub mod cognition;
pub mod embedding;
pub mod evolution;
pub mod live;
pub mod memory;
pub mod metrics;
pub mod predictor;
pub mod runner;
pub mod stream;
