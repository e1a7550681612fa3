//! Live HTTP backends: a chat-completion client, an embedding client, and a
//! date-filtered web-search client.
//!
//! All three are thin `reqwest::blocking` wrappers that map provider wire
//! formats onto the engine's backend traits. API keys travel in headers and
//! never appear in any persisted output.

use chrono::{DateTime, NaiveDate, Utc};
use serde::Deserialize;

use crate::cognition::{BackendError, CallContext, ChatBackend, ChatRequest};
use crate::embedding::{EmbedError, Embedder, EmbeddingVector};
use crate::predictor::{FetchedPage, SearchBackend, Snippet, ToolError};

const CHAT_TIMEOUT_SECS: u64 = 180;
const TOOL_TIMEOUT_SECS: u64 = 60;
/// Error bodies are truncated to this many characters in error values.
const ERROR_BODY_LIMIT: usize = 500;

fn truncate_body(body: String) -> String {
    if body.chars().count() <= ERROR_BODY_LIMIT {
        body
    } else {
        let mut s: String = body.chars().take(ERROR_BODY_LIMIT).collect();
        s.push_str("…");
        s
    }
}

fn blocking_client(timeout_secs: u64) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(timeout_secs))
        .build()
        .expect("TLS-less blocking client construction cannot fail")
}

/// Chat-completion-over-HTTP backend.
///
/// Sends `{"model", "temperature", "messages": [{"role", "content"}]}` with
/// a bearer token and consumes the first choice's message content.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: String,
}

impl HttpChatBackend {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
    ) -> Self {
        HttpChatBackend {
            client: blocking_client(CHAT_TIMEOUT_SECS),
            url: url.into(),
            model: model.into(),
            api_key: api_key.into(),
        }
    }
}

#[derive(Deserialize)]
struct ChatCompletionReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, _ctx: &CallContext, request: &ChatRequest) -> Result<String, BackendError> {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({ "role": m.role, "content": m.content }))
            .collect();
        let body = serde_json::json!({
            "model": self.model,
            "temperature": request.temperature,
            "messages": messages,
        });
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|err| BackendError::Transport(err.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|err| BackendError::Transport(err.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: truncate_body(text),
            });
        }
        let reply: ChatCompletionReply = serde_json::from_str(&text)
            .map_err(|err| BackendError::MalformedResponse(format!("chat reply: {err}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|choice| choice.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("chat reply has no choices".into()))
    }
}

/// Embedding-over-HTTP backend.
///
/// Sends `{"model", "input"}` with a bearer token, reads
/// `data[0].embedding`, and L2-normalizes it so cosine scores match the
/// deterministic embedder's scale.
pub struct HttpEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: String,
}

impl HttpEmbedder {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        api_key: impl Into<String>,
    ) -> Self {
        HttpEmbedder {
            client: blocking_client(TOOL_TIMEOUT_SECS),
            url: url.into(),
            model: model.into(),
            api_key: api_key.into(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|err| EmbedError::Backend(err.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|err| EmbedError::Backend(err.to_string()))?;
        if !status.is_success() {
            return Err(EmbedError::Backend(format!(
                "http status {}: {}",
                status.as_u16(),
                truncate_body(text)
            )));
        }
        let reply: EmbeddingReply = serde_json::from_str(&text)
            .map_err(|err| EmbedError::Backend(format!("embedding reply: {err}")))?;
        let datum = reply
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbedError::Backend("embedding reply has no data".into()))?;
        if datum.embedding.is_empty() {
            return Err(EmbedError::Backend("embedding vector is empty".into()));
        }
        EmbeddingVector(datum.embedding).normalized()
    }
}

/// Web-search-over-HTTP backend.
///
/// Posts `{"q": "<query> before:YYYY-MM-DD"}` with the key in an `X-API-KEY`
/// header and maps `organic[*].{title, link, snippet, date}` to snippets.
/// Publication dates are parsed best-effort (RFC 3339 or `YYYY-MM-DD`);
/// snippets whose date cannot be parsed carry `None` and are dropped by the
/// engine's cutoff filter rather than trusted.
pub struct LiveSearchBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
}

impl LiveSearchBackend {
    pub fn new(url: impl Into<String>, api_key: impl Into<String>) -> Self {
        LiveSearchBackend {
            client: blocking_client(TOOL_TIMEOUT_SECS),
            url: url.into(),
            api_key: api_key.into(),
        }
    }
}

/// Best-effort publication-date parsing: RFC 3339, or a bare date taken as
/// that day's midnight UTC. Anything else is unknown.
fn parse_published_at(raw: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.with_timezone(&Utc));
    }
    if let Ok(d) = NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Some(DateTime::from_naive_utc_and_offset(
            d.and_hms_opt(0, 0, 0)?,
            Utc,
        ));
    }
    None
}

#[derive(Deserialize)]
struct SearchReply {
    #[serde(default)]
    organic: Vec<SearchOrganic>,
}

#[derive(Deserialize)]
struct SearchOrganic {
    #[serde(default)]
    title: String,
    #[serde(default)]
    link: String,
    #[serde(default)]
    snippet: String,
    #[serde(default)]
    date: Option<String>,
}

impl SearchBackend for LiveSearchBackend {
    fn search(&self, query: &str, cutoff: DateTime<Utc>) -> Result<Vec<Snippet>, ToolError> {
        // The date filter rides inside the query string; the engine-side
        // wrapper still re-checks every snippet's parsed date.
        let dated_query = format!("{query} before:{}", cutoff.format("%Y-%m-%d"));
        let body = serde_json::json!({ "q": dated_query });
        let response = self
            .client
            .post(&self.url)
            .header("X-API-KEY", &self.api_key)
            .json(&body)
            .send()
            .map_err(|err| ToolError::Backend(err.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|err| ToolError::Backend(err.to_string()))?;
        if !status.is_success() {
            return Err(ToolError::Backend(format!(
                "http status {}: {}",
                status.as_u16(),
                truncate_body(text)
            )));
        }
        let reply: SearchReply = serde_json::from_str(&text)
            .map_err(|err| ToolError::Backend(format!("search reply: {err}")))?;
        Ok(reply
            .organic
            .into_iter()
            .map(|o| Snippet {
                title: o.title,
                url: o.link,
                text: o.snippet,
                published_at: o.date.as_deref().and_then(parse_published_at),
            })
            .collect())
    }

    fn fetch(&self, url: &str) -> Result<FetchedPage, ToolError> {
        let response = self
            .client
            .get(url)
            .send()
            .map_err(|err| ToolError::Backend(err.to_string()))?;
        let status = response.status();
        if status.as_u16() == 404 {
            return Err(ToolError::NotFound(url.to_owned()));
        }
        let text = response
            .text()
            .map_err(|err| ToolError::Backend(err.to_string()))?;
        if !status.is_success() {
            return Err(ToolError::Backend(format!(
                "http status {}: {}",
                status.as_u16(),
                truncate_body(text)
            )));
        }
        // Live pages carry no trustworthy machine-readable date; the page
        // is returned undated and the caller's cutoff policy applies.
        Ok(FetchedPage {
            text,
            published_at: None,
        })
    }
}
