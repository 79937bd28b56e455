//! Chat-completion endpoints.
//!
//! [`HttpChatClient`] speaks the common `POST {base_url}/chat/completions`
//! protocol with exponential backoff. The mock backends are deterministic and
//! exist so the synthesis pipeline can run without a model server.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{parse_html, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
}

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<EndpointError> },
}

impl EndpointError {
    fn is_retryable(&self) -> bool {
        match self {
            EndpointError::Status { status, .. } => *status == 429 || *status >= 500,
            EndpointError::Transport(_) => true,
            _ => false,
        }
    }
}

/// Something that turns a message list into an assistant reply.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, EndpointError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&[ChatMessage]) -> Result<String, EndpointError> + Send + Sync,
{
    fn complete(&self, messages: &[ChatMessage], _temperature: f64) -> Result<String, EndpointError> {
        self(messages)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockBehavior {
    /// Generator: template instructions. Verifier: answers the generator's target.
    Echo,
    /// Verifier always answers `Target ID: None`.
    None,
    /// Replies without a `Target ID` line.
    Garbage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatEndpoint {
    /// Either an HTTP(S) base URL or `mock`.
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub backoff_base_ms: u64,
    pub mock: MockBehavior,
}

impl Default for ChatEndpoint {
    fn default() -> Self {
        ChatEndpoint {
            base_url: "mock".into(),
            model_name: "mock".into(),
            api_key_env: None,
            temperature: 1.0,
            max_retries: 3,
            timeout_secs: 120.0,
            backoff_base_ms: 500,
            mock: MockBehavior::Echo,
        }
    }
}

impl ChatEndpoint {
    pub fn is_mock(&self) -> bool {
        self.base_url == "mock"
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(60_000))
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

pub struct HttpChatClient {
    endpoint: ChatEndpoint,
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(endpoint: ChatEndpoint) -> Self {
        let base = endpoint.base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let api_key = endpoint
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatClient { endpoint, url, api_key, agent }
    }

    fn attempt(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, EndpointError> {
        let mut request = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(CompletionRequest {
                model: &self.endpoint.model_name,
                messages,
                temperature,
            })
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(EndpointError::Status { status, body });
        }
        let parsed: CompletionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| EndpointError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| EndpointError::Malformed("no choices".into()))
    }
}

impl ChatBackend for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage], temperature: f64) -> Result<String, EndpointError> {
        let mut attempt = 0;
        loop {
            match self.attempt(messages, temperature) {
                Ok(content) => return Ok(content),
                Err(err) if err.is_retryable() && attempt < self.endpoint.max_retries => {
                    tracing::warn!(attempt, error = %err, "retrying chat completion");
                    thread::sleep(self.endpoint.backoff(attempt));
                    attempt += 1;
                }
                Err(err) if attempt > 0 => {
                    return Err(EndpointError::Exhausted { attempts: attempt + 1, last: Box::new(err) })
                }
                Err(err) => return Err(err),
            }
        }
    }
}

/// Targets chosen by the mock generator, keyed by page and instruction, so the
/// echo verifier can agree without that information entering its prompt.
#[derive(Debug, Default, Clone)]
pub struct MockLedger(Arc<Mutex<HashMap<(String, String), NodeId>>>);

impl MockLedger {
    fn record(&self, html: &str, instruction: &str, target: NodeId) {
        self.0
            .lock()
            .expect("ledger lock")
            .insert((html.to_string(), instruction.to_string()), target);
    }

    fn lookup(&self, html: &str, instruction: &str) -> Option<NodeId> {
        self.0
            .lock()
            .expect("ledger lock")
            .get(&(html.to_string(), instruction.to_string()))
            .copied()
    }
}

/// Writes template instructions describing the target element.
pub struct MockGenerator {
    ledger: MockLedger,
}

impl MockGenerator {
    pub fn new(ledger: MockLedger) -> Self {
        MockGenerator { ledger }
    }
}

impl ChatBackend for MockGenerator {
    fn complete(&self, messages: &[ChatMessage], _temperature: f64) -> Result<String, EndpointError> {
        let prompt = last_user(messages)?;
        let parts = super::prompts::parse_generator_prompt(prompt)
            .ok_or_else(|| EndpointError::Malformed("not a generator prompt".into()))?;
        let target = parse_html(&parts.target_html)
            .map_err(|e| EndpointError::Malformed(e.to_string()))?;
        let node = target.root();
        let id = node
            .attr("id")
            .and_then(|v| v.parse().ok())
            .map(NodeId)
            .ok_or_else(|| EndpointError::Malformed("target element has no id".into()))?;
        let label = ["aria-label", "placeholder", "value", "name"]
            .iter()
            .find_map(|a| node.attr(a))
            .map(str::to_string)
            .or_else(|| target.nodes().find_map(|n| n.text.clone()))
            .unwrap_or_else(|| node.tag.clone());
        let noun = match node.tag.as_str() {
            "a" => "link",
            "input" | "textarea" => "field",
            "select" => "dropdown",
            _ => "button",
        };
        let instruction = match parts.task_type {
            super::TaskType::NavigationIntent => format!("Click the '{label}' {noun}."),
            super::TaskType::InformationRetrieval => format!("What does the '{label}' {noun} say?"),
            super::TaskType::ReasoningQuestion => format!("Which {noun} labelled '{label}' should I use?"),
        };
        self.ledger.record(&parts.html, &instruction, id);
        Ok(instruction)
    }
}

/// Verifier double with a fixed answering policy.
pub struct MockVerifier {
    behavior: MockBehavior,
    ledger: MockLedger,
}

impl MockVerifier {
    pub fn new(behavior: MockBehavior, ledger: MockLedger) -> Self {
        MockVerifier { behavior, ledger }
    }
}

impl ChatBackend for MockVerifier {
    fn complete(&self, messages: &[ChatMessage], _temperature: f64) -> Result<String, EndpointError> {
        let prompt = last_user(messages)?;
        match self.behavior {
            MockBehavior::Echo => {
                let (html, instruction) = super::prompts::parse_verifier_prompt(prompt)
                    .ok_or_else(|| EndpointError::Malformed("not a verifier prompt".into()))?;
                Ok(match self.ledger.lookup(&html, &instruction) {
                    Some(id) => format!("Thought: the instruction names this element.\nTarget ID: {id}"),
                    None => "Thought: nothing matches.\nTarget ID: None".to_string(),
                })
            }
            MockBehavior::None => Ok("Thought: the instruction is ambiguous.\nTarget ID: None".into()),
            MockBehavior::Garbage => Ok("I am not sure what you mean.".into()),
        }
    }
}

fn last_user(messages: &[ChatMessage]) -> Result<&str, EndpointError> {
    messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .ok_or_else(|| EndpointError::Malformed("no user message".into()))
}

/// Builds the generator and verifier backends. Mock endpoints share one ledger.
pub fn build_backends(
    generator: &ChatEndpoint,
    verifier: &ChatEndpoint,
) -> (Box<dyn ChatBackend>, Box<dyn ChatBackend>) {
    let ledger = MockLedger::default();
    let gen: Box<dyn ChatBackend> = if generator.is_mock() {
        Box::new(MockGenerator::new(ledger.clone()))
    } else {
        Box::new(HttpChatClient::new(generator.clone()))
    };
    let ver: Box<dyn ChatBackend> = if verifier.is_mock() {
        Box::new(MockVerifier::new(verifier.mock, ledger))
    } else {
        Box::new(HttpChatClient::new(verifier.clone()))
    };
    (gen, ver)
}
