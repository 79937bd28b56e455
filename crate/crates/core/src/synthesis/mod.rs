//! Dual-agent consensus synthesis.
//!
//! For each page a random interactive element is picked, a generator model
//! writes an instruction for it under one of three task types, and a verifier
//! model, shown only the page and the instruction, tries to find the element
//! again. A sample is kept when the verifier picks the same element or one
//! whose DOM path overlaps the target's by more than a threshold.

mod endpoint;
pub mod prompts;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use endpoint::{
    build_backends, ChatBackend, ChatEndpoint, ChatMessage, EndpointError, HttpChatClient,
    MockBehavior, MockGenerator, MockLedger, MockVerifier, Role,
};

use crate::action::Action;
use crate::dom::{parse_html, DomError, DomPath, DomTree, NodeId};
use crate::instance::{InstanceKind, InstanceMetadata, TrainingInstance};
use crate::parallel::for_each_ordered;
use crate::preprocess::{
    clean_tree, element_html, extract_interactive, observation_html, CleanConfig,
    FormattedObservation, SYSTEM_PROMPT,
};
use prompts::UnparseableResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    NavigationIntent,
    InformationRetrieval,
    ReasoningQuestion,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [
        TaskType::NavigationIntent,
        TaskType::InformationRetrieval,
        TaskType::ReasoningQuestion,
    ];

    pub fn sample(rng: &mut impl Rng) -> TaskType {
        TaskType::ALL[rng.random_range(0..TaskType::ALL.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ExactMatch,
    PathOverlap,
    Rejected,
    VerifierNone,
}

impl Verdict {
    pub fn is_retained(self) -> bool {
        matches!(self, Verdict::ExactMatch | Verdict::PathOverlap)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::ExactMatch => "exact_match",
            Verdict::PathOverlap => "path_overlap",
            Verdict::Rejected => "rejected",
            Verdict::VerifierNone => "verifier_none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisRecord {
    pub page_id: String,
    /// Cleaned page with injected ids, exactly as shown to both models.
    pub html: String,
    pub instruction: String,
    pub target_id: NodeId,
    pub task_type: TaskType,
    pub verifier_id: Option<NodeId>,
    pub verdict: Verdict,
}

impl SynthesisRecord {
    pub fn to_training_instance(&self, index: usize) -> TrainingInstance {
        TrainingInstance {
            instance_id: format!("{}:syn:{index}", self.page_id),
            observation: FormattedObservation {
                system_text: SYSTEM_PROMPT.to_string(),
                html_text: self.html.clone(),
                history_lines: Vec::new(),
                instruction: self.instruction.clone(),
            },
            instruction: self.instruction.clone(),
            history: Vec::new(),
            label: Action::Click { element_id: self.target_id },
            kind: InstanceKind::Synthetic,
            metadata: InstanceMetadata {
                task_type: Some(self.task_type),
                verdict: Some(self.verdict),
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("page has no interactive element")]
    NoInteractive,
    #[error(transparent)]
    Endpoint(#[from] EndpointError),
    #[error("generated instruction is empty or longer than {max} characters")]
    InvalidGeneration { max: usize },
    #[error(transparent)]
    Unparseable(#[from] UnparseableResponse),
    #[error(transparent)]
    Dom(#[from] DomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub generator: ChatEndpoint,
    pub verifier: ChatEndpoint,
    /// Path overlap must be strictly greater than this to count as agreement.
    pub threshold: f64,
    pub seed: u64,
    pub instructions_per_page: usize,
    pub max_instruction_chars: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            generator: ChatEndpoint::default(),
            verifier: ChatEndpoint {
                temperature: 0.0,
                ..ChatEndpoint::default()
            },
            threshold: 0.9,
            seed: 0,
            instructions_per_page: 1,
            max_instruction_chars: 512,
        }
    }
}

/// Uniform choice among the interactive elements.
pub fn select_candidate(page: &DomTree, clean: &CleanConfig, rng: &mut impl Rng) -> Option<NodeId> {
    let elements = extract_interactive(page, clean);
    (!elements.is_empty()).then(|| elements[rng.random_range(0..elements.len())])
}

/// Asks the generator for an instruction targeting `target`.
pub fn generate_candidate(
    page: &DomTree,
    target: NodeId,
    task_type: TaskType,
    backend: &dyn ChatBackend,
    endpoint: &ChatEndpoint,
    clean: &CleanConfig,
    max_chars: usize,
) -> Result<(String, NodeId), SynthesisError> {
    page.node(target)?;
    let html = observation_html(page, clean);
    let target_html = element_html(page, target, clean);
    let messages = [
        ChatMessage::system(prompts::GENERATOR_SYSTEM),
        ChatMessage::user(prompts::generator_prompt(task_type, &html, &target_html)),
    ];
    let reply = backend.complete(&messages, endpoint.temperature)?;
    let instruction = clean_generation(&reply);
    if instruction.is_empty() || instruction.chars().count() > max_chars {
        return Err(SynthesisError::InvalidGeneration { max: max_chars });
    }
    Ok((instruction, target))
}

fn clean_generation(reply: &str) -> String {
    let line = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line
        .strip_prefix("Example Output:")
        .or_else(|| line.strip_prefix("Instruction:"))
        .unwrap_or(line)
        .trim();
    line.strip_prefix('"')
        .and_then(|l| l.strip_suffix('"'))
        .unwrap_or(line)
        .trim()
        .to_string()
}

/// The exact messages sent to the verifier: page and instruction only.
pub fn verifier_messages(html: &str, instruction: &str) -> [ChatMessage; 2] {
    [
        ChatMessage::system(prompts::VERIFIER_SYSTEM),
        ChatMessage::user(prompts::verifier_prompt(html, instruction)),
    ]
}

pub fn verify_candidate(
    html: &str,
    instruction: &str,
    backend: &dyn ChatBackend,
    endpoint: &ChatEndpoint,
) -> Result<Option<NodeId>, SynthesisError> {
    let reply = backend.complete(&verifier_messages(html, instruction), endpoint.temperature)?;
    Ok(prompts::parse_verifier_response(&reply)?)
}

/// Longest common prefix of the two paths over the longer path's length.
pub fn path_overlap(a: &DomPath, b: &DomPath) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    let common = a
        .steps
        .iter()
        .zip(&b.steps)
        .take_while(|(x, y)| x == y)
        .count();
    common as f64 / longest as f64
}

/// Sets the verdict from the generator target and the verifier answer.
pub fn consensus_filter(mut record: SynthesisRecord, tree: &DomTree, threshold: f64) -> SynthesisRecord {
    record.verdict = match record.verifier_id {
        None => Verdict::VerifierNone,
        Some(id) if id == record.target_id => Verdict::ExactMatch,
        Some(id) => match (tree.node_path(id), tree.node_path(record.target_id)) {
            (Ok(pred), Ok(cand)) if path_overlap(&pred, &cand) > threshold => Verdict::PathOverlap,
            _ => Verdict::Rejected,
        },
    };
    record
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisStats {
    pub pages: u64,
    pub pages_skipped: u64,
    pub invalid_generations: u64,
    pub endpoint_errors: u64,
    pub unparseable_responses: u64,
    /// Candidates that reached the verifier.
    pub verified: u64,
    pub retained: u64,
    /// `retained / verified`.
    pub pass_rate: f64,
    pub verdicts: BTreeMap<Verdict, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageInput {
    pub page_id: String,
    pub html: String,
}

#[derive(Debug, Default)]
struct PageOutcome {
    skipped: bool,
    invalid_generations: u64,
    endpoint_errors: u64,
    unparseable: u64,
    records: Vec<SynthesisRecord>,
}

fn synthesize_page(
    index: usize,
    page: &PageInput,
    generator: &dyn ChatBackend,
    verifier: &dyn ChatBackend,
    config: &SynthesisConfig,
    clean: &CleanConfig,
) -> PageOutcome {
    let mut outcome = PageOutcome::default();
    let tree = match parse_html(&page.html)
        .map_err(|e| e.to_string())
        .and_then(|t| clean_tree(&t, clean).map_err(|e| e.to_string()))
    {
        Ok(tree) => tree,
        Err(err) => {
            tracing::warn!(page = %page.page_id, %err, "skipping page");
            outcome.skipped = true;
            return outcome;
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let html = observation_html(&tree, clean);

    for _ in 0..config.instructions_per_page {
        let Some(target) = select_candidate(&tree, clean, &mut rng) else {
            outcome.skipped = true;
            return outcome;
        };
        let task_type = TaskType::sample(&mut rng);
        let instruction = match generate_candidate(
            &tree,
            target,
            task_type,
            generator,
            &config.generator,
            clean,
            config.max_instruction_chars,
        ) {
            Ok((instruction, _)) => instruction,
            Err(SynthesisError::InvalidGeneration { .. }) => {
                outcome.invalid_generations += 1;
                continue;
            }
            Err(err) => {
                tracing::warn!(page = %page.page_id, %err, "generator failed");
                outcome.endpoint_errors += 1;
                continue;
            }
        };
        let mut record = SynthesisRecord {
            page_id: page.page_id.clone(),
            html: html.clone(),
            instruction,
            target_id: target,
            task_type,
            verifier_id: None,
            verdict: Verdict::Rejected,
        };
        match verify_candidate(&html, &record.instruction, verifier, &config.verifier) {
            Ok(predicted) => {
                record.verifier_id = predicted;
                record = consensus_filter(record, &tree, config.threshold);
            }
            Err(SynthesisError::Unparseable(_)) => outcome.unparseable += 1,
            Err(err) => {
                tracing::warn!(page = %page.page_id, %err, "verifier failed");
                outcome.endpoint_errors += 1;
                continue;
            }
        }
        outcome.records.push(record);
    }
    outcome
}

/// Runs the consensus pipeline over `pages` on `pool`, handing retained
/// records to `sink` in input order.
pub fn run_synthesis<I, S, E>(
    pages: I,
    generator: &dyn ChatBackend,
    verifier: &dyn ChatBackend,
    config: &SynthesisConfig,
    clean: &CleanConfig,
    pool: &rayon::ThreadPool,
    mut sink: S,
) -> Result<SynthesisStats, E>
where
    I: Iterator<Item = PageInput>,
    S: FnMut(SynthesisRecord) -> Result<(), E>,
{
    let mut stats = SynthesisStats::default();
    for_each_ordered(
        pages,
        pool,
        |index, page| synthesize_page(index, &page, generator, verifier, config, clean),
        |outcome| {
            stats.pages += 1;
            stats.pages_skipped += u64::from(outcome.skipped);
            stats.invalid_generations += outcome.invalid_generations;
            stats.endpoint_errors += outcome.endpoint_errors;
            stats.unparseable_responses += outcome.unparseable;
            for record in outcome.records {
                stats.verified += 1;
                *stats.verdicts.entry(record.verdict).or_default() += 1;
                if record.verdict.is_retained() {
                    stats.retained += 1;
                    sink(record)?;
                }
            }
            Ok(())
        },
    )?;
    stats.pass_rate = if stats.verified == 0 {
        0.0
    } else {
        stats.retained as f64 / stats.verified as f64
    };
    Ok(stats)
}
