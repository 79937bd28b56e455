//! Generator and verifier prompt templates.

use crate::dom::NodeId;

use super::TaskType;

pub const GENERATOR_SYSTEM: &str =
    "You are an expert web user specializing in creating realistic user interactions.";

pub const VERIFIER_SYSTEM: &str = "You are a precise web navigation assistant. Your goal is to identify \
the exact HTML element that matches the user's instruction.";

const VERIFIER_CONSTRAINT: &str = "Analyze the HTML structure carefully. Return the backend_node_id of \
the element that best satisfies the instruction. If the instruction is ambiguous or the element is \
missing, output \"None\".";

const HTML_HEADER: &str = "HTML Snippet:\n";
const TARGET_HEADER: &str = "\n\nTarget Element:\n";
const TASK_HEADER: &str = "\n\nTask: ";
const PAGE_HEADER: &str = "Webpage HTML:\n";
const INSTRUCTION_HEADER: &str = "\n\nUser Instruction:\n\"";
const INSTRUCTION_FOOTER: &str = "\"\n\n";

impl TaskType {
    pub fn title(self) -> &'static str {
        match self {
            TaskType::NavigationIntent => "Navigation Intent",
            TaskType::InformationRetrieval => "Information Retrieval",
            TaskType::ReasoningQuestion => "Reasoning Question",
        }
    }

    fn guidance(self) -> &'static str {
        match self {
            TaskType::NavigationIntent => "Generate a short, imperative command that directly operates on \
the target element. The command should be clear and action-oriented.\n\
Example Output: \"Click the 'Sign Up' button at the top right.\"",
            TaskType::InformationRetrieval => "Generate a query that asks for specific information contained \
within the target element. The user is looking for content, not performing an action.\n\
Example Output: \"What is the price of the Sony WH-1000XM4 headphones?\"",
            TaskType::ReasoningQuestion => "Generate a complex instruction that requires logical deduction or \
comparison with sibling elements to identify the target. Do not explicitly mention unique attributes \
(like IDs); describe the element by its relationship or condition.\n\
Example Output: \"Select the flight that has the shortest duration among the options.\"",
        }
    }

    fn from_title(title: &str) -> Option<TaskType> {
        TaskType::ALL.into_iter().find(|t| t.title() == title)
    }
}

/// User turn for the generator: page, target element, task-type guidance.
pub fn generator_prompt(task_type: TaskType, html: &str, target_html: &str) -> String {
    format!(
        "{HTML_HEADER}{html}{TARGET_HEADER}{target_html}{TASK_HEADER}{}\n{}\n\nRespond with the instruction only.",
        task_type.title(),
        task_type.guidance()
    )
}

/// User turn for the verifier. Contains only the page and the instruction.
pub fn verifier_prompt(html: &str, instruction: &str) -> String {
    format!(
        "{PAGE_HEADER}{html}{INSTRUCTION_HEADER}{instruction}{INSTRUCTION_FOOTER}{VERIFIER_CONSTRAINT}\n\n\
Response Format:\nThought: <Let's think step by step...>\nTarget ID: <ID>"
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorPromptParts {
    pub html: String,
    pub target_html: String,
    pub task_type: TaskType,
}

pub fn parse_generator_prompt(prompt: &str) -> Option<GeneratorPromptParts> {
    let body = prompt.strip_prefix(HTML_HEADER)?;
    let target_at = body.rfind(TARGET_HEADER)?;
    let task_at = body.rfind(TASK_HEADER)?;
    if task_at < target_at {
        return None;
    }
    let title = body[task_at + TASK_HEADER.len()..].lines().next()?;
    Some(GeneratorPromptParts {
        html: body[..target_at].to_string(),
        target_html: body[target_at + TARGET_HEADER.len()..task_at].to_string(),
        task_type: TaskType::from_title(title)?,
    })
}

/// Returns `(html, instruction)`.
pub fn parse_verifier_prompt(prompt: &str) -> Option<(String, String)> {
    let body = prompt.strip_prefix(PAGE_HEADER)?;
    let instr_at = body.rfind(INSTRUCTION_HEADER)?;
    let rest = &body[instr_at + INSTRUCTION_HEADER.len()..];
    let end = rest.rfind(INSTRUCTION_FOOTER)?;
    Some((body[..instr_at].to_string(), rest[..end].to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("verifier response has no usable `Target ID:` line")]
pub struct UnparseableResponse;

/// Reads the last `Target ID:` line. `Ok(None)` means the verifier declined.
pub fn parse_verifier_response(response: &str) -> Result<Option<NodeId>, UnparseableResponse> {
    let value = response
        .lines()
        .rev()
        .find_map(|line| {
            let line = line.trim().trim_matches('*').trim();
            let (key, value) = line.split_once(':')?;
            let key = key.trim().trim_matches('*').trim();
            key.eq_ignore_ascii_case("target id").then_some(value)
        })
        .ok_or(UnparseableResponse)?;
    let value = value
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '`' | '"' | '\'' | '[' | ']' | '<' | '>' | '.'));
    if value.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    value.parse().map(|n| Some(NodeId(n))).map_err(|_| UnparseableResponse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_prompt_round_trips() {
        let html = "<div>\n<button id=\"1\">Sign Up</button></div>";
        let target = "<button id=\"1\">Sign Up</button>";
        for task_type in TaskType::ALL {
            let prompt = generator_prompt(task_type, html, target);
            let parts = parse_generator_prompt(&prompt).unwrap();
            assert_eq!(parts.html, html);
            assert_eq!(parts.target_html, target);
            assert_eq!(parts.task_type, task_type);
        }
        assert!(generator_prompt(TaskType::NavigationIntent, html, target).contains("Sign Up' button at the top right"));
    }

    #[test]
    fn verifier_prompt_round_trips() {
        let prompt = verifier_prompt("<a id=\"3\">x</a>", "Click \"x\" now");
        assert_eq!(
            parse_verifier_prompt(&prompt),
            Some(("<a id=\"3\">x</a>".to_string(), "Click \"x\" now".to_string()))
        );
        assert!(prompt.contains("output \"None\""));
        assert!(prompt.ends_with("Target ID: <ID>"));
    }

    #[test]
    fn verifier_responses() {
        assert_eq!(parse_verifier_response("Thought: it is 7\nTarget ID: 7"), Ok(Some(NodeId(7))));
        assert_eq!(parse_verifier_response("**Target ID:** `12`"), Ok(Some(NodeId(12))));
        assert_eq!(parse_verifier_response("target id: [3]"), Ok(Some(NodeId(3))));
        assert_eq!(parse_verifier_response("Thought: missing\nTarget ID: None"), Ok(None));
        assert_eq!(parse_verifier_response("Target ID: \"None\""), Ok(None));
        assert_eq!(parse_verifier_response("I think element 7"), Err(UnparseableResponse));
        assert_eq!(parse_verifier_response("Target ID: the button"), Err(UnparseableResponse));
    }
}
