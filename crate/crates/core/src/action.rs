//! Agent actions and their textual answer format.
//!
//! The answer format is the assistant turn of the model prompt:
//!
//! ```text
//! Element: 42
//! Operation: Type "iPhone 13"
//! ```
//!
//! A rejection is written `Element: None` / `Operation: None`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Click,
    Type,
    Select,
    None,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Click => "Click",
            ActionKind::Type => "Type",
            ActionKind::Select => "Select",
            ActionKind::None => "None",
        })
    }
}

/// What the agent does on one step.
///
/// Serialized flat as `{"kind": "type", "element_id": 42, "argument": "Apple"}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "ActionRepr")]
pub enum Action {
    Click {
        element_id: NodeId,
    },
    Type {
        element_id: NodeId,
        argument: String,
    },
    Select {
        element_id: NodeId,
        argument: String,
    },
    /// The target is absent or the request cannot be carried out.
    None,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionRepr {
    kind: ActionKind,
    element_id: Option<NodeId>,
    argument: Option<String>,
}

impl TryFrom<ActionRepr> for Action {
    type Error = String;

    fn try_from(repr: ActionRepr) -> Result<Self, Self::Error> {
        match (repr.kind, repr.element_id, repr.argument) {
            (ActionKind::Click, Some(element_id), None) => Ok(Action::Click { element_id }),
            (ActionKind::Type, Some(element_id), Some(argument)) => Ok(Action::Type { element_id, argument }),
            (ActionKind::Select, Some(element_id), Some(argument)) => Ok(Action::Select { element_id, argument }),
            (ActionKind::None, None, None) => Ok(Action::None),
            (kind, element_id, argument) => Err(format!(
                "{kind} action with element_id {} and argument {}",
                if element_id.is_some() { "present" } else { "absent" },
                if argument.is_some() { "present" } else { "absent" },
            )),
        }
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Click { .. } => ActionKind::Click,
            Action::Type { .. } => ActionKind::Type,
            Action::Select { .. } => ActionKind::Select,
            Action::None => ActionKind::None,
        }
    }

    pub fn element_id(&self) -> Option<NodeId> {
        match self {
            Action::Click { element_id }
            | Action::Type { element_id, .. }
            | Action::Select { element_id, .. } => Some(*element_id),
            Action::None => None,
        }
    }

    pub fn argument(&self) -> Option<&str> {
        match self {
            Action::Type { argument, .. } | Action::Select { argument, .. } => Some(argument),
            _ => None,
        }
    }

    /// Returns the same action pointing at another element. `None` stays `None`.
    pub fn retarget(&self, element_id: NodeId) -> Action {
        match self {
            Action::Click { .. } => Action::Click { element_id },
            Action::Type { argument, .. } => Action::Type {
                element_id,
                argument: argument.clone(),
            },
            Action::Select { argument, .. } => Action::Select {
                element_id,
                argument: argument.clone(),
            },
            Action::None => Action::None,
        }
    }

    /// Same element and same operation kind; arguments are not compared.
    pub fn grounds_like(&self, other: &Action) -> bool {
        self.element_id() == other.element_id() && self.kind() == other.kind()
    }

    /// One line of the "Previous Actions" block, without the number prefix.
    pub fn history_line(&self) -> String {
        match self {
            Action::Click { element_id } => format!("Click element [{element_id}]"),
            Action::Type {
                element_id,
                argument,
            } => format!("Type \"{argument}\" into element [{element_id}]"),
            Action::Select {
                element_id,
                argument,
            } => format!("Select \"{argument}\" in element [{element_id}]"),
            Action::None => "No action".to_string(),
        }
    }

    /// Renders the assistant answer text.
    pub fn to_output_text(&self) -> String {
        let element = self
            .element_id()
            .map_or_else(|| "None".to_string(), |id| id.to_string());
        match self.argument() {
            Some(arg) => format!("Element: {element}\nOperation: {} \"{arg}\"", self.kind()),
            None => format!("Element: {element}\nOperation: {}", self.kind()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OutputFormatError {
    #[error("missing `Element:` field")]
    MissingElement,
    #[error("missing `Operation:` field")]
    MissingOperation,
    #[error("invalid element id `{0}`")]
    InvalidElement(String),
    #[error("unknown operation `{0}`")]
    UnknownOperation(String),
    #[error("{0} requires a quoted argument")]
    MissingArgument(ActionKind),
    #[error("{0} does not take an argument")]
    UnexpectedArgument(ActionKind),
    #[error("element and operation disagree on rejection")]
    InconsistentRejection,
}

/// Parses an answer in the format produced by [`Action::to_output_text`].
///
/// Field names and operation names are case-insensitive; surrounding lines
/// (reasoning, chat markers) are ignored. The first occurrence of each field
/// wins.
pub fn parse_action_output(raw: &str) -> Result<Action, OutputFormatError> {
    let mut element = None;
    let mut operation = None;
    for line in raw.lines() {
        let line = line.trim().trim_start_matches("**");
        if let Some(rest) = strip_field(line, "element") {
            element.get_or_insert(rest);
        } else if let Some(rest) = strip_field(line, "operation") {
            operation.get_or_insert(rest);
        }
    }
    let element = element.ok_or(OutputFormatError::MissingElement)?;
    let operation = operation.ok_or(OutputFormatError::MissingOperation)?;

    let element_id = if element.eq_ignore_ascii_case("none") {
        None
    } else {
        let digits = element.trim_start_matches('[').trim_end_matches(']');
        Some(NodeId(digits.parse().map_err(|_| {
            OutputFormatError::InvalidElement(element.to_string())
        })?))
    };

    let (op_word, rest) = match operation.split_once(char::is_whitespace) {
        Some((word, rest)) => (word, rest.trim()),
        None => (operation, ""),
    };
    let kind = match op_word.to_ascii_lowercase().as_str() {
        "click" => ActionKind::Click,
        "type" => ActionKind::Type,
        "select" => ActionKind::Select,
        "none" => ActionKind::None,
        _ => return Err(OutputFormatError::UnknownOperation(op_word.to_string())),
    };
    let argument = if rest.is_empty() {
        None
    } else {
        let unquoted = rest
            .strip_prefix('"')
            .and_then(|r| r.strip_suffix('"'))
            .unwrap_or(rest);
        Some(unquoted.to_string())
    };

    match (kind, element_id, argument) {
        (ActionKind::None, None, None) => Ok(Action::None),
        (ActionKind::None, _, Some(_)) => Err(OutputFormatError::UnexpectedArgument(kind)),
        (ActionKind::None, Some(_), _) | (_, None, _) => {
            Err(OutputFormatError::InconsistentRejection)
        }
        (ActionKind::Click, Some(element_id), None) => Ok(Action::Click { element_id }),
        (ActionKind::Click, Some(_), Some(_)) => Err(OutputFormatError::UnexpectedArgument(kind)),
        (ActionKind::Type, Some(element_id), Some(argument)) => Ok(Action::Type {
            element_id,
            argument,
        }),
        (ActionKind::Select, Some(element_id), Some(argument)) => Ok(Action::Select {
            element_id,
            argument,
        }),
        (_, Some(_), None) => Err(OutputFormatError::MissingArgument(kind)),
    }
}

fn strip_field<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let (key, value) = line.split_once(':')?;
    let key = key.trim().trim_end_matches("**").trim();
    key.eq_ignore_ascii_case(name)
        .then(|| value.trim().trim_start_matches("**").trim())
}
