//! Prompt sets and conversation assembly.
//!
//! A conversation is the five fixed prompts (each followed by an
//! acknowledgement), as many whole past exchanges as fit the token budget
//! (newest kept first), the instantiated query, and any pending turns of the
//! current exchange.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{serialize_environment, Environment};

pub const ACKNOWLEDGEMENT: &str = "Waiting for next input.";
pub const DEFAULT_BUDGET: usize = 4096;
pub const ENVIRONMENT_PLACEHOLDER: &str = "[ENVIRONMENT]";
pub const INSTRUCTION_PLACEHOLDER: &str = "[INSTRUCTION]";

/// File stems in load order.
pub const PROMPT_FILES: [&str; 6] = ["role", "actions", "environment", "output_format", "examples", "query_template"];

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptError {
    #[error("prompt file `{0}.txt` is missing")]
    MissingFile(String),
    #[error("cannot read `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("prompt `{0}` is empty")]
    EmptyPrompt(String),
    #[error("query template must contain {placeholder} exactly once (found {count})")]
    PlaceholderError { placeholder: String, count: usize },
    #[error("fixed prompts and query need {required} tokens but the budget is {budget}")]
    BudgetTooSmall { required: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub role: String,
    pub actions: String,
    pub environment: String,
    pub output_format: String,
    pub examples: String,
    pub query_template: String,
}

/// Drops leading `%%` provenance lines and trailing whitespace.
fn clean(text: &str) -> String {
    let mut rest = text;
    while rest.starts_with("%%") {
        rest = rest.split_once('\n').map_or("", |(_, r)| r);
    }
    rest.trim_end().to_string()
}

impl PromptSet {
    /// Builds a set from raw file contents in [`PROMPT_FILES`] order.
    pub fn from_texts(texts: [&str; 6]) -> Result<Self, PromptError> {
        let [role, actions, environment, output_format, examples, query_template] = texts.map(clean);
        let set = PromptSet {
            role,
            actions,
            environment,
            output_format,
            examples,
            query_template,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, text) in PROMPT_FILES.iter().zip(self.texts()) {
            if text.trim().is_empty() {
                return Err(PromptError::EmptyPrompt(name.to_string()));
            }
        }
        for placeholder in [ENVIRONMENT_PLACEHOLDER, INSTRUCTION_PLACEHOLDER] {
            let count = self.query_template.matches(placeholder).count();
            if count != 1 {
                return Err(PromptError::PlaceholderError {
                    placeholder: placeholder.to_string(),
                    count,
                });
            }
        }
        Ok(())
    }

    fn texts(&self) -> [&str; 6] {
        [
            &self.role,
            &self.actions,
            &self.environment,
            &self.output_format,
            &self.examples,
            &self.query_template,
        ]
    }

    /// The five prompts sent before every query.
    pub fn fixed_prompts(&self) -> [&str; 5] {
        [&self.role, &self.actions, &self.environment, &self.output_format, &self.examples]
    }

    pub fn bundled(name: &str) -> Option<PromptSet> {
        let texts = match name {
            "lfo" => [
                include_str!("../prompts/lfo/role.txt"),
                include_str!("../prompts/lfo/actions.txt"),
                include_str!("../prompts/lfo/environment.txt"),
                include_str!("../prompts/lfo/output_format.txt"),
                include_str!("../prompts/lfo/examples.txt"),
                include_str!("../prompts/lfo/query_template.txt"),
            ],
            "virtualhome" => [
                include_str!("../prompts/virtualhome/role.txt"),
                include_str!("../prompts/virtualhome/actions.txt"),
                include_str!("../prompts/virtualhome/environment.txt"),
                include_str!("../prompts/virtualhome/output_format.txt"),
                include_str!("../prompts/virtualhome/examples.txt"),
                include_str!("../prompts/virtualhome/query_template.txt"),
            ],
            _ => return None,
        };
        Some(PromptSet::from_texts(texts).expect("bundled prompts are valid"))
    }
}

/// Loads `role.txt`, `actions.txt`, `environment.txt`, `output_format.txt`,
/// `examples.txt` and `query_template.txt` from `dir`.
pub fn load_prompt_set(dir: &Path) -> Result<PromptSet, PromptError> {
    let mut texts = Vec::with_capacity(PROMPT_FILES.len());
    for stem in PROMPT_FILES {
        let path = dir.join(format!("{stem}.txt"));
        match fs::read_to_string(&path) {
            Ok(t) => texts.push(t),
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(PromptError::MissingFile(stem.to_string())),
            Err(e) => {
                return Err(PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            }
        }
    }
    let texts: [&str; 6] = std::array::from_fn(|i| texts[i].as_str());
    PromptSet::from_texts(texts)
}

/// Substitutes the environment and the JSON-quoted instruction.
pub fn instantiate_query(template: &str, env: &Environment, instruction: &str) -> String {
    let quoted = serde_json::to_string(instruction).expect("string serializes");
    template
        .replacen(ENVIRONMENT_PLACEHOLDER, &serialize_environment(env), 1)
        .replacen(INSTRUCTION_PLACEHOLDER, &quoted, 1)
}

/// Token counting strategy.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteEstimate;

impl TokenCounter for ByteEstimate {
    fn count(&self, text: &str) -> usize {
        estimate_tokens(text)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// A past query with everything that followed it (replies and feedback).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Exchange {
    pub turns: Vec<Turn>,
}

impl Exchange {
    pub fn cost(&self, counter: &dyn TokenCounter) -> usize {
        self.turns.iter().map(|t| counter.count(&t.text)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
    pub token_estimate: usize,
    /// Number of past exchanges that fit the budget.
    pub history_included: usize,
}

/// Assembles a budgeted conversation.
pub struct ConversationBuilder<'a> {
    prompts: &'a PromptSet,
    history: &'a [Exchange],
    pending: &'a [Turn],
    acknowledgements: Option<&'a [String]>,
    budget: usize,
    counter: &'a dyn TokenCounter,
}

impl<'a> ConversationBuilder<'a> {
    pub fn new(prompts: &'a PromptSet) -> Self {
        ConversationBuilder {
            prompts,
            history: &[],
            pending: &[],
            acknowledgements: None,
            budget: DEFAULT_BUDGET,
            counter: &ByteEstimate,
        }
    }

    pub fn history(mut self, history: &'a [Exchange]) -> Self {
        self.history = history;
        self
    }

    /// Turns of the current exchange that follow the query.
    pub fn pending(mut self, pending: &'a [Turn]) -> Self {
        self.pending = pending;
        self
    }

    /// Replies recorded for the fixed prompts, replacing the synthesized
    /// acknowledgement.
    pub fn acknowledgements(mut self, acks: &'a [String]) -> Self {
        self.acknowledgements = Some(acks);
        self
    }

    pub fn budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    pub fn counter(mut self, counter: &'a dyn TokenCounter) -> Self {
        self.counter = counter;
        self
    }

    pub fn build(self, env: &Environment, instruction: &str) -> Result<Conversation, PromptError> {
        let query = instantiate_query(&self.prompts.query_template, env, instruction);
        let mut head = Vec::with_capacity(10);
        for (i, p) in self.prompts.fixed_prompts().into_iter().enumerate() {
            head.push(Turn::user(p));
            let ack = self
                .acknowledgements
                .and_then(|a| a.get(i))
                .map_or(ACKNOWLEDGEMENT, String::as_str);
            head.push(Turn::assistant(ack));
        }
        let mut tail = vec![Turn::user(query)];
        tail.extend(self.pending.iter().cloned());

        let count = |turns: &[Turn]| -> usize { turns.iter().map(|t| self.counter.count(&t.text)).sum() };
        let mut total = count(&head) + count(&tail);
        if total > self.budget {
            return Err(PromptError::BudgetTooSmall {
                required: total,
                budget: self.budget,
            });
        }
        let mut kept = 0;
        for ex in self.history.iter().rev() {
            let cost = ex.cost(self.counter);
            if total + cost > self.budget {
                break;
            }
            total += cost;
            kept += 1;
        }
        let mut turns = head;
        for ex in &self.history[self.history.len() - kept..] {
            turns.extend(ex.turns.iter().cloned());
        }
        turns.extend(tail);
        Ok(Conversation {
            turns,
            token_estimate: total,
            history_included: kept,
        })
    }
}

pub fn build_conversation(
    ps: &PromptSet,
    history: &[Exchange],
    env: &Environment,
    instruction: &str,
    budget: usize,
) -> Result<Conversation, PromptError> {
    ConversationBuilder::new(ps).history(history).budget(budget).build(env, instruction)
}
