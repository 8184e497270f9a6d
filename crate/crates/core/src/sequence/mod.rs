//! Interleaved training sequences.
//!
//! Layout, one turn per triplet:
//!
//! ```text
//! Definition: <task definition>
//! User: <image> is a driving video. <instruction> GPT: <answer> <answer text> <endofchunk>
//! ... exemplar turns, then the current instance ...
//! ```
//!
//! The loss mask is set on answer text and the closing `<endofchunk>` of
//! every turn, exemplars included. `<answer>` itself is not supervised.

mod scan;
mod tokenizer;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::StoreError;
use crate::tasks::{InstructionTriplet, TaskKind};

pub use scan::{scan_mask, verify, SequenceViolation};
pub use tokenizer::{Tokenizer, WhitespaceTokenizer};

pub const IMAGE_TOKEN: &str = "<image>";
pub const ANSWER_TOKEN: &str = "<answer>";
pub const END_TOKEN: &str = "<endofchunk>";
pub const SPECIAL_TOKENS: [&str; 3] = [IMAGE_TOKEN, ANSWER_TOKEN, END_TOKEN];

pub const DEFINITION_MARKER: &str = "Definition:";
pub const USER_MARKER: &str = "User:";
pub const GPT_MARKER: &str = "GPT:";
const VIDEO_PREAMBLE: &str = "is a driving video.";

pub const DEFAULT_MAX_LEN: usize = 1024;
pub const DEFAULT_MAX_EXEMPLARS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum AssembleError {
    #[error("definition and current instance need {required} tokens, budget is {max_len}")]
    BudgetUnderflow { required: usize, max_len: usize },
    #[error("exemplar {id} is {found}, current instance is {expected}")]
    TaskMismatch { id: String, expected: TaskKind, found: TaskKind },
    #[error("{count} exemplars exceed the limit of {max}")]
    TooManyExemplars { count: usize, max: usize },
    #[error("triplet {0} has an empty instruction or answer")]
    EmptyTurn(String),
    #[error("malformed sequence: {0}")]
    Malformed(String),
}

/// A token stream with one media slot per `<image>` and one mask bit per
/// token.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InterleavedSequence {
    pub tokens: Vec<String>,
    pub media: Vec<String>,
    pub mask: Vec<bool>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn turn_count(&self) -> usize {
        self.tokens.iter().filter(|t| *t == IMAGE_TOKEN).count()
    }

    fn push(&mut self, token: impl Into<String>, supervised: bool) {
        self.tokens.push(token.into());
        self.mask.push(supervised);
    }

    /// `[start, end)` token ranges of each turn, from its `User:` marker
    /// through its `<endofchunk>`.
    fn turn_spans(&self) -> Result<Vec<(usize, usize)>, AssembleError> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < self.tokens.len() {
            if self.tokens[i] == IMAGE_TOKEN {
                if i == 0 || self.tokens[i - 1] != USER_MARKER {
                    return Err(AssembleError::Malformed(format!("<image> at {i} not preceded by {USER_MARKER}")));
                }
                let end = self.tokens[i..]
                    .iter()
                    .position(|t| t == END_TOKEN)
                    .map(|p| i + p + 1)
                    .ok_or_else(|| AssembleError::Malformed(format!("turn at {i} never closes")))?;
                spans.push((i - 1, end));
                i = end;
            } else {
                i += 1;
            }
        }
        Ok(spans)
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    tokens: Vec<String>,
    media: Vec<String>,
    mask: Vec<u8>,
}

/// Per-task definition paragraph placed at the head of each sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDefinition {
    pub task: TaskKind,
    pub text: String,
}

impl TaskDefinition {
    pub fn bundled(task: TaskKind) -> Self {
        let text = match task {
            TaskKind::BehaviorUnderstanding => include_str!("../../templates/definitions/behavior_understanding.txt"),
            TaskKind::BehaviorReasoning => include_str!("../../templates/definitions/behavior_reasoning.txt"),
            TaskKind::SignalPrediction => include_str!("../../templates/definitions/signal_prediction.txt"),
            TaskKind::DetailedConversation => include_str!("../../templates/definitions/detailed_conversation.txt"),
        };
        Self {
            task,
            text: text.trim().to_owned(),
        }
    }

    /// Reads `<dir>/<task>.txt`.
    pub fn load(task: TaskKind, dir: &Path) -> std::io::Result<Self> {
        let path = dir.join(format!("{}.txt", task.as_str()));
        let text = std::fs::read_to_string(&path)?.trim().to_owned();
        if text.is_empty() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}: empty task definition", path.display()),
            ));
        }
        Ok(Self { task, text })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenBudget {
    pub max_len: usize,
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self { max_len: DEFAULT_MAX_LEN }
    }
}

/// Tokens, mask bits and media slot of one rendered turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnFragment {
    pub tokens: Vec<String>,
    pub mask: Vec<bool>,
    pub media: String,
}

pub struct Assembler<'a> {
    pub tokenizer: &'a dyn Tokenizer,
    pub budget: TokenBudget,
    pub max_exemplars: usize,
}

impl<'a> Assembler<'a> {
    pub fn new(tokenizer: &'a dyn Tokenizer) -> Self {
        Self {
            tokenizer,
            budget: TokenBudget::default(),
            max_exemplars: DEFAULT_MAX_EXEMPLARS,
        }
    }

    pub fn render_turn(&self, t: &InstructionTriplet) -> TurnFragment {
        let mut seq = InterleavedSequence::default();
        seq.push(USER_MARKER, false);
        seq.push(IMAGE_TOKEN, false);
        for tok in self.tokenizer.tokenize(VIDEO_PREAMBLE) {
            seq.push(tok, false);
        }
        for tok in self.tokenizer.tokenize(&t.instruction) {
            seq.push(tok, false);
        }
        seq.push(GPT_MARKER, false);
        seq.push(ANSWER_TOKEN, false);
        for tok in self.tokenizer.tokenize(&t.answer) {
            seq.push(tok, true);
        }
        seq.push(END_TOKEN, true);
        TurnFragment {
            tokens: seq.tokens,
            mask: seq.mask,
            media: t.video_ref.clone(),
        }
    }

    /// Definition, then exemplar turns in the given order, then the
    /// current instance; trimmed to the budget with [`enforce_budget`].
    pub fn assemble(
        &self,
        def: &TaskDefinition,
        exemplars: &[InstructionTriplet],
        current: &InstructionTriplet,
    ) -> Result<InterleavedSequence, AssembleError> {
        if exemplars.len() > self.max_exemplars {
            return Err(AssembleError::TooManyExemplars {
                count: exemplars.len(),
                max: self.max_exemplars,
            });
        }
        for t in exemplars.iter().chain(std::iter::once(current)) {
            if t.task != current.task {
                return Err(AssembleError::TaskMismatch {
                    id: t.id.clone(),
                    expected: current.task,
                    found: t.task,
                });
            }
            if self.tokenizer.tokenize(&t.instruction).is_empty() || self.tokenizer.tokenize(&t.answer).is_empty() {
                return Err(AssembleError::EmptyTurn(t.id.clone()));
            }
        }

        let mut seq = InterleavedSequence::default();
        seq.push(DEFINITION_MARKER, false);
        for tok in self.tokenizer.tokenize(&def.text) {
            seq.push(tok, false);
        }
        for t in exemplars.iter().chain(std::iter::once(current)) {
            let turn = self.render_turn(t);
            seq.tokens.extend(turn.tokens);
            seq.mask.extend(turn.mask);
            seq.media.push(turn.media);
        }
        enforce_budget(seq, self.budget)
    }
}

/// Drops whole exemplar turns, oldest first, until the sequence fits.
/// The definition and the final turn are never touched.
pub fn enforce_budget(mut seq: InterleavedSequence, budget: TokenBudget) -> Result<InterleavedSequence, AssembleError> {
    if seq.len() <= budget.max_len {
        return Ok(seq);
    }
    let spans = seq.turn_spans()?;
    if spans.is_empty() {
        return Err(AssembleError::Malformed("no turns".into()));
    }
    let removable = spans.len() - 1;
    let mut excess = seq.len() - budget.max_len;
    let mut drop = 0;
    while drop < removable && excess > 0 {
        let (s, e) = spans[drop];
        excess = excess.saturating_sub(e - s);
        drop += 1;
    }
    if excess > 0 {
        let required = seq.len() - spans[..removable].iter().map(|(s, e)| e - s).sum::<usize>();
        return Err(AssembleError::BudgetUnderflow {
            required,
            max_len: budget.max_len,
        });
    }
    if drop > 0 {
        let (from, to) = (spans[0].0, spans[drop - 1].1);
        seq.tokens.drain(from..to);
        seq.mask.drain(from..to);
        seq.media.drain(..drop);
    }
    Ok(seq)
}

pub fn write_sequences<W: Write>(seqs: &[InterleavedSequence], mut w: W) -> Result<(), StoreError> {
    for s in seqs {
        let line = SequenceLine {
            tokens: s.tokens.clone(),
            media: s.media.clone(),
            mask: s.mask.iter().map(|&b| u8::from(b)).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses one JSONL line. Mask entries other than 0/1 are an error.
pub fn parse_sequence_line(line: &str) -> Result<InterleavedSequence, String> {
    let raw: SequenceLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mask = raw
        .mask
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(format!("mask value {other} is not 0 or 1")),
        })
        .collect::<Result<_, _>>()?;
    Ok(InterleavedSequence {
        tokens: raw.tokens,
        media: raw.media,
        mask,
    })
}

pub fn read_sequences<R: BufRead>(r: R) -> Result<Vec<InterleavedSequence>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = parse_sequence_line(&line).map_err(|e| StoreError::Decode {
            line: i + 1,
            source: serde::de::Error::custom(e),
        })?;
        out.push(seq);
    }
    Ok(out)
}
