//! Token-stream checks that do not share code with the assembler.

use std::fmt;

use super::{InterleavedSequence, ANSWER_TOKEN, END_TOKEN, IMAGE_TOKEN};

/// Recomputes the loss mask from tokens alone: true strictly after each
/// `<answer>` up to and including the next `<endofchunk>`.
pub fn scan_mask(tokens: &[String]) -> Vec<bool> {
    let mut supervised = false;
    tokens
        .iter()
        .map(|tok| match tok.as_str() {
            ANSWER_TOKEN => {
                supervised = true;
                false
            }
            END_TOKEN => {
                let m = supervised;
                supervised = false;
                m
            }
            IMAGE_TOKEN => {
                supervised = false;
                false
            }
            _ => supervised,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SequenceViolation {
    MaskLength { tokens: usize, mask: usize },
    MediaCount { images: usize, media: usize },
    MarkerCounts { images: usize, answers: usize, ends: usize },
    /// `<answer>` at this position is not closed by exactly one
    /// `<endofchunk>` before the next `<image>`.
    UnclosedAnswer(usize),
    StrayEnd(usize),
    MaskMismatch(usize),
    NoTurns,
}

impl fmt::Display for SequenceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MaskLength { tokens, mask } => write!(f, "mask length {mask} != token count {tokens}"),
            Self::MediaCount { images, media } => write!(f, "{media} media slots for {images} <image> tokens"),
            Self::MarkerCounts { images, answers, ends } => {
                write!(f, "marker counts differ: <image>={images} <answer>={answers} <endofchunk>={ends}")
            }
            Self::UnclosedAnswer(i) => write!(f, "<answer> at {i} is not closed by a single <endofchunk>"),
            Self::StrayEnd(i) => write!(f, "<endofchunk> at {i} has no opening <answer>"),
            Self::MaskMismatch(i) => write!(f, "mask bit at {i} disagrees with the token stream"),
            Self::NoTurns => write!(f, "sequence has no turns"),
        }
    }
}

/// Every structural and mask invariant of an assembled sequence.
pub fn verify(seq: &InterleavedSequence) -> Vec<SequenceViolation> {
    let mut out = Vec::new();
    let count = |t: &str| seq.tokens.iter().filter(|x| x.as_str() == t).count();
    let (images, answers, ends) = (count(IMAGE_TOKEN), count(ANSWER_TOKEN), count(END_TOKEN));

    if seq.mask.len() != seq.tokens.len() {
        out.push(SequenceViolation::MaskLength {
            tokens: seq.tokens.len(),
            mask: seq.mask.len(),
        });
    }
    if seq.media.len() != images {
        out.push(SequenceViolation::MediaCount {
            images,
            media: seq.media.len(),
        });
    }
    if images == 0 {
        out.push(SequenceViolation::NoTurns);
    }
    if images != answers || answers != ends {
        out.push(SequenceViolation::MarkerCounts { images, answers, ends });
    }

    let mut open: Option<usize> = None;
    let mut closed_since_image = false;
    for (i, tok) in seq.tokens.iter().enumerate() {
        match tok.as_str() {
            ANSWER_TOKEN => {
                if let Some(at) = open.replace(i) {
                    out.push(SequenceViolation::UnclosedAnswer(at));
                }
            }
            END_TOKEN => {
                if open.take().is_none() || closed_since_image {
                    out.push(SequenceViolation::StrayEnd(i));
                }
                closed_since_image = true;
            }
            IMAGE_TOKEN => {
                if let Some(at) = open.take() {
                    out.push(SequenceViolation::UnclosedAnswer(at));
                }
                closed_since_image = false;
            }
            _ => {}
        }
    }
    if let Some(at) = open {
        out.push(SequenceViolation::UnclosedAnswer(at));
    }

    let expected = scan_mask(&seq.tokens);
    if let Some(i) = expected.iter().zip(&seq.mask).position(|(a, b)| a != b) {
        out.push(SequenceViolation::MaskMismatch(i));
    }
    out
}
