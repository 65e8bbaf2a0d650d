//! Token vocabulary, the structured-output grammar, target composition,
//! output parsing and the self-reflection instruction.
//!
//! Outputs follow a three-part structure: a visual grounding token (`<LOC>`
//! or, for absent referents, `<REJ>`), a complexity marker (`<SIMPLE>` or
//! `<COMPLEX>`), and the textual body — an optional rationale followed by the
//! final answer. Tokenization is word-level over a closed vocabulary; every
//! corpus string is pre-tokenized (punctuation space-separated).

use crate::error::{Error, Result};
use crate::scenegen::QueryInstance;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const PAD: &str = "<PAD>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const IMAGE: &str = "<IMAGE>";
pub const LOC: &str = "<LOC>";
pub const REJ: &str = "<REJ>";
pub const SIMPLE: &str = "<SIMPLE>";
pub const COMPLEX: &str = "<COMPLEX>";

/// Fixed indices of the special tokens; stable across every vocabulary.
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const IMAGE_ID: usize = 3;
pub const LOC_ID: usize = 4;
pub const REJ_ID: usize = 5;
pub const SIMPLE_ID: usize = 6;
pub const COMPLEX_ID: usize = 7;

const SPECIALS: [&str; 8] = [PAD, BOS, EOS, IMAGE, LOC, REJ, SIMPLE, COMPLEX];

/// Number of quantization bins for box-as-text baselines; `<0>`..`<99>`.
pub const BOX_BINS: usize = 100;

/// Words used by the query/answer templates and the reflection instruction.
/// Shape and color names come in via [`Vocab::standard`].
const TEMPLATE_WORDS: &[&str] = &[
    // structure
    "USER", "ASSISTANT", ":", ".", ",", "?", "It", "is",
    // simple templates
    "what", "color", "the", "in", "this", "image", "Is", "there", "a", "an",
    "where", "Yes", "No", "The", "There", "no",
    // locations
    "at", "top", "bottom", "left", "right", "of", "center",
    // complex templates
    "how", "many", "are", "which", "larger", "smaller", "or", "I", "count",
    "each", "covers", "more", "fewer", "pixels", "than", "so", "it", "appears",
    "times", "shape", "shapes", "object", "objects",
    // counting answers
    "1", "2", "3", "4", "5", "6",
    // rationale connectors
    "and", "its", "area", "compare", "both", "sides", "to", "answer",
    // reflection instruction
    "Given", "text", "query", "first", "assess", "whether", "answering",
    "requires", "rationale", "If", "directly", "observable", "from", "without",
    "additional", "reasoning", "classify", "as", "provide", "only", "final",
    "logical", "inference", "contextual", "understanding", "generate",
    "before", "providing",
];

/// Closed word-level vocabulary with fixed special-token indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds the standard vocabulary: specials, box bins, then the closed
    /// word list (template words plus scene shape/color names), sorted.
    pub fn standard(shape_names: &[String], color_names: &[String]) -> Self {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        for s in shape_names {
            words.push(s.clone());
            words.push(plural(s));
        }
        words.extend(color_names.iter().cloned());
        words.sort();
        words.dedup();

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for b in 0..BOX_BINS {
            tokens.push(format!("<{b}>"));
        }
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let v = Self { tokens, index };
        debug_assert_eq!(v.tokens[LOC_ID], LOC);
        debug_assert_eq!(v.tokens[COMPLEX_ID], COMPLEX);
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of the quantized box token `<bin>`.
    pub fn box_bin_id(&self, bin: usize) -> usize {
        assert!(bin < BOX_BINS);
        SPECIALS.len() + bin
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::OutOfVocab(w.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.token(id)
                    .ok_or(Error::TokenIdRange(id, self.tokens.len()))
            })
            .collect();
        Ok(words?.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let specials: HashMap<&str, usize> = SPECIALS
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, i))
            .collect();
        let doc = serde_json::json!({
            "tokens": self.tokens,
            "specials": specials,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            tokens: Vec<String>,
        }
        let doc: Doc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if doc.tokens.get(i).map(|t| t.as_str()) != Some(*s) {
                return Err(Error::Config(format!(
                    "vocab file special token {i} is not {s}"
                )));
            }
        }
        Ok(Self::from_tokens(doc.tokens))
    }
}

fn plural(word: &str) -> String {
    if word.ends_with('s') || word.ends_with('x') {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}

/// Kind of visual grounding token in a structured output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroundingToken {
    Loc,
    Rej,
}

/// Complexity marker in a structured output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Marker {
    Simple,
    Complex,
}

/// Parsed `{V, T, F}` decomposition of a model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuredOutput {
    pub grounding: GroundingToken,
    pub marker: Marker,
    /// Rationale span token ids; present exactly when `marker` is `Complex`.
    pub rationale: Option<Vec<usize>>,
    /// Final answer span token ids; never empty.
    pub answer: Vec<usize>,
    /// Index of the grounding token within the parsed sequence.
    pub loc_position: usize,
}

/// Grammar violations, one variant per failure mode; evaluation scores any
/// of these as incorrect rather than repairing the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MalformedOutput {
    #[error("no grounding token")]
    NoGroundingToken,
    #[error("multiple grounding tokens")]
    MultipleGroundingTokens,
    #[error("missing complexity marker")]
    MissingMarker,
    #[error("multiple complexity markers")]
    MultipleMarkers,
    #[error("complex output without rationale")]
    MissingRationale,
    #[error("empty answer")]
    EmptyAnswer,
}

/// Composes the token-ready target string for a query instance.
///
/// Grounded form: `It is <LOC|REJ> . <SIMPLE|COMPLEX> . [rationale] answer <EOS>`.
pub fn compose_target_text(
    rejected: bool,
    complex: bool,
    rationale: Option<&str>,
    answer: &str,
) -> String {
    let v = if rejected { REJ } else { LOC };
    let m = if complex { COMPLEX } else { SIMPLE };
    match rationale {
        Some(r) => format!("It is {v} . {m} . {r} {answer} {EOS}"),
        None => format!("It is {v} . {m} . {answer} {EOS}"),
    }
}

/// Target form used by the grounding-free baselines: marker plus body only.
pub fn compose_marker_only_text(complex: bool, rationale: Option<&str>, answer: &str) -> String {
    let m = if complex { COMPLEX } else { SIMPLE };
    match rationale {
        Some(r) => format!("{m} . {r} {answer} {EOS}"),
        None => format!("{m} . {answer} {EOS}"),
    }
}

/// Token ids of the composed target sequence for `instance`.
pub fn compose_target(vocab: &Vocab, instance: &QueryInstance) -> Result<Vec<usize>> {
    vocab.encode(&compose_target_text(
        instance.rejected,
        instance.is_complex(),
        instance.rationale_text.as_deref(),
        &instance.answer_text,
    ))
}

/// Decomposes an output token sequence into `{V, T, F}`.
///
/// Trailing `<PAD>` is tolerated and everything after the first `<EOS>` is
/// ignored. For complex outputs the final sentence is the answer and every
/// preceding sentence is the rationale; simple outputs treat the whole body
/// as the answer.
pub fn parse_output(
    vocab: &Vocab,
    ids: &[usize],
) -> std::result::Result<StructuredOutput, MalformedOutput> {
    let period = vocab.id(".");
    let end = ids
        .iter()
        .position(|&t| t == EOS_ID)
        .unwrap_or(ids.len());
    let seq: Vec<usize> = ids[..end]
        .iter()
        .copied()
        .filter(|&t| t != PAD_ID)
        .collect();

    let mut grounding = None;
    let mut loc_position = 0usize;
    for (i, &t) in ids[..end].iter().enumerate() {
        let kind = match t {
            x if x == LOC_ID => Some(GroundingToken::Loc),
            x if x == REJ_ID => Some(GroundingToken::Rej),
            _ => None,
        };
        if let Some(kind) = kind {
            if grounding.is_some() {
                return Err(MalformedOutput::MultipleGroundingTokens);
            }
            grounding = Some(kind);
            loc_position = i;
        }
    }
    let grounding = grounding.ok_or(MalformedOutput::NoGroundingToken)?;

    let mut marker = None;
    let mut marker_pos = 0usize;
    for (i, &t) in seq.iter().enumerate() {
        let m = match t {
            x if x == SIMPLE_ID => Some(Marker::Simple),
            x if x == COMPLEX_ID => Some(Marker::Complex),
            _ => None,
        };
        if let Some(m) = m {
            if marker.is_some() {
                return Err(MalformedOutput::MultipleMarkers);
            }
            marker = Some(m);
            marker_pos = i;
        }
    }
    let marker = marker.ok_or(MalformedOutput::MissingMarker)?;

    // Body: everything after the marker, skipping its separator period.
    let mut body_start = marker_pos + 1;
    if period.is_some() && seq.get(body_start).copied() == period {
        body_start += 1;
    }
    let body = &seq[body_start.min(seq.len())..];
    if body.is_empty() {
        return Err(MalformedOutput::EmptyAnswer);
    }

    let (rationale, answer) = match marker {
        Marker::Simple => (None, body.to_vec()),
        Marker::Complex => {
            let sentences = split_sentences(body, period);
            if sentences.len() < 2 {
                return Err(MalformedOutput::MissingRationale);
            }
            let answer = sentences.last().unwrap().clone();
            let rationale: Vec<usize> = sentences[..sentences.len() - 1].concat();
            (Some(rationale), answer)
        }
    };
    if answer.is_empty() {
        return Err(MalformedOutput::EmptyAnswer);
    }

    Ok(StructuredOutput {
        grounding,
        marker,
        rationale,
        answer,
        loc_position,
    })
}

/// Marker-only grammar used when scoring grounding-free baseline outputs:
/// returns `(marker, answer_ids)` or `None` when even that fails.
pub fn parse_marker_only(vocab: &Vocab, ids: &[usize]) -> Option<(Marker, Vec<usize>)> {
    let period = vocab.id(".");
    let end = ids.iter().position(|&t| t == EOS_ID).unwrap_or(ids.len());
    let seq: Vec<usize> = ids[..end]
        .iter()
        .copied()
        .filter(|&t| t != PAD_ID)
        .collect();
    let marker_pos = seq
        .iter()
        .position(|&t| t == SIMPLE_ID || t == COMPLEX_ID)?;
    let marker = if seq[marker_pos] == SIMPLE_ID {
        Marker::Simple
    } else {
        Marker::Complex
    };
    let mut body_start = marker_pos + 1;
    if period.is_some() && seq.get(body_start).copied() == period {
        body_start += 1;
    }
    let body: Vec<usize> = seq[body_start.min(seq.len())..].to_vec();
    if body.is_empty() {
        return None;
    }
    Some((marker, body))
}

/// The fixed self-reflection instruction prepended to user queries so the
/// model classifies its own query complexity at inference.
pub fn self_reflection_prompt() -> &'static str {
    "Given an image and a text query , first assess whether answering the \
     query requires a rationale . If the answer is directly observable from \
     the image without additional reasoning , classify it as <SIMPLE> and \
     provide only the final answer . If answering requires logical inference \
     or contextual understanding , classify it as <COMPLEX> and generate a \
     rationale before providing the final answer ."
}

fn split_sentences(body: &[usize], period: Option<usize>) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for &t in body {
        current.push(t);
        if Some(t) == period {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}
