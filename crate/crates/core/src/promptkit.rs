//! Prompt catalog, byte-level tokenizer, sequence assembly and answer parsing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const AUDIO_PLACEHOLDER: u32 = 3;
pub const BYTE_OFFSET: u32 = 4;
pub const VOCAB_SIZE: usize = 260;

const PROMPT_DIRECT: &str = "Listen to this audio and determine if it is a bonafide or a spoof. Respond with only one word: 'bonafide' or 'spoof'.";
const PROMPT_YES_NO: &str =
    "Is this audio a spoof? Respond with 'yes' or 'no' only without any explanation.";
const PROMPT_DESCRIPTIVE: &str = "Real or bonafide human speech typically has natural prosody, emotional consistency, and no robotic or glitchy artefacts. In contrast, fake or spoofed speech may exhibit issues like monotonic tone, unnatural pacing, robotic texture, or audio glitches such as clicks or distortions. Now, listen to the given audio and determine if it is bonafide or spoof based on these characteristics. Respond with only one word: 'spoof' or 'bonafide'";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("sequence needs at least one audio token")]
    NoAudioTokens,
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TemplateId {
    P1,
    P2,
    P3,
    #[serde(rename = "MULTI")]
    Multi,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [TemplateId::P1, TemplateId::P2, TemplateId::P3, TemplateId::Multi];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::P1 => "P1",
            TemplateId::P2 => "P2",
            TemplateId::P3 => "P3",
            TemplateId::Multi => "MULTI",
        }
    }

    /// Single-prompt templates a MULTI query expands into, in order.
    pub fn expand(self) -> Vec<TemplateId> {
        match self {
            TemplateId::Multi => vec![TemplateId::P1, TemplateId::P3],
            other => vec![other],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(TemplateId::P1),
            "P2" => Ok(TemplateId::P2),
            "P3" => Ok(TemplateId::P3),
            "MULTI" => Ok(TemplateId::Multi),
            _ => Err(PromptError::UnknownTemplate(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub texts: Vec<String>,
    pub answer_set: Vec<String>,
    pub label_map: BTreeMap<String, Label>,
}

impl PromptTemplate {
    pub fn get(id: TemplateId) -> Self {
        let binary = || {
            (
                vec!["bonafide".to_string(), "spoof".to_string()],
                BTreeMap::from([
                    ("bonafide".to_string(), Label::Bonafide),
                    ("spoof".to_string(), Label::Spoof),
                ]),
            )
        };
        let (answer_set, label_map) = match id {
            TemplateId::P2 => (
                vec!["yes".to_string(), "no".to_string()],
                BTreeMap::from([
                    ("yes".to_string(), Label::Spoof),
                    ("no".to_string(), Label::Bonafide),
                ]),
            ),
            _ => binary(),
        };
        Self {
            id,
            texts: render_prompt(id).into_iter().map(str::to_string).collect(),
            answer_set,
            label_map,
        }
    }

    /// Single-prompt template whose text is exactly `prompt`.
    pub fn for_text(prompt: &str) -> Option<Self> {
        [TemplateId::P1, TemplateId::P2, TemplateId::P3]
            .into_iter()
            .find(|&id| render_prompt(id)[0] == prompt)
            .map(Self::get)
    }

    /// Answer string that encodes `label` under this template.
    pub fn answer_for(&self, label: Label) -> &str {
        self.answer_set
            .iter()
            .find(|a| self.label_map[a.as_str()] == label)
            .expect("label map covers both classes")
    }
}

/// Verbatim prompt text(s); MULTI yields the direct prompt then the descriptive one.
pub fn render_prompt(id: TemplateId) -> Vec<&'static str> {
    match id {
        TemplateId::P1 => vec![PROMPT_DIRECT],
        TemplateId::P2 => vec![PROMPT_YES_NO],
        TemplateId::P3 => vec![PROMPT_DESCRIPTIVE],
        TemplateId::Multi => vec![PROMPT_DIRECT, PROMPT_DESCRIPTIVE],
    }
}

/// JSON catalog of all templates, consumed verbatim by the bridge service.
pub fn catalog_json() -> String {
    let all: Vec<PromptTemplate> = TemplateId::ALL.iter().map(|&id| PromptTemplate::get(id)).collect();
    serde_json::to_string_pretty(&all).expect("catalog serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentTag {
    Special,
    AudioPlaceholder,
    Prompt,
    Answer,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub segment_tags: Vec<SegmentTag>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push(&mut self, token: u32, tag: SegmentTag) {
        self.tokens.push(token);
        self.segment_tags.push(tag);
    }

    pub fn n_audio(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == AUDIO_PLACEHOLDER).count()
    }

    pub fn has_answer(&self) -> bool {
        self.segment_tags.contains(&SegmentTag::Answer)
    }
}

pub fn tokenize(text: &str) -> TokenSequence {
    let tokens: Vec<u32> = text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect();
    let segment_tags = vec![SegmentTag::Prompt; tokens.len()];
    TokenSequence {
        tokens,
        segment_tags,
    }
}

/// Inverse of [`tokenize`]; special tokens are skipped and invalid UTF-8 is replaced.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&t))
        .map(|&t| (t - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// `[BOS] + AUDIO×n + prompt bytes (+ answer bytes + [EOS])`.
pub fn assemble_sequence(
    n_audio_tokens: usize,
    prompt: &str,
    answer: Option<&str>,
) -> Result<TokenSequence, PromptError> {
    if n_audio_tokens == 0 {
        return Err(PromptError::NoAudioTokens);
    }
    let answer_len = answer.map_or(0, |a| a.len() + 1);
    let cap = 1 + n_audio_tokens + prompt.len() + answer_len;
    let mut seq = TokenSequence {
        tokens: Vec::with_capacity(cap),
        segment_tags: Vec::with_capacity(cap),
    };
    seq.push(BOS, SegmentTag::Special);
    for _ in 0..n_audio_tokens {
        seq.push(AUDIO_PLACEHOLDER, SegmentTag::AudioPlaceholder);
    }
    for b in prompt.bytes() {
        seq.push(b as u32 + BYTE_OFFSET, SegmentTag::Prompt);
    }
    if let Some(answer) = answer {
        for b in answer.bytes() {
            seq.push(b as u32 + BYTE_OFFSET, SegmentTag::Answer);
        }
        seq.push(EOS, SegmentTag::Answer);
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerValue {
    Bonafide,
    Spoof,
    Unknown,
}

impl AnswerValue {
    pub fn label(self) -> Option<Label> {
        match self {
            AnswerValue::Bonafide => Some(Label::Bonafide),
            AnswerValue::Spoof => Some(Label::Spoof),
            AnswerValue::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerValue::Bonafide => "bonafide",
            AnswerValue::Spoof => "spoof",
            AnswerValue::Unknown => "unknown",
        }
    }
}

impl From<Label> for AnswerValue {
    fn from(l: Label) -> Self {
        match l {
            Label::Bonafide => AnswerValue::Bonafide,
            Label::Spoof => AnswerValue::Spoof,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub value: AnswerValue,
    pub raw: String,
}

const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '\'', '"'];

/// Lowercase, trim whitespace, then strip leading/trailing punctuation marks.
pub fn normalize_answer(raw: &str) -> String {
    raw.trim()
        .to_lowercase()
        .trim_matches(|c: char| c.is_whitespace() || TERMINAL_PUNCT.contains(&c))
        .to_string()
}

/// Maps a generated string to a label, or `Unknown` when it is outside the answer set.
pub fn parse_answer(raw: &str, template: &PromptTemplate) -> ParsedAnswer {
    let norm = normalize_answer(raw);
    let value = template
        .label_map
        .get(&norm)
        .map_or(AnswerValue::Unknown, |&l| l.into());
    ParsedAnswer {
        value,
        raw: raw.to_string(),
    }
}
