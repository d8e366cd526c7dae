//! Benchmark construction: article splitting, the QA filter cascade,
//! visual-reference rewriting, MNIST arithmetic items, multiple-choice
//! conversion and the per-model filters. Every language-model call goes
//! through [`client::LmClient`] or [`client::VlmClient`].

pub mod client;
pub mod parse;
pub mod pipeline;
pub mod prompts;

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{normalize, two_way_inclusion};
use client::{ClientError, ImageRef, TemplateId, VlmClient};

/// Longest answer kept, in whitespace-separated words.
pub const MAX_ANSWER_WORDS: usize = 7;
pub const DEFAULT_CATEGORY_NOUN: &str = "object";
/// Attempts per VLM query before a datapoint is marked unresolved.
pub const VLM_ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("entity {entity:?} not found in {text:?}")]
    EntityNotFound { entity: String, text: String },
    #[error("rewritten question {0:?} still mentions the entity")]
    EntityRemains(String),
    #[error("digit {0} is not in 0..=9")]
    Digit(u8),
    #[error("options are not distinct: {0:?}")]
    DuplicateOption(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    WikiExtract,
    DirectGen,
    MnistArithmetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStep {
    pub rule: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QADatapoint {
    pub entity: String,
    /// Opaque to the builder; empty when images are chosen downstream.
    pub image_id: String,
    pub textual_question: String,
    pub visual_question: String,
    pub answer: String,
    pub source: Source,
    pub filter_log: Vec<FilterStep>,
}

/// Case-insensitive containment after normalization.
pub fn contains_entity(text: &str, entity: &str) -> bool {
    normalize(text).contains(&normalize(entity))
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

impl QADatapoint {
    /// Every broken datapoint invariant, empty when the datapoint is sound.
    /// Arithmetic items are checked against their template instead of the
    /// entity-mention rules, since digits recur inside operands and sums.
    pub fn invariant_violations(&self) -> Vec<String> {
        if self.source == Source::MnistArithmetic {
            return mnist_violations(self);
        }
        let mut out = Vec::new();
        if !contains_entity(&self.textual_question, &self.entity) {
            out.push("textual question does not name the entity".to_string());
        }
        if contains_entity(&self.visual_question, &self.entity) {
            out.push("visual question names the entity".to_string());
        }
        if contains_entity(&self.answer, &self.entity) {
            out.push("answer contains the entity".to_string());
        }
        if word_count(&self.answer) > MAX_ANSWER_WORDS {
            out.push(format!("answer has more than {MAX_ANSWER_WORDS} words"));
        }
        out
    }
}

fn mnist_violations(dp: &QADatapoint) -> Vec<String> {
    let parts: Vec<&str> = dp.textual_question.split(' ').collect();
    let [digit, op, operand, "="] = parts.as_slice() else {
        return vec![format!("malformed arithmetic question {:?}", dp.textual_question)];
    };
    let (Ok(a), Ok(b)) = (digit.parse::<u64>(), operand.parse::<u64>()) else {
        return vec!["non-numeric operand".to_string()];
    };
    let mut out = Vec::new();
    if *digit != dp.entity || a > 9 {
        out.push("digit does not match entity".to_string());
    }
    if b > 99 {
        out.push("operand has more than two digits".to_string());
    }
    let expected = match *op {
        "+" => a + b,
        "×" => a * b,
        other => return vec![format!("unknown operator {other:?}")],
    };
    if dp.answer != expected.to_string() {
        out.push(format!("answer {} is not {expected}", dp.answer));
    }
    if dp.visual_question != format!("the digit in the image {op} {operand} =") {
        out.push("visual question does not follow the template".to_string());
    }
    out
}

/// Splits on `.`, `?` or `!` followed by whitespace and an uppercase letter
/// or digit.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if matches!(c, '.' | '?' | '!') {
            let mut j = i + 1;
            while j < chars.len() && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && (chars[j].1.is_uppercase() || chars[j].1.is_ascii_digit()) {
                let end = pos + c.len_utf8();
                out.push(text[start..end].trim().to_string());
                start = chars[j].0;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Consecutive pairs of sentences, keeping only those that name the entity.
pub fn split_article(text: &str, entity: &str) -> Vec<String> {
    split_sentences(text)
        .chunks(2)
        .map(|c| c.join(" "))
        .filter(|s| contains_entity(s, entity))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QaRule {
    WordLimit,
    AnswerContainsEntity,
    QuestionLacksEntity,
    Ambiguous,
    LmAnswerIncorrect,
    Duplicate,
    VisualReference,
    Invariant,
}

impl QaRule {
    pub fn as_str(self) -> &'static str {
        match self {
            QaRule::WordLimit => "word-limit",
            QaRule::AnswerContainsEntity => "answer-contains-entity",
            QaRule::QuestionLacksEntity => "question-lacks-entity",
            QaRule::Ambiguous => "ambiguous",
            QaRule::LmAnswerIncorrect => "lm-answer-incorrect",
            QaRule::Duplicate => "duplicate",
            QaRule::VisualReference => "visual-reference",
            QaRule::Invariant => "invariant",
        }
    }
}

impl fmt::Display for QaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(QaRule),
}

/// The string rules, in order; returns the first that fails.
pub fn filter_qa(pair: &QaPair, entity: &str) -> Verdict {
    filter_qa_logged(pair, entity).0
}

pub(crate) fn filter_qa_logged(pair: &QaPair, entity: &str) -> (Verdict, Vec<FilterStep>) {
    let checks = [
        (QaRule::WordLimit, word_count(&pair.answer) <= MAX_ANSWER_WORDS),
        (QaRule::AnswerContainsEntity, !contains_entity(&pair.answer, entity)),
        (QaRule::QuestionLacksEntity, contains_entity(&pair.question, entity)),
    ];
    let mut log = Vec::new();
    for (rule, passed) in checks {
        log.push(FilterStep {
            rule: rule.as_str().into(),
            passed,
        });
        if !passed {
            return (Verdict::Reject(rule), log);
        }
    }
    (Verdict::Keep, log)
}

/// Byte end of a case-insensitive match of `needle` at `start`.
fn match_at(text: &str, start: usize, needle: &str) -> Option<usize> {
    let mut hay = text[start..].char_indices();
    let mut end = start;
    for n in needle.chars() {
        let (i, h) = hay.next()?;
        if !h.to_lowercase().eq(n.to_lowercase()) {
            return None;
        }
        end = start + i + h.len_utf8();
    }
    Some(end)
}

fn is_word_char(c: Option<char>) -> bool {
    c.is_some_and(char::is_alphanumeric)
}

/// Replaces each whole-word mention of `entity` with
/// "the <noun> in the image". A directly preceding article is absorbed, so
/// "the tench" becomes "the animal in the image".
pub fn make_visual_reference(textual: &str, entity: &str, noun: &str) -> Result<String, BenchError> {
    let entity = entity.trim();
    let not_found = || BenchError::EntityNotFound {
        entity: entity.into(),
        text: textual.into(),
    };
    if entity.is_empty() {
        return Err(not_found());
    }
    let first_word = entity.chars().next().is_some_and(char::is_alphanumeric);
    let last_word = entity.chars().last().is_some_and(char::is_alphanumeric);
    let mut out = String::with_capacity(textual.len() + 16);
    let mut copied = 0;
    let mut found = false;
    let mut i = 0;
    while i < textual.len() {
        let before = textual[..i].chars().last();
        let hit = match_at(textual, i, entity).filter(|&end| {
            (!first_word || !is_word_char(before)) && (!last_word || !is_word_char(textual[end..].chars().next()))
        });
        if let Some(end) = hit {
            out.push_str(&textual[copied..i]);
            let capital = absorb_article(&mut out);
            out.push_str(if capital { "The" } else { "the" });
            out.push(' ');
            out.push_str(noun);
            out.push_str(" in the image");
            copied = end;
            i = end;
            found = true;
        } else {
            i += textual[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    if !found {
        return Err(not_found());
    }
    out.push_str(&textual[copied..]);
    if contains_entity(&out, entity) {
        return Err(BenchError::EntityRemains(out));
    }
    Ok(out)
}

/// Drops a trailing "the ", "a " or "an " word from `out`; returns whether
/// it was capitalized.
fn absorb_article(out: &mut String) -> bool {
    for article in ["the ", "an ", "a "] {
        let n = article.len();
        if out.len() < n || !out.is_char_boundary(out.len() - n) {
            continue;
        }
        let tail = &out[out.len() - n..];
        if !tail.eq_ignore_ascii_case(article) || is_word_char(out[..out.len() - n].chars().last()) {
            continue;
        }
        let capital = tail.starts_with(|c: char| c.is_uppercase());
        out.truncate(out.len() - n);
        return capital;
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithmeticOp {
    Add,
    Mul,
}

impl ArithmeticOp {
    pub fn symbol(self) -> &'static str {
        match self {
            ArithmeticOp::Add => "+",
            ArithmeticOp::Mul => "×",
        }
    }

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            ArithmeticOp::Add => a + b,
            ArithmeticOp::Mul => a * b,
        }
    }
}

/// One arithmetic question about a digit shown in an image.
pub fn gen_mnist_arithmetic(digit: u8, seed: u64) -> Result<QADatapoint, BenchError> {
    gen_mnist_arithmetic_with(digit, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn gen_mnist_arithmetic_with<R: Rng>(digit: u8, rng: &mut R) -> Result<QADatapoint, BenchError> {
    if digit > 9 {
        return Err(BenchError::Digit(digit));
    }
    let op = if rng.gen_bool(0.5) {
        ArithmeticOp::Add
    } else {
        ArithmeticOp::Mul
    };
    let operand: u64 = rng.gen_range(0..=99);
    Ok(mnist_item(digit, op, operand))
}

pub fn mnist_item(digit: u8, op: ArithmeticOp, operand: u64) -> QADatapoint {
    let sym = op.symbol();
    QADatapoint {
        entity: digit.to_string(),
        image_id: String::new(),
        textual_question: format!("{digit} {sym} {operand} ="),
        visual_question: format!("the digit in the image {sym} {operand} ="),
        answer: op.apply(digit as u64, operand).to_string(),
        source: Source::MnistArithmetic,
        filter_log: Vec::new(),
    }
}

/// `count` items with digits drawn uniformly, all from one seeded stream.
pub fn gen_mnist_batch(count: usize, seed: u64) -> Vec<QADatapoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let digit = rng.gen_range(0..=9u8);
            gen_mnist_arithmetic_with(digit, &mut rng).expect("digit in range")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaDatapoint {
    pub question: String,
    pub options: [String; 4],
    pub correct_index: usize,
}

impl McqaDatapoint {
    pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

    pub fn correct_letter(&self) -> char {
        Self::LETTERS[self.correct_index]
    }

    /// The question followed by one lettered option per line.
    pub fn render(&self) -> String {
        let mut s = self.question.clone();
        for (letter, opt) in Self::LETTERS.iter().zip(&self.options) {
            s.push_str(&format!("\n{letter}. {opt}"));
        }
        s
    }
}

pub fn to_mcqa<R: Rng>(pair: &QaPair, distractors: &[String; 3], rng: &mut R) -> Result<McqaDatapoint, BenchError> {
    let mut options: Vec<String> = std::iter::once(pair.answer.clone())
        .chain(distractors.iter().cloned())
        .collect();
    let mut seen = std::collections::HashSet::new();
    for o in &options {
        if !seen.insert(normalize(o)) {
            return Err(BenchError::DuplicateOption(o.clone()));
        }
    }
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let shuffled: Vec<String> = order.iter().map(|&i| std::mem::take(&mut options[i])).collect();
    let correct_index = order.iter().position(|&i| i == 0).expect("answer is an option");
    Ok(McqaDatapoint {
        question: pair.question.clone(),
        options: shuffled.try_into().expect("four options"),
        correct_index,
    })
}

/// Modal normalized output; ties are broken uniformly at random among the
/// tied outputs, ordered by first appearance.
pub fn majority_vote<R: Rng>(outputs: &[String; 4], rng: &mut R) -> String {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for o in outputs {
        let n = normalize(o);
        match counts.iter_mut().find(|(s, _)| *s == n) {
            Some((_, c)) => *c += 1,
            None => counts.push((n, 1)),
        }
    }
    let best = counts.iter().map(|(_, c)| *c).max().unwrap_or(0);
    let mut modes: Vec<String> = counts.into_iter().filter(|(_, c)| *c == best).map(|(s, _)| s).collect();
    if modes.len() == 1 {
        return modes.pop().expect("one mode");
    }
    let k = rng.gen_range(0..modes.len());
    modes.swap_remove(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrivialKind {
    Black,
    White,
    Noise,
    None,
}

impl TrivialKind {
    pub const ALL: [TrivialKind; 4] = [
        TrivialKind::Black,
        TrivialKind::White,
        TrivialKind::Noise,
        TrivialKind::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrivialKind::Black => "black",
            TrivialKind::White => "white",
            TrivialKind::Noise => "noise",
            TrivialKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VlmStage {
    Identification,
    FullInfo,
    LanguagePrior,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VlmVerdict {
    Keep,
    Reject(VlmStage),
    /// The client kept failing; excluded with the last error.
    Unresolved(String),
}

fn ask_with_retry(
    client: &mut dyn VlmClient,
    template: TemplateId,
    image: &ImageRef,
    prompt: &str,
) -> Result<String, String> {
    let mut last = String::new();
    for _ in 0..VLM_ATTEMPTS {
        match client.ask(template, image, prompt) {
            Ok(r) => return Ok(r),
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}

/// Keeps a datapoint only if the model names the entity from its image,
/// answers the textual question with the image, and cannot answer the
/// visual question from trivial images alone.
pub fn vlm_filter_protocol<R: Rng>(dp: &QADatapoint, client: &mut dyn VlmClient, rng: &mut R) -> VlmVerdict {
    let image = ImageRef::Entity(dp.image_id.clone());
    let ident = match ask_with_retry(client, TemplateId::VlmIdentify, &image, prompts::IDENTIFY_PROMPT) {
        Ok(r) => r,
        Err(e) => return VlmVerdict::Unresolved(e),
    };
    if !two_way_inclusion(&ident, &dp.entity) {
        return VlmVerdict::Reject(VlmStage::Identification);
    }
    let full = match ask_with_retry(client, TemplateId::VlmFullInfo, &image, &dp.textual_question) {
        Ok(r) => r,
        Err(e) => return VlmVerdict::Unresolved(e),
    };
    if !two_way_inclusion(&full, &dp.answer) {
        return VlmVerdict::Reject(VlmStage::FullInfo);
    }
    let mut outputs = Vec::with_capacity(4);
    for kind in TrivialKind::ALL {
        match ask_with_retry(
            client,
            TemplateId::VlmTrivial,
            &ImageRef::Trivial(kind),
            &dp.visual_question,
        ) {
            Ok(r) => outputs.push(r),
            Err(e) => return VlmVerdict::Unresolved(e),
        }
    }
    let outputs: [String; 4] = outputs.try_into().expect("four trivial images");
    if two_way_inclusion(&majority_vote(&outputs, rng), &dp.answer) {
        return VlmVerdict::Reject(VlmStage::LanguagePrior);
    }
    VlmVerdict::Keep
}
