//! Language-model access and transcripts. A [`RecordingClient`] logs every
//! call; a [`ReplayClient`] answers from a saved log so a build can be
//! rerun offline.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrivialKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    QaExtraction,
    Ambiguity,
    QuestionAnswering,
    Duplicate,
    McqaConversion,
    VlmIdentify,
    VlmFullInfo,
    VlmTrivial,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no logged response for {template:?} prompt {prompt:?}")]
    Missing { template: TemplateId, prompt: String },
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("transcript line {line}: {message}")]
    Transcript { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ImageRef {
    Entity(String),
    Trivial(TrivialKind),
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageRef::Entity(id) => write!(f, "entity:{id}"),
            ImageRef::Trivial(k) => write!(f, "trivial:{}", k.as_str()),
        }
    }
}

pub trait LmClient {
    fn complete(&mut self, template: TemplateId, prompt: &str) -> Result<String, ClientError>;
}

pub trait VlmClient {
    fn ask(&mut self, template: TemplateId, image: &ImageRef, prompt: &str) -> Result<String, ClientError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub template_id: TemplateId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn push(&mut self, template_id: TemplateId, image: Option<String>, prompt: &str, response: &str) {
        self.entries.push(TranscriptEntry {
            template_id,
            image,
            prompt: prompt.into(),
            response: response.into(),
        });
    }

    /// One JSON object per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, ClientError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(line).map_err(|e| ClientError::Transcript {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn read<R: BufRead>(mut reader: R) -> Result<Self, ClientError> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        Self::parse(&text)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), ClientError> {
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("transcript entries serialize");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

type Key = (TemplateId, Option<String>, String);

/// Answers from a transcript. Repeated identical calls consume logged
/// responses in order and then keep returning the last one.
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    responses: HashMap<Key, (VecDeque<String>, String)>,
    log: Transcript,
}

impl ReplayClient {
    pub fn new(transcript: &Transcript) -> Self {
        let mut responses: HashMap<Key, (VecDeque<String>, String)> = HashMap::new();
        for e in &transcript.entries {
            let slot = responses
                .entry((e.template_id, e.image.clone(), e.prompt.clone()))
                .or_default();
            slot.0.push_back(e.response.clone());
            slot.1 = e.response.clone();
        }
        Self {
            responses,
            log: Transcript::default(),
        }
    }

    /// Calls served so far.
    pub fn log(&self) -> &Transcript {
        &self.log
    }

    fn lookup(&mut self, template: TemplateId, image: Option<String>, prompt: &str) -> Result<String, ClientError> {
        let key = (template, image.clone(), prompt.to_string());
        let (queue, last) = self.responses.get_mut(&key).ok_or_else(|| ClientError::Missing {
            template,
            prompt: prompt.into(),
        })?;
        let r = queue.pop_front().unwrap_or_else(|| last.clone());
        self.log.push(template, image, prompt, &r);
        Ok(r)
    }
}

impl LmClient for ReplayClient {
    fn complete(&mut self, template: TemplateId, prompt: &str) -> Result<String, ClientError> {
        self.lookup(template, None, prompt)
    }
}

impl VlmClient for ReplayClient {
    fn ask(&mut self, template: TemplateId, image: &ImageRef, prompt: &str) -> Result<String, ClientError> {
        self.lookup(template, Some(image.to_string()), prompt)
    }
}

/// Wraps a client and logs every successful call.
#[derive(Debug, Clone)]
pub struct RecordingClient<C> {
    inner: C,
    log: Transcript,
}

impl<C> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            log: Transcript::default(),
        }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.log
    }

    pub fn into_parts(self) -> (C, Transcript) {
        (self.inner, self.log)
    }
}

impl<C: LmClient> LmClient for RecordingClient<C> {
    fn complete(&mut self, template: TemplateId, prompt: &str) -> Result<String, ClientError> {
        let r = self.inner.complete(template, prompt)?;
        self.log.push(template, None, prompt, &r);
        Ok(r)
    }
}

impl<C: VlmClient> VlmClient for RecordingClient<C> {
    fn ask(&mut self, template: TemplateId, image: &ImageRef, prompt: &str) -> Result<String, ClientError> {
        let r = self.inner.ask(template, image, prompt)?;
        self.log.push(template, Some(image.to_string()), prompt, &r);
        Ok(r)
    }
}
