//! Task records and their binding to embedding rows.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Vqa,
    Captioning,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Vqa => "vqa",
            TaskKind::Captioning => "captioning",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vqa" => Ok(TaskKind::Vqa),
            "captioning" | "caption" => Ok(TaskKind::Captioning),
            other => Err(format!("unknown task kind {other:?} (expected vqa or captioning)")),
        }
    }
}

/// One dataset item.
///
/// `image_ref` is `None` only after a perturbation removed the image; loaded
/// records always carry one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    #[serde(default)]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_text: Option<String>,
}

impl Record {
    /// The answer shown when this record is used as a demonstration: the most
    /// frequent human answer, earliest occurrence on ties.
    pub fn demo_answer(&self) -> Option<&str> {
        let mut best: Option<(&str, usize)> = None;
        for (i, a) in self.answers.iter().enumerate() {
            if self.answers[..i].contains(a) {
                continue;
            }
            let count = self.answers[i..].iter().filter(|b| *b == a).count();
            if best.is_none_or(|(_, c)| count > c) {
                best = Some((a, count));
            }
        }
        best.map(|(a, _)| a)
    }

    pub fn demo_caption(&self) -> Option<&str> {
        self.captions.first().map(String::as_str)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: malformed JSON: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: record {id:?} is missing required field `{field}`")]
    MissingField {
        line: usize,
        id: String,
        field: &'static str,
    },
    #[error("line {line}: duplicate record id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("ids missing from the visual matrix: {visual:?}; missing from the textual matrix: {textual:?}")]
    MissingIds {
        visual: Vec<String>,
        textual: Vec<String>,
    },
    #[error("captioning record {id:?} has no captions")]
    NoCaptions { id: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    image_ref: Option<String>,
    question: Option<String>,
    answers: Option<Vec<String>>,
    captions: Option<Vec<String>>,
    proxy_text: Option<String>,
}

/// Parses one JSONL line and validates it for `task`.
pub fn parse_record(line_no: usize, line: &str, task: TaskKind) -> Result<Record, DatasetError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
        line: line_no,
        reason: e.to_string(),
    })?;
    let missing = |id: &str, field| DatasetError::MissingField {
        line: line_no,
        id: id.to_owned(),
        field,
    };
    let id = raw.id.ok_or_else(|| missing("", "id"))?;
    let image_ref = raw.image_ref.ok_or_else(|| missing(&id, "image_ref"))?;
    let answers = raw.answers.unwrap_or_default();
    let captions = raw.captions.unwrap_or_default();
    match task {
        TaskKind::Vqa => {
            if raw.question.is_none() {
                return Err(missing(&id, "question"));
            }
            if answers.is_empty() {
                return Err(missing(&id, "answers"));
            }
        }
        TaskKind::Captioning => {
            if captions.is_empty() {
                return Err(missing(&id, "captions"));
            }
        }
    }
    Ok(Record {
        id,
        image_ref: Some(image_ref),
        question: raw.question,
        answers,
        captions,
        proxy_text: raw.proxy_text,
    })
}

/// Reads JSONL records. Blank lines are skipped; line numbers are 1-based.
pub fn read_records(reader: impl BufRead, task: TaskKind) -> Result<Vec<Record>, DatasetError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(line_no, &line, task)?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_records(path: impl AsRef<Path>, task: TaskKind) -> Result<Vec<Record>, DatasetError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_records(BufReader::new(file), task)
}

/// Records whose IDs all resolve in both modality matrices.
///
/// `visual_rows[i]` / `textual_rows[i]` are the matrix rows of `records[i]`;
/// position `i` is the support index used for tie-breaking everywhere.
#[derive(Debug, Clone)]
pub struct BoundSet {
    records: Vec<Record>,
    visual: Arc<EmbeddingMatrix>,
    textual: Arc<EmbeddingMatrix>,
    visual_rows: Vec<usize>,
    textual_rows: Vec<usize>,
    task: TaskKind,
}

/// Binds records to matrices by ID, preserving record order.
pub fn bind(
    records: Vec<Record>,
    visual: Arc<EmbeddingMatrix>,
    textual: Arc<EmbeddingMatrix>,
    task: TaskKind,
) -> Result<BoundSet, DatasetError> {
    let mut missing_visual = Vec::new();
    let mut missing_textual = Vec::new();
    let mut visual_rows = Vec::with_capacity(records.len());
    let mut textual_rows = Vec::with_capacity(records.len());
    for r in &records {
        match visual.row_index(&r.id) {
            Some(i) => visual_rows.push(i),
            None => missing_visual.push(r.id.clone()),
        }
        match textual.row_index(&r.id) {
            Some(i) => textual_rows.push(i),
            None => missing_textual.push(r.id.clone()),
        }
    }
    if !missing_visual.is_empty() || !missing_textual.is_empty() {
        return Err(DatasetError::MissingIds {
            visual: missing_visual,
            textual: missing_textual,
        });
    }
    if task == TaskKind::Captioning {
        if let Some(r) = records.iter().find(|r| r.captions.is_empty()) {
            return Err(DatasetError::NoCaptions { id: r.id.clone() });
        }
    }
    Ok(BoundSet {
        records,
        visual,
        textual,
        visual_rows,
        textual_rows,
        task,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

impl BoundSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &Record {
        &self.records[i]
    }

    pub fn matrix(&self, modality: Modality) -> &EmbeddingMatrix {
        match modality {
            Modality::Visual => &self.visual,
            Modality::Textual => &self.textual,
        }
    }

    /// Matrix row of record `i` for `modality`.
    pub fn row_of(&self, modality: Modality, i: usize) -> usize {
        match modality {
            Modality::Visual => self.visual_rows[i],
            Modality::Textual => self.textual_rows[i],
        }
    }

    pub fn vector(&self, modality: Modality, i: usize) -> &[f32] {
        self.matrix(modality).row(self.row_of(modality, i))
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}
