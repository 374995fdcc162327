//! Interleaved prompt assembly: demonstrations followed by the query.
//!
//! A prompt is a list of segments, each with an optional image slot and
//! rendered text. The image slot is structural; tokenization is left to the
//! model runner.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Record, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("template {name}: {reason}")]
    Template { name: &'static str, reason: String },
    #[error("template file {path}: {reason}")]
    TemplateFile { path: PathBuf, reason: String },
    #[error("record {id:?} has no {field} for the {template} template")]
    MissingText {
        id: String,
        field: &'static str,
        template: &'static str,
    },
    #[error("demo at support index {index} has no similarity score; ascending_similarity ordering needs scores")]
    MissingScore { index: usize },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Text templates with `{question}`, `{answer}` and `{caption}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    pub vqa_demo: String,
    pub vqa_query: String,
    pub caption_demo: String,
    pub caption_query: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            vqa_demo: "Question: {question} Short answer: {answer}".into(),
            vqa_query: "Question: {question} Short answer:".into(),
            caption_demo: "Output: {caption}".into(),
            caption_query: "Output:".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Question,
    Answer,
    Caption,
}

enum Piece<'a> {
    Lit(&'a str),
    Slot(Slot),
}

fn parse_template<'a>(name: &'static str, src: &'a str) -> Result<Vec<Piece<'a>>, PromptError> {
    let mut pieces = Vec::new();
    let mut rest = src;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Lit(&rest[..open]));
        }
        let close = rest[open..].find('}').ok_or_else(|| PromptError::Template {
            name,
            reason: "unclosed '{'".into(),
        })? + open;
        let slot = match &rest[open + 1..close] {
            "question" => Slot::Question,
            "answer" => Slot::Answer,
            "caption" => Slot::Caption,
            other => {
                return Err(PromptError::Template {
                    name,
                    reason: format!("unknown placeholder {{{other}}}"),
                })
            }
        };
        pieces.push(Piece::Slot(slot));
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Lit(rest));
    }
    Ok(pieces)
}

impl TemplateSet {
    /// Loads TOML (`.toml`) or JSON (anything else).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_owned(),
            source,
        })?;
        let bad = |reason: String| PromptError::TemplateFile {
            path: path.to_owned(),
            reason,
        };
        let set: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
        };
        set.validate()?;
        Ok(set)
    }

    /// Query templates must stop at the answer cue: no answer or caption slot.
    pub fn validate(&self) -> Result<(), PromptError> {
        let checks: [(&'static str, &str, bool); 4] = [
            ("vqa_demo", &self.vqa_demo, false),
            ("vqa_query", &self.vqa_query, true),
            ("caption_demo", &self.caption_demo, false),
            ("caption_query", &self.caption_query, true),
        ];
        for (name, src, is_query) in checks {
            let pieces = parse_template(name, src)?;
            if is_query
                && pieces
                    .iter()
                    .any(|p| matches!(p, Piece::Slot(Slot::Answer | Slot::Caption)))
            {
                return Err(PromptError::Template {
                    name,
                    reason: "query templates cannot include the response".into(),
                });
            }
        }
        Ok(())
    }

    fn render(&self, record: &Record, task: TaskKind, role: Role) -> Result<String, PromptError> {
        let (name, src) = match (task, role) {
            (TaskKind::Vqa, Role::Demo) => ("vqa_demo", &self.vqa_demo),
            (TaskKind::Vqa, Role::Query) => ("vqa_query", &self.vqa_query),
            (TaskKind::Captioning, Role::Demo) => ("caption_demo", &self.caption_demo),
            (TaskKind::Captioning, Role::Query) => ("caption_query", &self.caption_query),
        };
        let missing = |field| PromptError::MissingText {
            id: record.id.clone(),
            field,
            template: name,
        };
        let mut out = String::new();
        for piece in parse_template(name, src)? {
            match piece {
                Piece::Lit(s) => out.push_str(s),
                Piece::Slot(Slot::Question) => {
                    out.push_str(record.question.as_deref().ok_or_else(|| missing("question"))?)
                }
                Piece::Slot(Slot::Answer) => {
                    out.push_str(record.demo_answer().ok_or_else(|| missing("answer"))?)
                }
                Piece::Slot(Slot::Caption) => {
                    out.push_str(record.demo_caption().ok_or_else(|| missing("caption"))?)
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Demo,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub text: String,
    pub role: Role,
}

/// Descriptors carried alongside every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub method: String,
    pub shots: usize,
    pub perturbation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub query_id: String,
    pub meta: PromptMeta,
    pub segments: Vec<Segment>,
}

/// Demos followed by the query, one segment each.
pub fn build_prompt(
    query: &Record,
    demos: &[Record],
    task: TaskKind,
    templates: &TemplateSet,
    meta: PromptMeta,
) -> Result<PromptSpec, PromptError> {
    let mut segments = Vec::with_capacity(demos.len() + 1);
    for d in demos {
        segments.push(Segment {
            image_ref: d.image_ref.clone(),
            text: templates.render(d, task, Role::Demo)?,
            role: Role::Demo,
        });
    }
    segments.push(Segment {
        image_ref: query.image_ref.clone(),
        text: templates.render(query, task, Role::Query)?,
        role: Role::Query,
    });
    Ok(PromptSpec {
        query_id: query.id.clone(),
        meta,
        segments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Least similar first, most similar adjacent to the query.
    AscendingSimilarity,
    Given,
}

impl std::str::FromStr for OrderPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ascending_similarity" => Ok(OrderPolicy::AscendingSimilarity),
            "given" => Ok(OrderPolicy::Given),
            other => Err(format!("unknown order policy {other:?}")),
        }
    }
}

/// A demo with its support index and optional selection score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedDemo<T> {
    pub index: usize,
    pub score: Option<f64>,
    pub item: T,
}

/// Orders demos by `policy`. Ascending ties go to the lower support index,
/// so the result does not depend on input order.
pub fn order_demos<T>(mut demos: Vec<RankedDemo<T>>, policy: OrderPolicy) -> Result<Vec<RankedDemo<T>>, PromptError> {
    if policy == OrderPolicy::Given {
        return Ok(demos);
    }
    if let Some(d) = demos.iter().find(|d| d.score.is_none()) {
        return Err(PromptError::MissingScore { index: d.index });
    }
    demos.sort_by(|a, b| {
        let (sa, sb) = (a.score.expect("checked"), b.score.expect("checked"));
        sa.total_cmp(&sb).then(a.index.cmp(&b.index))
    });
    Ok(demos)
}

/// Writes one JSON object per line.
pub fn emit_prompts(specs: &[PromptSpec], path: impl AsRef<Path>) -> Result<(), PromptError> {
    let path = path.as_ref();
    let io_err = |source| PromptError::Io {
        path: path.to_owned(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for spec in specs {
        serde_json::to_writer(&mut w, spec).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_prompts(path: impl AsRef<Path>) -> Result<Vec<PromptSpec>, PromptError> {
    let path = path.as_ref();
    let io_err = |source| PromptError::Io {
        path: path.to_owned(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PromptError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, q: &str, a: &str) -> Record {
        Record {
            id: id.into(),
            image_ref: Some(format!("img-{id}")),
            question: Some(q.into()),
            answers: vec![a.into()],
            captions: vec![],
            proxy_text: None,
        }
    }

    fn meta() -> PromptMeta {
        PromptMeta {
            method: "mmices".into(),
            shots: 2,
            perturbation: "standard".into(),
            prefilter: Some(200),
            seed: None,
            perturb_seed: None,
        }
    }

    #[test]
    fn zero_shot_is_query_only() {
        let q = rec("q", "What sign is this?", "stop");
        let p = build_prompt(&q, &[], TaskKind::Vqa, &TemplateSet::default(), meta()).unwrap();
        assert_eq!(p.segments.len(), 1);
        assert_eq!(p.segments[0].role, Role::Query);
        assert_eq!(p.segments[0].text, "Question: What sign is this? Short answer:");
    }

    #[test]
    fn two_shot_vqa() {
        let q = rec("q", "What sign is this?", "stop");
        let demos = [rec("a", "Is it red?", "yes"), rec("b", "How many?", "2")];
        let p = build_prompt(&q, &demos, TaskKind::Vqa, &TemplateSet::default(), meta()).unwrap();
        assert_eq!(p.segments.len(), 3);
        assert_eq!(p.segments[0].text, "Question: Is it red? Short answer: yes");
        assert_eq!(p.segments[0].image_ref.as_deref(), Some("img-a"));
        assert!(p.segments[2].text.ends_with("Short answer:"));
    }

    #[test]
    fn captioning_templates() {
        let mut d = rec("a", "", "");
        d.question = None;
        d.answers.clear();
        d.captions = vec!["a cat on a mat".into()];
        let q = Record {
            id: "q".into(),
            captions: vec!["ref".into()],
            ..d.clone()
        };
        let p = build_prompt(&q, &[d], TaskKind::Captioning, &TemplateSet::default(), meta()).unwrap();
        assert_eq!(p.segments[0].text, "Output: a cat on a mat");
        assert_eq!(p.segments[1].text, "Output:");
    }

    #[test]
    fn missing_text_is_an_error() {
        let q = rec("q", "Q?", "a");
        let mut d = rec("d", "Q?", "a");
        d.answers.clear();
        assert!(matches!(
            build_prompt(&q, &[d], TaskKind::Vqa, &TemplateSet::default(), meta()),
            Err(PromptError::MissingText { field: "answer", .. })
        ));
    }

    #[test]
    fn template_validation() {
        let t = TemplateSet {
            vqa_query: "Q: {question} A: {answer}".into(),
            ..TemplateSet::default()
        };
        assert!(t.validate().is_err());
        let t = TemplateSet {
            vqa_demo: "{questoin}".into(),
            ..TemplateSet::default()
        };
        assert!(t.validate().is_err());
        assert!(TemplateSet::default().validate().is_ok());
    }

    fn ranked(scores: &[f64]) -> Vec<RankedDemo<usize>> {
        scores
            .iter()
            .enumerate()
            .map(|(i, &s)| RankedDemo {
                index: i,
                score: Some(s),
                item: i,
            })
            .collect()
    }

    fn order(scores: &[f64]) -> Vec<usize> {
        order_demos(ranked(scores), OrderPolicy::AscendingSimilarity)
            .unwrap()
            .into_iter()
            .map(|d| d.item)
            .collect()
    }

    #[test]
    fn ascending_puts_best_last() {
        assert_eq!(order(&[0.9, 0.1]), vec![1, 0]);
        assert_eq!(order(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
        let given = order_demos(ranked(&[0.9, 0.1]), OrderPolicy::Given).unwrap();
        assert_eq!(given[0].item, 0);
        let mut unscored = ranked(&[0.1]);
        unscored[0].score = None;
        assert!(order_demos(unscored, OrderPolicy::AscendingSimilarity).is_err());
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn ascending_order_ignores_input_permutation() {
        let scores = [0.3, 0.7, 0.3, 0.1, 0.7];
        let expected = order(&scores);
        for perm in permutations(scores.len()) {
            let input: Vec<RankedDemo<usize>> = perm
                .iter()
                .map(|&i| RankedDemo {
                    index: i,
                    score: Some(scores[i]),
                    item: i,
                })
                .collect();
            let got: Vec<usize> = order_demos(input, OrderPolicy::AscendingSimilarity)
                .unwrap()
                .into_iter()
                .map(|d| d.item)
                .collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn emit_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        emit_prompts(&[], &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"");

        let q = rec("q", "What sign is this?", "stop");
        let spec = build_prompt(&q, &[rec("a", "Is it?", "yes")], TaskKind::Vqa, &TemplateSet::default(), meta()).unwrap();
        emit_prompts(std::slice::from_ref(&spec), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = load_prompts(&path).unwrap();
        assert_eq!(back, vec![spec]);
        assert_eq!(back[0].meta.method, "mmices");
        emit_prompts(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
    }
}
