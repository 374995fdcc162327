//! Demonstration perturbations used to measure how much each part of the
//! context matters: removing or blanking images, dropping the query image,
//! and corrupting questions or labels.
//!
//! Each kind changes only the fields it names. Kinds are applied one at a
//! time; there is no way to stack two of them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Record, TaskKind};
use crate::rng::query_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Standard,
    DemoNoImages,
    DemoBlankImages,
    NoQueryImage,
    DiffAnswerSameQuestion,
    RandomQuestion,
    RandomWordsLabels,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 7] = [
        PerturbationKind::Standard,
        PerturbationKind::DemoNoImages,
        PerturbationKind::DemoBlankImages,
        PerturbationKind::NoQueryImage,
        PerturbationKind::DiffAnswerSameQuestion,
        PerturbationKind::RandomQuestion,
        PerturbationKind::RandomWordsLabels,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::Standard => "standard",
            PerturbationKind::DemoNoImages => "demo_no_images",
            PerturbationKind::DemoBlankImages => "demo_blank_images",
            PerturbationKind::NoQueryImage => "no_query_image",
            PerturbationKind::DiffAnswerSameQuestion => "diff_answer_same_question",
            PerturbationKind::RandomQuestion => "random_question",
            PerturbationKind::RandomWordsLabels => "random_words_labels",
        }
    }

    pub fn is_randomized(self) -> bool {
        matches!(
            self,
            PerturbationKind::DiffAnswerSameQuestion
                | PerturbationKind::RandomQuestion
                | PerturbationKind::RandomWordsLabels
        )
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = PerturbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split([',', '+']).map(str::trim).collect();
        if parts.len() > 1 {
            return Err(PerturbError::Composite(s.to_owned()));
        }
        PerturbationKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| PerturbError::UnknownKind(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSetting {
    pub kind: PerturbationKind,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub word_pool: Vec<String>,
}

impl PerturbationSetting {
    pub fn standard() -> Self {
        Self {
            kind: PerturbationKind::Standard,
            seed: None,
            word_pool: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.kind.is_randomized() && self.seed.is_none() {
            return Err(PerturbError::MissingSeed(self.kind));
        }
        if self.kind == PerturbationKind::RandomWordsLabels && self.word_pool.is_empty() {
            return Err(PerturbError::EmptyWordPool);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PerturbError {
    #[error("unknown perturbation {0:?}")]
    UnknownKind(String),
    #[error("perturbations cannot be combined ({0:?}); apply one kind at a time")]
    Composite(String),
    #[error("{0} requires a seed")]
    MissingSeed(PerturbationKind),
    #[error("random_words_labels requires a non-empty word pool")]
    EmptyWordPool,
    #[error("demo_blank_images requires a blank_image_id in the manifest")]
    MissingBlankImage,
    #[error("diff_answer_same_question requires a donor index")]
    MissingDonors,
    #[error("random_question requires a question pool")]
    MissingQuestionPool,
    #[error("no other record's question is available for demo {id:?}")]
    NoAlternativeQuestion { id: String },
    #[error("demo {id:?} has no {field} to perturb")]
    MissingField { id: String, field: &'static str },
}

/// One candidate donor answer: the record it comes from and its demo answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Donor {
    pub id: String,
    pub answer: String,
}

/// Records grouped by exact question string.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DonorIndex {
    groups: BTreeMap<String, Vec<Donor>>,
}

impl DonorIndex {
    pub fn group(&self, question: &str) -> &[Donor] {
        self.groups.get(question).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn groups(&self) -> &BTreeMap<String, Vec<Donor>> {
        &self.groups
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Questions asked by only one record; those demos have no donor.
    pub fn singletons(&self) -> impl Iterator<Item = &str> {
        self.groups
            .iter()
            .filter(|(_, g)| g.len() == 1)
            .map(|(q, _)| q.as_str())
    }
}

/// Groups records with a question and a demo answer by exact question text.
pub fn build_donor_index(records: &[Record]) -> DonorIndex {
    let mut groups: BTreeMap<String, Vec<Donor>> = BTreeMap::new();
    for r in records {
        if let (Some(q), Some(a)) = (&r.question, r.demo_answer()) {
            groups.entry(q.clone()).or_default().push(Donor {
                id: r.id.clone(),
                answer: a.to_owned(),
            });
        }
    }
    DonorIndex { groups }
}

/// Side inputs some kinds need.
#[derive(Debug, Clone, Copy, Default)]
pub struct PerturbContext<'a> {
    pub task: Option<TaskKind>,
    pub blank_image_id: Option<&'a str>,
    pub donors: Option<&'a DonorIndex>,
    /// Records whose questions may be swapped in by `random_question`.
    pub question_pool: Option<&'a [Record]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbed {
    pub demos: Vec<Record>,
    pub query: Record,
    /// Demos left unchanged because no same-question donor exists.
    pub skipped: Vec<String>,
}

pub fn apply(
    setting: &PerturbationSetting,
    demos: &[Record],
    query: &Record,
    ctx: &PerturbContext<'_>,
) -> Result<Perturbed, PerturbError> {
    setting.validate()?;
    let mut demos = demos.to_vec();
    let mut query = query.clone();
    let mut skipped = Vec::new();
    let mut rng = query_rng(setting.seed.unwrap_or(0), &query.id);
    match setting.kind {
        PerturbationKind::Standard => {}
        PerturbationKind::DemoNoImages => {
            for d in &mut demos {
                d.image_ref = None;
            }
        }
        PerturbationKind::DemoBlankImages => {
            let blank = ctx.blank_image_id.ok_or(PerturbError::MissingBlankImage)?;
            for d in &mut demos {
                d.image_ref = Some(blank.to_owned());
            }
        }
        PerturbationKind::NoQueryImage => query.image_ref = None,
        PerturbationKind::DiffAnswerSameQuestion => {
            let donors = ctx.donors.ok_or(PerturbError::MissingDonors)?;
            for d in &mut demos {
                let question = d.question.as_deref().ok_or_else(|| PerturbError::MissingField {
                    id: d.id.clone(),
                    field: "question",
                })?;
                let others: Vec<&Donor> = donors.group(question).iter().filter(|x| x.id != d.id).collect();
                match others.choose(&mut rng) {
                    Some(donor) => d.answers = vec![donor.answer.clone()],
                    None => skipped.push(d.id.clone()),
                }
            }
        }
        PerturbationKind::RandomQuestion => {
            let pool = ctx.question_pool.ok_or(PerturbError::MissingQuestionPool)?;
            for d in &mut demos {
                let own = d.question.as_deref().ok_or_else(|| PerturbError::MissingField {
                    id: d.id.clone(),
                    field: "question",
                })?;
                let mut options: Vec<&str> = pool
                    .iter()
                    .filter(|r| r.id != d.id)
                    .filter_map(|r| r.question.as_deref())
                    .filter(|q| *q != own)
                    .collect();
                if options.is_empty() {
                    options = pool
                        .iter()
                        .filter(|r| r.id != d.id)
                        .filter_map(|r| r.question.as_deref())
                        .collect();
                }
                let pick = options
                    .choose(&mut rng)
                    .ok_or_else(|| PerturbError::NoAlternativeQuestion { id: d.id.clone() })?;
                d.question = Some((*pick).to_owned());
            }
        }
        PerturbationKind::RandomWordsLabels => {
            let captioning = match ctx.task {
                Some(t) => t == TaskKind::Captioning,
                None => query.question.is_none(),
            };
            for d in &mut demos {
                let (label, field) = if captioning {
                    (d.demo_caption(), "captions")
                } else {
                    (d.demo_answer(), "answers")
                };
                let label = label.ok_or_else(|| PerturbError::MissingField {
                    id: d.id.clone(),
                    field,
                })?;
                let n = label.split_whitespace().count().max(1);
                let words: Vec<&str> = (0..n)
                    .map(|_| setting.word_pool.choose(&mut rng).expect("validated non-empty").as_str())
                    .collect();
                let replacement = vec![words.join(" ")];
                if captioning {
                    d.captions = replacement;
                } else {
                    d.answers = replacement;
                }
            }
        }
    }
    Ok(Perturbed {
        demos,
        query,
        skipped,
    })
}
