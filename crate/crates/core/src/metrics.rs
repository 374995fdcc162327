//! Response scoring: VQA accuracy, CIDEr-D, and multi-seed aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::par;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate response for query {0:?}")]
    DuplicateResponse(String),
    #[error("response for unknown query {0:?}")]
    UnknownQuery(String),
    #[error("query {0:?} has no human answers")]
    NoAnswers(String),
    #[error("candidate {0:?} has no references")]
    NoReferences(String),
    #[error("nothing to score")]
    EmptyCorpus,
    #[error("cannot aggregate {0:?} with {1:?} reports")]
    MetricMismatch(Metric, Metric),
}

// Official VQA answer normalization tables.
const CONTRACTIONS: &[(&str, &str)] = &[
    ("aint", "ain't"), ("arent", "aren't"), ("cant", "can't"), ("couldve", "could've"),
    ("couldnt", "couldn't"), ("couldn'tve", "couldn't've"), ("couldnt've", "couldn't've"),
    ("didnt", "didn't"), ("doesnt", "doesn't"), ("dont", "don't"), ("hadnt", "hadn't"),
    ("hadnt've", "hadn't've"), ("hadn'tve", "hadn't've"), ("hasnt", "hasn't"),
    ("havent", "haven't"), ("hed", "he'd"), ("hed've", "he'd've"), ("he'dve", "he'd've"),
    ("hes", "he's"), ("howd", "how'd"), ("howll", "how'll"), ("hows", "how's"),
    ("Id've", "I'd've"), ("I'dve", "I'd've"), ("Im", "I'm"), ("Ive", "I've"),
    ("isnt", "isn't"), ("itd", "it'd"), ("itd've", "it'd've"), ("it'dve", "it'd've"),
    ("itll", "it'll"), ("let's", "let's"), ("maam", "ma'am"), ("mightnt", "mightn't"),
    ("mightnt've", "mightn't've"), ("mightn'tve", "mightn't've"), ("mightve", "might've"),
    ("mustnt", "mustn't"), ("mustve", "must've"), ("neednt", "needn't"), ("notve", "not've"),
    ("oclock", "o'clock"), ("oughtnt", "oughtn't"), ("ow's'at", "'ow's'at"),
    ("'ows'at", "'ow's'at"), ("'ow'sat", "'ow's'at"), ("shant", "shan't"),
    ("shed've", "she'd've"), ("she'dve", "she'd've"), ("she's", "she's"),
    ("shouldve", "should've"), ("shouldnt", "shouldn't"), ("shouldnt've", "shouldn't've"),
    ("shouldn'tve", "shouldn't've"), ("somebody'd", "somebodyd"),
    ("somebodyd've", "somebody'd've"), ("somebody'dve", "somebody'd've"),
    ("somebodyll", "somebody'll"), ("somebodys", "somebody's"), ("someoned", "someone'd"),
    ("someoned've", "someone'd've"), ("someone'dve", "someone'd've"),
    ("someonell", "someone'll"), ("someones", "someone's"), ("somethingd", "something'd"),
    ("somethingd've", "something'd've"), ("something'dve", "something'd've"),
    ("somethingll", "something'll"), ("thats", "that's"), ("thered", "there'd"),
    ("thered've", "there'd've"), ("there'dve", "there'd've"), ("therere", "there're"),
    ("theres", "there's"), ("theyd", "they'd"), ("theyd've", "they'd've"),
    ("they'dve", "they'd've"), ("theyll", "they'll"), ("theyre", "they're"),
    ("theyve", "they've"), ("twas", "'twas"), ("wasnt", "wasn't"), ("wed've", "we'd've"),
    ("we'dve", "we'd've"), ("weve", "we've"), ("werent", "weren't"), ("whatll", "what'll"),
    ("whatre", "what're"), ("whats", "what's"), ("whatve", "what've"), ("whens", "when's"),
    ("whered", "where'd"), ("wheres", "where's"), ("whereve", "where've"), ("whod", "who'd"),
    ("whod've", "who'd've"), ("who'dve", "who'd've"), ("wholl", "who'll"), ("whos", "who's"),
    ("whove", "who've"), ("whyll", "why'll"), ("whyre", "why're"), ("whys", "why's"),
    ("wont", "won't"), ("wouldve", "would've"), ("wouldnt", "wouldn't"),
    ("wouldnt've", "wouldn't've"), ("wouldn'tve", "wouldn't've"), ("yall", "y'all"),
    ("yall'll", "y'all'll"), ("y'allll", "y'all'll"), ("yall'd've", "y'all'd've"),
    ("y'alld've", "y'all'd've"), ("y'all'dve", "y'all'd've"), ("youd", "you'd"),
    ("youd've", "you'd've"), ("you'dve", "you'd've"), ("youll", "you'll"),
    ("youre", "you're"), ("youve", "you've"),
];

const NUMBER_WORDS: &[(&str, &str)] = &[
    ("none", "0"), ("zero", "0"), ("one", "1"), ("two", "2"), ("three", "3"), ("four", "4"),
    ("five", "5"), ("six", "6"), ("seven", "7"), ("eight", "8"), ("nine", "9"), ("ten", "10"),
];

const ARTICLES: &[&str] = &["a", "an", "the"];

const PUNCT: &[char] = &[
    ';', '/', '[', ']', '"', '{', '}', '(', ')', '=', '+', '\\', '_', '-', '>', '<', '@', '`', ',', '?', '!',
];

fn has_digit_comma_digit(s: &str) -> bool {
    let c: Vec<char> = s.chars().collect();
    c.windows(3)
        .any(|w| w[0].is_ascii_digit() && w[1] == ',' && w[2].is_ascii_digit())
}

fn process_punctuation(text: &str) -> String {
    let strip_all = has_digit_comma_digit(text);
    let mut out = text.to_owned();
    for &p in PUNCT {
        let spaced = text.contains(&format!("{p} ")) || text.contains(&format!(" {p}"));
        out = out.replace(p, if spaced || strip_all { "" } else { " " });
    }
    // Periods go unless they precede a digit (keeps "1.5").
    let chars: Vec<char> = out.chars().collect();
    chars
        .iter()
        .enumerate()
        .filter(|&(i, &c)| c != '.' || chars.get(i + 1).is_some_and(|n| n.is_ascii_digit()))
        .map(|(_, &c)| c)
        .collect()
}

fn process_digit_article(text: &str) -> String {
    let lowered = text.to_lowercase();
    let words: Vec<&str> = lowered
        .split_whitespace()
        .map(|w| {
            NUMBER_WORDS
                .iter()
                .find(|(k, _)| *k == w)
                .map_or(w, |(_, v)| *v)
        })
        .filter(|w| !ARTICLES.contains(w))
        .map(|w| CONTRACTIONS.iter().find(|(k, _)| *k == w).map_or(w, |(_, v)| *v))
        .collect();
    words.join(" ")
}

/// Official VQA answer normalization.
pub fn normalize_answer(s: &str) -> String {
    let s = s.replace(['\n', '\t'], " ");
    process_digit_article(&process_punctuation(s.trim()))
}

/// Leave-one-out VQA accuracy: each fold drops one human answer and scores
/// `min(matches / 3, 1)` against the rest; the result is the fold mean.
pub fn vqa_accuracy(pred: &str, human_answers: &[String]) -> Result<f64, MetricError> {
    if human_answers.is_empty() {
        return Err(MetricError::NoAnswers(String::new()));
    }
    let pred = normalize_answer(pred);
    let n = human_answers.len();
    let total = human_answers.iter().filter(|a| normalize_answer(a) == pred).count();
    // Every fold holding out a match sees total - 1 matches; every other fold
    // sees total. Grouping the two fold values keeps the result independent
    // of answer order.
    let fold = |m: usize| (m as f64 / 3.0).min(1.0);
    let sum = if total == 0 {
        0.0
    } else {
        total as f64 * fold(total - 1) + (n - total) as f64 * fold(total)
    };
    Ok(sum / n as f64)
}

/// Accuracy rule per answer-list size: the leave-one-out formula for
/// 10-annotator lists, normalized exact match otherwise.
pub fn answer_accuracy(pred: &str, human_answers: &[String]) -> Result<f64, MetricError> {
    if human_answers.len() >= 10 {
        return vqa_accuracy(pred, human_answers);
    }
    if human_answers.is_empty() {
        return Err(MetricError::NoAnswers(String::new()));
    }
    let pred = normalize_answer(pred);
    Ok(f64::from(u8::from(
        human_answers.iter().any(|a| normalize_answer(a) == pred),
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    VqaAccuracy,
    Cider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metric: Metric,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Per-run means, ascending.
    pub runs: Vec<f64>,
    pub mean_of_runs: f64,
    /// Population standard deviation of `runs`.
    pub std_of_runs: f64,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

impl ScoreReport {
    /// Report for a single run.
    pub fn single(metric: Metric, per_query: BTreeMap<String, f64>) -> Self {
        let m = mean(per_query.values().copied());
        Self {
            metric,
            per_query,
            mean: m,
            runs: vec![m],
            mean_of_runs: m,
            std_of_runs: 0.0,
        }
    }
}

/// Combines per-seed reports. Inputs are sorted before summation, so any
/// permutation of `reports` gives a bit-identical result.
pub fn aggregate_runs(reports: &[ScoreReport]) -> Result<ScoreReport, MetricError> {
    let first = reports.first().ok_or(MetricError::EmptyCorpus)?;
    if let Some(r) = reports.iter().find(|r| r.metric != first.metric) {
        return Err(MetricError::MetricMismatch(first.metric, r.metric));
    }
    let mut by_id: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (id, v) in &r.per_query {
            by_id.entry(id.clone()).or_default().push(*v);
        }
    }
    let per_query: BTreeMap<String, f64> = by_id
        .into_iter()
        .map(|(id, vals)| (id, mean(sorted(vals))))
        .collect();
    let runs = sorted(reports.iter().map(|r| r.mean).collect());
    let mean_of_runs = mean(runs.iter().copied());
    let var = mean(runs.iter().map(|x| (x - mean_of_runs) * (x - mean_of_runs)));
    Ok(ScoreReport {
        metric: first.metric,
        mean: mean(per_query.values().copied()),
        per_query,
        runs,
        mean_of_runs,
        std_of_runs: var.sqrt(),
    })
}

/// One model response from the external runner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub query_id: String,
    pub response: String,
}

pub fn read_responses(reader: impl BufRead) -> Result<Vec<Response>, MetricError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let parse = |reason: String| MetricError::Parse { line: i + 1, reason };
        let line = line.map_err(|e| parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Response = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if !seen.insert(r.query_id.clone()) {
            return Err(MetricError::DuplicateResponse(r.query_id));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_responses(path: impl AsRef<Path>) -> Result<Vec<Response>, MetricError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| MetricError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_responses(BufReader::new(file))
}

/// Accuracy of every response against its record's human answers.
pub fn score_vqa(responses: &[Response], records: &[Record]) -> Result<ScoreReport, MetricError> {
    let by_id: HashMap<&str, &Record> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let scored = par::map(responses, |resp| {
        let record = by_id
            .get(resp.query_id.as_str())
            .ok_or_else(|| MetricError::UnknownQuery(resp.query_id.clone()))?;
        let acc = answer_accuracy(&resp.response, &record.answers).map_err(|e| match e {
            MetricError::NoAnswers(_) => MetricError::NoAnswers(resp.query_id.clone()),
            other => other,
        })?;
        Ok((resp.query_id.clone(), acc))
    });
    let per_query = scored.into_iter().collect::<Result<BTreeMap<_, _>, MetricError>>()?;
    Ok(ScoreReport::single(Metric::VqaAccuracy, per_query))
}

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// Lowercases, turns punctuation other than apostrophes into spaces, and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// n-gram counts for n = 1..=4, keyed by space-joined tokens.
type Grams = [BTreeMap<String, u32>; CIDER_N];

fn ngrams(tokens: &[String]) -> Grams {
    let mut out: Grams = Default::default();
    for (n, counts) in out.iter_mut().enumerate() {
        for w in tokens.windows(n + 1) {
            *counts.entry(w.join(" ")).or_insert(0) += 1;
        }
    }
    out
}

struct Weighted {
    vec: [BTreeMap<String, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    len: usize,
}

/// Document frequencies over reference sets; built once, then read-only.
struct IdfTable {
    df: [HashMap<String, usize>; CIDER_N],
    log_corpus: f64,
}

impl IdfTable {
    fn new<'a>(reference_sets: impl Iterator<Item = &'a [Vec<String>]>) -> Self {
        let mut df: [HashMap<String, usize>; CIDER_N] = Default::default();
        let mut corpus = 0usize;
        for refs in reference_sets {
            corpus += 1;
            let mut present: [HashSet<String>; CIDER_N] = Default::default();
            for r in refs {
                for (n, grams) in ngrams(r).into_iter().enumerate() {
                    present[n].extend(grams.into_keys());
                }
            }
            for (n, set) in present.into_iter().enumerate() {
                for g in set {
                    *df[n].entry(g).or_insert(0) += 1;
                }
            }
        }
        Self {
            df,
            log_corpus: (corpus as f64).ln(),
        }
    }

    fn weigh(&self, tokens: &[String]) -> Weighted {
        let mut vec: [BTreeMap<String, f64>; CIDER_N] = Default::default();
        let mut norm = [0.0; CIDER_N];
        for (n, grams) in ngrams(tokens).into_iter().enumerate() {
            for (g, tf) in grams {
                let df = self.df[n].get(&g).copied().unwrap_or(0).max(1) as f64;
                let w = f64::from(tf) * (self.log_corpus - df.ln());
                norm[n] += w * w;
                vec[n].insert(g, w);
            }
            norm[n] = norm[n].sqrt();
        }
        Weighted {
            vec,
            norm,
            len: tokens.len(),
        }
    }
}

type Tokens = Vec<String>;

fn cider_pair(cand: &Weighted, reference: &Weighted) -> [f64; CIDER_N] {
    let delta = cand.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    std::array::from_fn(|n| {
        let mut v: f64 = cand.vec[n]
            .iter()
            .map(|(g, &wc)| {
                let wr = reference.vec[n].get(g).copied().unwrap_or(0.0);
                wc.min(wr) * wr
            })
            .sum();
        if cand.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            v /= cand.norm[n] * reference.norm[n];
        }
        v * penalty
    })
}

/// CIDEr-D per image and corpus mean.
///
/// IDF uses the reference sets of the scored images (candidates excluded),
/// natural log, df = number of images whose references contain the gram.
/// Each image's score is 10 × the mean over n of the per-reference mean
/// clipped, length-penalized TF-IDF cosine.
pub fn cider(
    candidates: &BTreeMap<String, String>,
    references: &BTreeMap<String, Vec<String>>,
) -> Result<ScoreReport, MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let mut items: Vec<(&str, Tokens, Vec<Tokens>)> = Vec::with_capacity(candidates.len());
    for (id, text) in candidates {
        let refs = references
            .get(id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| MetricError::NoReferences(id.clone()))?;
        items.push((id, tokenize(text), refs.iter().map(|r| tokenize(r)).collect()));
    }
    let idf = IdfTable::new(items.iter().map(|(_, _, refs)| refs.as_slice()));
    let scores = par::map(&items, |(id, cand, refs)| {
        if cand.is_empty() {
            log::warn!("empty candidate for {id}; scoring 0");
            return 0.0;
        }
        let c = idf.weigh(cand);
        let mut total = [0.0; CIDER_N];
        for r in refs {
            let v = cider_pair(&c, &idf.weigh(r));
            for n in 0..CIDER_N {
                total[n] += v[n];
            }
        }
        let avg = total.iter().sum::<f64>() / CIDER_N as f64;
        avg / refs.len() as f64 * 10.0
    });
    let per_query = items
        .iter()
        .zip(scores)
        .map(|((id, _, _), s)| ((*id).to_owned(), s))
        .collect();
    Ok(ScoreReport::single(Metric::Cider, per_query))
}

/// CIDEr of responses against each record's reference captions.
pub fn score_cider(responses: &[Response], records: &[Record]) -> Result<ScoreReport, MetricError> {
    let by_id: HashMap<&str, &Record> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut candidates = BTreeMap::new();
    let mut references = BTreeMap::new();
    for resp in responses {
        let record = by_id
            .get(resp.query_id.as_str())
            .ok_or_else(|| MetricError::UnknownQuery(resp.query_id.clone()))?;
        candidates.insert(resp.query_id.clone(), resp.response.clone());
        references.insert(resp.query_id.clone(), record.captions.clone());
    }
    cider(&candidates, &references)
}
