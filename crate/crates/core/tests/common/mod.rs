#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const PERTURBATIONS: [&str; 7] = [
    "standard",
    "demo_no_images",
    "demo_blank_images",
    "no_query_image",
    "diff_answer_same_question",
    "random_question",
    "random_words_labels",
];

pub const METHODS: [&str; 5] = ["random", "rices", "text_only", "text_image", "mmices"];

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub fn golden_dir() -> PathBuf {
    fixture_dir().join("golden")
}

pub fn mmices(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmices"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Vec<u8> {
    let out = mmices(args);
    assert!(
        out.status.success(),
        "mmices {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Runs ingest, select (all methods), build-prompts (every method under the
/// standard setting, every perturbation on mmices) and score. Returns the
/// relative paths of every artifact written under `out`.
pub fn run_pipeline(out: &Path, threads: usize) -> Vec<PathBuf> {
    let fx = fixture_dir();
    let p = |name: &str| fx.join(name).display().to_string();
    let o = |name: &str| out.join(name).display().to_string();
    let threads = threads.to_string();
    let (manifest, support, queries) = (p("manifest.json"), p("support.jsonl"), p("queries.jsonl"));
    let data = [
        "--manifest", &manifest, "--support", &support, "--queries", &queries, "--task", "vqa", "--threads", &threads,
    ];
    let mut written = Vec::new();

    let ingest = ok(&[&["ingest", "--json"][..], &data].concat());
    std::fs::write(out.join("ingest.json"), ingest).unwrap();
    written.push(PathBuf::from("ingest.json"));

    let sel_dir = o("selections");
    ok(&[
        &["select"][..],
        &data,
        &["--method", "all", "--shots", "4", "--prefilter", "8", "--seed", "7", "--out", &sel_dir],
    ]
    .concat());
    for m in METHODS {
        written.push(PathBuf::from(format!("selections/{m}.jsonl")));
    }

    std::fs::create_dir_all(out.join("prompts")).unwrap();
    let words = p("words.txt");
    let mut prompt_jobs: Vec<(String, &str)> = METHODS.iter().map(|m| (m.to_string(), "standard")).collect();
    prompt_jobs.extend(PERTURBATIONS.iter().skip(1).map(|k| ("mmices".to_string(), *k)));
    for (method, kind) in prompt_jobs {
        let rel = format!("prompts/{method}_{kind}.jsonl");
        let sel = out.join(format!("selections/{method}.jsonl")).display().to_string();
        let target = o(&rel);
        ok(&[
            &["build-prompts"][..],
            &data,
            &["--selections", &sel, "--perturb", kind, "--perturb-seed", "3", "--word-pool", &words, "--out", &target],
        ]
        .concat());
        written.push(PathBuf::from(rel));
    }

    let report = o("report.json");
    ok(&[
        "score",
        "--metric",
        "vqa",
        "--responses",
        &p("responses.jsonl"),
        "--records",
        &queries,
        "--threads",
        &threads,
        "--out",
        &report,
    ]);
    written.push(PathBuf::from("report.json"));
    written
}

/// Byte comparison of every artifact against the committed goldens.
/// `MMICES_UPDATE_GOLDEN=1` rewrites the goldens instead.
pub fn compare_with_golden(out: &Path, artifacts: &[PathBuf]) -> Vec<String> {
    let golden = golden_dir();
    let update = std::env::var_os("MMICES_UPDATE_GOLDEN").is_some();
    let mut diffs = Vec::new();
    for rel in artifacts {
        let got = std::fs::read(out.join(rel)).unwrap();
        let path = golden.join(rel);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &got).unwrap();
            continue;
        }
        match std::fs::read(&path) {
            Ok(want) if want == got => {}
            Ok(_) => diffs.push(format!("{} differs", rel.display())),
            Err(e) => diffs.push(format!("{}: {e}", rel.display())),
        }
    }
    diffs
}

pub mod gen {
    use std::sync::Arc;

    use mmices::selectors::Query;
    use mmices::{bind, BoundSet, EmbeddingMatrix, Record, TaskKind};
    use rand::Rng;

    pub fn record(id: &str, question: &str, answer: &str) -> Record {
        Record {
            id: id.to_string(),
            image_ref: Some(format!("images/{id}.jpg")),
            question: Some(question.to_string()),
            answers: vec![answer.to_string(); 3],
            captions: Vec::new(),
            proxy_text: None,
        }
    }

    /// 2-d unit vector at angle `rank * step`; equal ranks give equal vectors
    /// and cosine to `(1, 0)` strictly decreases with rank for rank * step < π.
    pub fn ranked(rank: usize) -> Vec<f32> {
        let theta = rank as f64 * 0.3;
        vec![theta.cos() as f32, theta.sin() as f32]
    }

    /// Small-integer vectors so duplicate rows (score ties) are common.
    pub fn coarse(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
        loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f32).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        }
    }

    pub fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
        loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            if v.iter().any(|&x| x != 0.0) {
                return v;
            }
        }
    }

    pub fn matrix(ids: &[String], rows: &[Vec<f32>]) -> Arc<EmbeddingMatrix> {
        let dim = rows[0].len();
        let data = rows.iter().flatten().copied().collect();
        Arc::new(EmbeddingMatrix::new(ids.to_vec(), dim, data, false).unwrap())
    }

    /// Support set `s0..` with the given per-record visual and textual rows.
    pub fn support(visual: &[Vec<f32>], textual: &[Vec<f32>]) -> BoundSet {
        let ids: Vec<String> = (0..visual.len()).map(|i| format!("s{i}")).collect();
        let records = ids.iter().map(|id| record(id, "q?", "a")).collect();
        bind(records, matrix(&ids, visual), matrix(&ids, textual), TaskKind::Vqa).unwrap()
    }

    pub fn query<'a>(record: &'a Record, visual: &'a [f32], textual: &'a [f32]) -> Query<'a> {
        Query {
            record,
            task: TaskKind::Vqa,
            visual,
            textual,
        }
    }
}
