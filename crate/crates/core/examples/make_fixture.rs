//! Writes the 20-support / 5-query VQA fixture used by the end-to-end tests.
//!
//! Usage: cargo run --example make_fixture -- <out_dir>

use std::fs;
use std::path::PathBuf;

use mmices::{write_matrix, EmbeddingMatrix, Record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const VISUAL_DIM: usize = 8;
const TEXTUAL_DIM: usize = 6;

struct Topic {
    name: &'static str,
    questions: [&'static str; 2],
    answers: [&'static str; 5],
}

const TOPICS: [Topic; 5] = [
    Topic {
        name: "sign",
        questions: ["What does this sign say?", "What color is the sign?"],
        answers: ["stop", "turn left", "no entry", "yield", "one way"],
    },
    Topic {
        name: "animal",
        questions: ["What animal is this?", "How many animals are there?"],
        answers: ["cat", "dog", "horse", "zebra", "giraffe"],
    },
    Topic {
        name: "food",
        questions: ["What food is on the plate?", "Is this healthy?"],
        answers: ["pizza", "salad", "pasta", "cake", "sandwich"],
    },
    Topic {
        name: "bus",
        questions: ["What color is the bus?", "Is the bus moving?"],
        answers: ["red", "blue", "yellow", "green", "white"],
    },
    Topic {
        name: "sport",
        questions: ["What sport is being played?", "Is this a professional game?"],
        answers: ["tennis", "soccer", "baseball", "frisbee", "skiing"],
    },
];

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f64], scale: f64) -> Vec<f32> {
    center
        .iter()
        .map(|c| (c + scale * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

fn answers(main: &str, alt: &str, n_main: usize) -> Vec<String> {
    (0..10).map(|i| if i < n_main { main } else { alt }.to_string()).collect()
}

fn main() {
    let out: PathBuf = std::env::args_os().nth(1).expect("usage: make_fixture <out_dir>").into();
    fs::create_dir_all(&out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let topic_centers: Vec<Vec<f64>> = TOPICS.iter().map(|_| unit(&mut rng, VISUAL_DIM)).collect();
    let question_centers: Vec<Vec<f64>> = (0..TOPICS.len() * 2).map(|_| unit(&mut rng, TEXTUAL_DIM)).collect();

    let mut support = Vec::new();
    let (mut vis_ids, mut vis) = (Vec::new(), Vec::new());
    let (mut txt_ids, mut txt) = (Vec::new(), Vec::new());
    for i in 0..20 {
        let t = i % TOPICS.len();
        let slot = i / TOPICS.len();
        // Questions alternate so each question string is shared by two records.
        let q = slot % 2;
        let id = format!("s{i:02}");
        let topic = &TOPICS[t];
        let rec = Record {
            id: id.clone(),
            image_ref: Some(format!("images/{}_{id}.jpg", topic.name)),
            question: Some(topic.questions[q].to_string()),
            answers: answers(topic.answers[slot], topic.answers[(slot + 1) % 5], 7 + slot % 3),
            captions: Vec::new(),
            proxy_text: None,
        };
        vis.extend(noisy(&mut rng, &topic_centers[t], 0.45));
        vis_ids.push(id.clone());
        txt.extend(noisy(&mut rng, &question_centers[t * 2 + q], 0.6));
        txt_ids.push(id);
        support.push(rec);
    }
    vis_ids.push("blank".into());
    vis.extend(std::iter::repeat_n(1.0f32, VISUAL_DIM));

    let mut queries = Vec::new();
    let (mut qv, mut qt, mut q_ids) = (Vec::new(), Vec::new(), Vec::new());
    for (t, topic) in TOPICS.iter().enumerate() {
        let id = format!("q{t}");
        let q = t % 2;
        queries.push(Record {
            id: id.clone(),
            image_ref: Some(format!("images/{}_{id}.jpg", topic.name)),
            question: Some(topic.questions[q].to_string()),
            answers: answers(topic.answers[4], topic.answers[0], 6 + t % 3),
            captions: Vec::new(),
            proxy_text: None,
        });
        qv.extend(noisy(&mut rng, &topic_centers[t], 0.45));
        qt.extend(noisy(&mut rng, &question_centers[t * 2 + q], 0.6));
        q_ids.push(id);
    }

    let write = |name: &str, ids: Vec<String>, dim: usize, data: Vec<f32>| {
        let m = EmbeddingMatrix::new(ids, dim, data, false).unwrap().normalize().unwrap();
        write_matrix(&m, out.join(name)).unwrap();
    };
    write("visual.mmeb", vis_ids, VISUAL_DIM, vis);
    write("textual.mmeb", txt_ids, TEXTUAL_DIM, txt);
    write("query_visual.mmeb", q_ids.clone(), VISUAL_DIM, qv);
    write("query_textual.mmeb", q_ids, TEXTUAL_DIM, qt);

    let jsonl = |recs: &[Record]| -> String {
        recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect()
    };
    fs::write(out.join("support.jsonl"), jsonl(&support)).unwrap();
    fs::write(out.join("queries.jsonl"), jsonl(&queries)).unwrap();
    let manifest = serde_json::json!({
        "visual_path": "visual.mmeb",
        "textual_path": "textual.mmeb",
        "query_visual_path": "query_visual.mmeb",
        "query_textual_path": "query_textual.mmeb",
        "blank_image_id": "blank",
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap() + "\n").unwrap();
    let responses = [("q0", "One Way"), ("q1", "a giraffe"), ("q2", "pizza"), ("q3", "white."), ("q4", "golf")];
    let lines: String = responses
        .iter()
        .map(|(q, r)| serde_json::json!({"query_id": q, "response": r}).to_string() + "\n")
        .collect();
    fs::write(out.join("responses.jsonl"), lines).unwrap();
    fs::write(out.join("words.txt"), "apple\nriver\nmountain\nquiet\nlamp\nseven\norange\ncloud\n").unwrap();
}
