#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{GrayImage, Luma};
use serde_json::{json, Value};

pub const DEFECT_BOX: (u32, u32, u32, u32) = (16, 12, 28, 24);

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_patchwise"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).env_remove("RUST_LOG").output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn write_png(path: &Path, img: &GrayImage) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

fn part_image(seed: u32, defect: bool) -> GrayImage {
    let (x0, y0, x1, y1) = DEFECT_BOX;
    GrayImage::from_fn(48, 48, |x, y| {
        if defect && (x0..x1).contains(&x) && (y0..y1).contains(&y) {
            Luma([230])
        } else {
            Luma([(96 + (x * 7 + y * 3 + seed) % 11) as u8])
        }
    })
}

fn mask_image() -> GrayImage {
    let (x0, y0, x1, y1) = DEFECT_BOX;
    GrayImage::from_fn(48, 48, |x, y| Luma([if (x0..x1).contains(&x) && (y0..y1).contains(&y) { 255 } else { 0 }]))
}

/// `<root>/<name>/bottle/test/{good,scratch}` with `n_good` and `n_bad`
/// images; every defective image has a mask. Returns the dataset root and
/// the sample ids in loader order.
pub fn dataset(root: &Path, name: &str, n_good: usize, n_bad: usize) -> (PathBuf, Vec<String>) {
    let ds = root.join(name);
    let cat = ds.join("bottle");
    let mut ids = Vec::new();
    for i in 0..n_bad {
        let file = format!("{i:03}.png");
        write_png(&cat.join("test/scratch").join(&file), &part_image(i as u32, true));
        write_png(&cat.join("ground_truth/scratch").join(format!("{i:03}_mask.png")), &mask_image());
        ids.push(format!("{name}/bottle/scratch/{file}"));
    }
    for i in 0..n_good {
        let file = format!("{i:03}.png");
        write_png(&cat.join("test/good").join(&file), &part_image(i as u32, false));
        ids.push(format!("{name}/bottle/good/{file}"));
    }
    ids.sort();
    (ds, ids)
}

pub fn is_defective(id: &str) -> bool {
    !id.contains("/good/")
}

pub fn route(tools: &str, target: &str, prelim: &str) -> String {
    format!(
        "Think: a faint mark near the shoulder\nNeed Tools: {tools}\nTool Target: {target}\nTarget Region: shoulder\n\
         Target Scale: small\nTarget Type: surface-mark\nSuspicion Level: medium\nPreliminary Answer: {prelim}"
    )
}

fn decision(defective: bool) -> String {
    if defective {
        "<think>a bright streak on the shoulder</think><location>(16, 12, 28, 24)</location>\
         <type>scratch</type><answer>Yes</answer>"
            .into()
    } else {
        "<think>the surface is uniform</think><answer>No</answer>".into()
    }
}

/// Which path a sample takes in [`infer_script`].
pub fn infer_path(index: usize) -> &'static str {
    ["none", "multi-tool", "failure"][index % 3]
}

/// Per-sample mock replies: the none-route, a crop plus enhance route with
/// a logprob probe, and a route whose crop box and prior lookup both fail.
pub fn infer_script(ids: &[String]) -> Value {
    let mut sessions = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let bad = is_defective(id);
        let label = if bad { "Yes" } else { "No" };
        let probe = json!({"text": format!("<think>unsure</think><answer>{label}</answer>"),
                           "when": "Tool Context:\n\n", "answer_logprobs": {"yes": -0.6, "no": -0.9}});
        let (yes, no) = if bad { (-0.1, -2.5) } else { (-2.5, -0.1) };
        let steps = match infer_path(i) {
            "none" => vec![json!(route("none", "none", label))],
            "multi-tool" => vec![
                json!(route("crop, enhance", "(12, 8, 32, 28)", label)),
                probe,
                json!({"text": decision(bad), "answer_logprobs": {"yes": yes, "no": no}}),
            ],
            _ => vec![
                json!(route("crop, prior", "(0, 0, 500, 500)", label)),
                probe,
                json!({"text": decision(bad), "answer_logprobs": {"yes": yes, "no": no}}),
            ],
        };
        sessions.insert(id.clone(), steps);
    }
    json!({ "sessions": sessions })
}

pub fn corpus_description(id: &str) -> String {
    format!("A glass bottle photographed from above ({}).", id.rsplit('/').next().unwrap())
}

pub fn corpus_trajectory(defective: bool, variant: usize) -> String {
    let opener = ["the shoulder looks uneven", "inspecting the neck and shoulder"][variant % 2];
    if defective {
        format!(
            "<think>{opener}</think><call_tool>crop(x0=12, y0=8, x1=32, y1=28)</call_tool>\
             <observation>crop of the shoulder region</observation>\
             <think>a bright streak runs across the glass</think>\
             <location>(14, 10, 30, 26)</location><type>scratch</type><answer>Yes</answer>"
        )
    } else {
        format!("<think>{opener}; the glass is smooth and evenly lit</think><answer>No</answer>")
    }
}

/// Teacher and judge scripts for `corpus build --candidates 2`.
///
/// Sample `i` behaves by `i % 5`: 0 and 1 give two valid candidates, 2
/// opens with a wrong label and is repaired, 3 opens with a malformed reply
/// and is repaired, 4 gives two valid candidates with tied scores. The last
/// sample never produces a valid reply and is rejected.
pub fn corpus_script(ids: &[String]) -> (Value, BTreeMap<String, Vec<f64>>) {
    let mut sessions = BTreeMap::new();
    let mut scores = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let bad = is_defective(id);
        let mut steps = vec![json!(corpus_description(id))];
        let judged: Vec<f64>;
        if i + 1 == ids.len() {
            for _ in 0..3 {
                steps.push(json!(corpus_trajectory(!bad, 0)));
            }
            judged = vec![];
        } else {
            match i % 5 {
                2 => steps.push(json!(corpus_trajectory(!bad, 0))),
                3 => steps.push(json!("<think>unfinished")),
                _ => {}
            }
            steps.push(json!(corpus_trajectory(bad, 0)));
            steps.push(json!(corpus_trajectory(bad, 1)));
            judged = match i % 5 {
                0 => vec![0.6, 0.9],
                1 => vec![0.8, 0.5],
                4 => vec![0.7, 0.7],
                _ => vec![0.55, 0.75],
            };
        }
        if !judged.is_empty() {
            let replies: Vec<Value> = judged.iter().map(|s| json!(format!("{s}"))).collect();
            sessions.insert(format!("{id}#judge"), replies);
        }
        sessions.insert(id.clone(), steps);
        scores.insert(id.clone(), judged);
    }
    (json!({ "sessions": sessions }), scores)
}

pub fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

pub fn read_jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
