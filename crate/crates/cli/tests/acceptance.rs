//! Acceptance run: one pass/fail line per criterion, nonzero exit on any
//! failure or blown time budget.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use patchwise::corpus::{CotRecord, CotStatus, SftLine, SUPERVISION_MARKER};
use patchwise::evaluation::{
    anomaly_recall, balanced_accuracy, category_disjoint_filter, evaluate, f1, tool_usage_stats, CategoryNormalizer,
    ConfusionCounts, LoadedDataset, Prediction, Sample, UnparseablePolicy,
};
use patchwise::imaging::{
    center_box, clahe, edge_map, foreground_extract_with, otsu_threshold, BBox, ForegroundParams, RasterImage,
    CANNY_HIGH, CANNY_LOW,
};
use patchwise::orchestrator::prompts::{STAGE1_DESCRIPTION, STAGE2_FORMATTING, TRAINING_PROMPT};
use patchwise::orchestrator::{strip_timing, DiagnosisRecord, FinalAnswer, Timing, ToolInvocation};
use patchwise::rewards::{
    group_advantages, grpo_objective, iou, kl_estimate, tool_reward, total_reward, GrpoParams, RewardWeights,
};
use patchwise::trajectory::{
    parse_baseline_answer, parse_trajectory, render_trajectory, ArgValue, BaselineAnswer, BinaryLabel, Segment,
    ToolCall, ToolName, Trajectory,
};

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rat(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn to_f64(r: &BigRational) -> f64 {
    // numerator and denominator stay small in every fixture here
    let n: f64 = r.numer().to_string().parse().unwrap();
    let d: f64 = r.denom().to_string().parse().unwrap();
    n / d
}

fn c1_reward_arithmetic() -> Outcome {
    let w = RewardWeights::default();
    ensure!(
        (w.alpha, w.beta, w.gamma, w.lambda, w.eta, w.format_penalty) == (0.8, 0.6, 0.5, 0.3, 0.1, -1.0),
        "default weights are {w:?}"
    );
    let (alpha, beta, gamma, lambda, eta) = (rat(4, 5), rat(3, 5), rat(1, 2), rat(3, 10), rat(1, 10));
    let mut worst = 0.0f64;
    for i in 0..50i64 {
        let acc = i % 5 != 4;
        let loc = rat((i * 7) % 21, 20);
        let ty = rat((i * 3) % 11, 10);
        let calls = (i % 4) as usize;
        let gain = i % 3 == 0;
        let format_ok = i % 7 != 6;

        let tool = if gain { lambda.clone() } else { rat(0, 1) } - eta.clone() * rat(calls as i64, 1);
        let body = rat(1, 1) + alpha.clone() * loc.clone() + beta.clone() * ty.clone() + gamma.clone() * tool.clone();
        let expected = if acc { body } else { rat(0, 1) } + if format_ok { rat(0, 1) } else { rat(-1, 1) };

        let t = tool_reward(calls, if gain { 0.25 } else { -0.25 }, &w);
        ensure!((t - to_f64(&tool)).abs() <= 1e-9, "case {i}: tool {t} vs {tool}");
        let b = total_reward(acc, to_f64(&loc), to_f64(&ty), t, format_ok, &w).map_err(|e| e.to_string())?;
        let err = (b.total - to_f64(&expected)).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-9, "case {i}: total {} vs {expected}", b.total);
        if !acc {
            ensure!(b.total == b.format, "case {i}: gate leaks {} beyond format {}", b.total, b.format);
        }
    }
    let hand = [
        // (acc, loc, type, calls, gain, format_ok, total)
        (true, 1.0, 1.0, 1, true, true, 2.5),
        (true, 0.0, 0.0, 0, false, true, 1.0),
        (true, 0.5, 0.5, 2, false, true, 1.6),
        (true, 1.0, 0.0, 3, true, false, 0.8),
        (false, 1.0, 1.0, 1, true, true, 0.0),
        (false, 0.3, 0.9, 4, false, false, -1.0),
    ];
    for (acc, loc, ty, calls, gain, ok, want) in hand {
        let t = tool_reward(calls, if gain { 1.0 } else { 0.0 }, &w);
        let got = total_reward(acc, loc, ty, t, ok, &w).map_err(|e| e.to_string())?.total;
        ensure!((got - want).abs() <= 1e-9, "hand case ({acc}, {loc}, {ty}, {calls}): {got} vs {want}");
    }
    Ok(format!("50 oracle cases + 6 hand cases, max error {worst:.1e}"))
}

fn c2_grpo() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut groups = 0;
    while groups < 10_000 {
        let g = rng.random_range(2..=16);
        let r: Vec<f64> = (0..g).map(|_| rng.random_range(-10.0..10.0)).collect();
        let a = group_advantages(&r).map_err(|e| e.to_string())?;
        let mean = a.iter().sum::<f64>() / g as f64;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / g as f64).sqrt();
        ensure!(mean.abs() <= 1e-12, "group {groups}: mean {mean}");
        ensure!((std - 1.0).abs() <= 1e-9, "group {groups}: std {std}");
        groups += 1;
    }

    let mut points: Vec<f64> = (0..999_000).map(|i| -20.0 + 40.0 * i as f64 / 998_999.0).collect();
    for k in 0..=320 {
        let v = 10f64.powi(-k);
        points.extend([v, -v]);
    }
    points.push(0.0);
    while points.len() < 1_000_000 {
        points.push(rng.random_range(-1e-6..1e-6));
    }
    let mut zeros = 0;
    for &d in &points {
        let k = kl_estimate(0.0, d).map_err(|e| e.to_string())?;
        ensure!(k >= 0.0, "kl({d}) = {k}");
        let gap = d.exp_m1().abs();
        if k == 0.0 {
            zeros += 1;
            ensure!(gap <= 1e-12, "kl vanishes at ratio 1{:+e}", d.exp_m1());
        } else {
            ensure!(d != 0.0, "kl at ratio exactly 1 is {k}");
        }
        if gap > 1e-12 {
            ensure!(k > 0.0, "kl({d}) = 0 away from ratio 1");
        }
    }

    let p = GrpoParams::default();
    ensure!((p.epsilon, p.kl_beta) == (0.2, 0.04), "default grpo params {p:?}");
    for n in 0..1000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..3.0)).collect();
        let adv = group_advantages(&rewards).map_err(|e| e.to_string())?;
        let ratios: Vec<f64> = (0..g).map(|_| rng.random_range(0.5..1.5)).collect();
        let kls: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..0.2)).collect();
        let loss = grpo_objective(&ratios, &adv, &kls, p.epsilon, p.kl_beta).map_err(|e| e.to_string())?;
        let mut j = 0.0;
        for i in 0..g {
            let r = ratios[i];
            let clipped = if r < 1.0 - p.epsilon {
                1.0 - p.epsilon
            } else if r > 1.0 + p.epsilon {
                1.0 + p.epsilon
            } else {
                r
            };
            let unclipped_term = r * adv[i];
            let clipped_term = clipped * adv[i];
            let surrogate = if unclipped_term < clipped_term { unclipped_term } else { clipped_term };
            j += surrogate - p.kl_beta * kls[i];
        }
        j /= g as f64;
        ensure!((-loss - j).abs() <= 1e-12, "group {n}: objective {} vs reference {j}", -loss);
    }
    Ok(format!("10000 groups, {} kl points ({zeros} zero), 1000 objectives", points.len()))
}

/// Exhaustive between-class variance search in exact integers. With
/// `w0 w1 (mu0 - mu1)^2 = (s0 n1 - s1 n0)^2 / (n^2 n0 n1)`, the common `n^2`
/// drops out and candidates compare by cross-multiplication. Ties keep the
/// smallest threshold.
fn otsu_oracle(h: &[u64; 256]) -> Option<u8> {
    let n: u64 = h.iter().sum();
    let total: u64 = h.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(BigInt, BigInt, u8)> = None;
    for t in 0..255usize {
        n0 += h[t];
        s0 += t as u64 * h[t];
        let (n1, s1) = (n - n0, total - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = BigInt::from(s0) * BigInt::from(n1) - BigInt::from(s1) * BigInt::from(n0);
        let num = &d * &d;
        let den = BigInt::from(n0) * BigInt::from(n1);
        if best.as_ref().is_none_or(|(bn, bd, _)| &num * bd > bn * &den) {
            best = Some((num, den, t as u8));
        }
    }
    best.map(|(_, _, t)| t)
}

fn c3_otsu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut degenerate = 0;
    for n in 0..1000 {
        let mut h = [0u64; 256];
        match n % 4 {
            0 => h.iter_mut().for_each(|c| *c = rng.random_range(0..500)),
            1 => {
                for _ in 0..rng.random_range(1..5) {
                    h[rng.random_range(0..256)] += rng.random_range(1..100);
                }
            }
            2 => {
                // two bumps
                for (center, mass) in [(rng.random_range(20..100), 3000u64), (rng.random_range(150..240), 2000)] {
                    for _ in 0..mass {
                        let v: i64 = center + rng.random_range(-15..=15);
                        h[v.clamp(0, 255) as usize] += 1;
                    }
                }
            }
            _ => {
                let lo = rng.random_range(0..250);
                for c in &mut h[lo..lo + 6] {
                    *c = rng.random_range(0..3);
                }
                if h.iter().all(|&c| c == 0) {
                    h[lo] = 1;
                }
            }
        }
        let fast = otsu_threshold(&h).map_err(|e| e.to_string())?;
        match otsu_oracle(&h) {
            Some(t) => ensure!(
                (fast.threshold, fast.degenerate) == (t, false),
                "histogram {n}: {} vs oracle {t}",
                fast.threshold
            ),
            None => {
                degenerate += 1;
                ensure!((fast.threshold, fast.degenerate) == (0, true), "histogram {n}: expected degenerate");
            }
        }
    }
    Ok(format!("1000 histograms, {degenerate} single-level"))
}

/// Draws one rectangle or ellipse inside `area` and returns the exact pixel
/// box of what was drawn.
fn draw_blob(data: &mut [u8], width: u32, area: BBox, value: u8, ellipse: bool) -> BBox {
    let (cx, cy) = ((area.x0 + area.x1) as f64 / 2.0, (area.y0 + area.y1) as f64 / 2.0);
    let (rx, ry) = (area.width() as f64 / 2.0, area.height() as f64 / 2.0);
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in area.y0..area.y1 {
        for x in area.x0..area.x1 {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            if !ellipse || dx * dx + dy * dy <= 1.0 {
                data[(y * width + x) as usize] = value;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    BBox { x0, y0, x1, y1 }
}

fn c4_foreground() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ForegroundParams::default();
    let mut worst = 0i64;
    for n in 0..100 {
        let with_background = n % 2 == 1;
        let size: u32 = if with_background { 96 } else { 64 };
        let base: i32 = rng.random_range(60..140);
        let bg: Vec<u8> = (0..size * size)
            .map(|_| {
                let spread = if with_background { 20 } else { 2 };
                (base + rng.random_range(-spread..=spread)) as u8
            })
            .collect();
        let (max_side, margin) = if with_background { (40, 2) } else { (20, 8) };
        let (w, h) = (rng.random_range(5..=max_side), rng.random_range(5..=max_side));
        let x0 = rng.random_range(margin..=size - margin - w);
        let y0 = rng.random_range(margin..=size - margin - h);
        let value = if rng.random_bool(0.5) { (base + 90).min(255) } else { base - 55 } as u8;
        let mut img = bg.clone();
        let truth = draw_blob(&mut img, size, BBox { x0, y0, x1: x0 + w, y1: y0 + h }, value, n % 4 >= 2);
        let image = RasterImage::new(size, size, 1, img).map_err(|e| e.to_string())?;
        let background = RasterImage::new(size, size, 1, bg).map_err(|e| e.to_string())?;
        let r = foreground_extract_with(&image, with_background.then_some(&background), &params)
            .map_err(|e| e.to_string())?;
        ensure!(!r.fallback, "fixture {n}: fell back to the center box");
        let edges = [
            r.bbox.x0 as i64 - truth.x0 as i64,
            r.bbox.y0 as i64 - truth.y0 as i64,
            r.bbox.x1 as i64 - truth.x1 as i64,
            r.bbox.y1 as i64 - truth.y1 as i64,
        ];
        let off = edges.iter().map(|e| e.abs()).max().unwrap();
        worst = worst.max(off);
        ensure!(off <= 2, "fixture {n}: {} vs truth {truth}", r.bbox);
    }
    for (w, h, v) in [(64, 64, 128u8), (33, 17, 0), (100, 40, 255), (7, 9, 42)] {
        let img = RasterImage::filled(w, h, 1, v).map_err(|e| e.to_string())?;
        let r = foreground_extract_with(&img, None, &params).map_err(|e| e.to_string())?;
        ensure!(r.fallback && r.bbox == center_box(w, h), "uniform {w}x{h}: {} fallback={}", r.bbox, r.fallback);
    }
    let cb = center_box(64, 64);
    ensure!(cb == BBox { x0: 16, y0: 16, x1: 48, y1: 48 }, "center box of 64x64 is {cb}");
    Ok(format!("100 blobs, max edge offset {worst} px; 4 uniform fallbacks"))
}

fn reference_equalize(img: &RasterImage) -> Vec<u8> {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let n = img.data().len() as f64;
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for v in 0..256 {
        cdf += hist[v];
        lut[v] = (255.0 * cdf as f64 / n).round() as u8;
    }
    img.data().iter().map(|&v| lut[v as usize]).collect()
}

fn c5_clahe_canny() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 0..20 {
        let (w, h) = (rng.random_range(8..80), rng.random_range(8..80));
        let lo: u8 = rng.random_range(0..150);
        let hi: u8 = lo + rng.random_range(1..100);
        let img = RasterImage::from_gray_fn(w, h, |_, _| rng.random_range(lo..=hi)).map_err(|e| e.to_string())?;
        let out = clahe(&img, f64::INFINITY, (1, 1)).map_err(|e| e.to_string())?;
        ensure!(out.data() == reference_equalize(&img).as_slice(), "image {n} ({w}x{h}) differs from equalization");
    }

    let step = RasterImage::from_gray_fn(64, 48, |x, _| if x < 32 { 40 } else { 200 }).map_err(|e| e.to_string())?;
    let edges = edge_map(&step, CANNY_LOW, CANNY_HIGH).map_err(|e| e.to_string())?;
    let cols: BTreeSet<u32> = (0..48)
        .flat_map(|y| (0..64).map(move |x| (x, y)))
        .filter(|&(x, y)| edges.get(x, y, 0) > 0)
        .map(|(x, _)| x)
        .collect();
    ensure!(!cols.is_empty(), "no edges on the step");
    let (first, last) = (*cols.first().unwrap(), *cols.last().unwrap());
    ensure!(last - first <= 2 && first >= 30 && last <= 33, "edge columns {cols:?}");

    let flat = RasterImage::filled(40, 40, 1, 99).map_err(|e| e.to_string())?;
    let none = edge_map(&flat, CANNY_LOW, CANNY_HIGH).map_err(|e| e.to_string())?;
    ensure!(none.data().iter().all(|&v| v == 0), "constant image produced edges");
    Ok(format!("20 equalizations exact, step edges in columns {first}..={last}"))
}

fn c6_iou() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let random_box = |rng: &mut ChaCha8Rng| {
        let (x0, y0) = (rng.random_range(0..40), rng.random_range(0..40));
        BBox { x0, y0, x1: x0 + rng.random_range(1..=24), y1: y0 + rng.random_range(1..=24) }
    };
    let mut worst = 0.0f64;
    for n in 0..10_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (mut inter, mut union) = (0u32, 0u32);
        for y in 0..64 {
            for x in 0..64 {
                let ia = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
                let ib = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
                inter += (ia && ib) as u32;
                union += (ia || ib) as u32;
            }
        }
        let v = iou(&a, &b);
        let err = (v - inter as f64 / union as f64).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-9, "pair {n}: {a} {b} gives {v}");
        ensure!(v == iou(&b, &a), "pair {n}: asymmetric");
        ensure!(iou(&a, &a) == 1.0, "identity of {a}");
    }
    let a = BBox { x0: 0, y0: 0, x1: 10, y1: 10 };
    for b in [BBox { x0: 10, y0: 0, x1: 20, y1: 10 }, BBox { x0: 0, y0: 10, x1: 10, y1: 20 }, BBox { x0: 30, y0: 30, x1: 31, y1: 31 }] {
        ensure!(iou(&a, &b) == 0.0 && iou(&b, &a) == 0.0, "disjoint {a} {b}");
    }
    Ok(format!("10000 pairs, max error {worst:.1e}"))
}

const WORDS: &[&str] = &["scratch", "rim", "uniform", "glare", "thread", "weld", "edge", "dent", "smooth", "bright"];

fn words(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..8);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn random_trajectory(rng: &mut ChaCha8Rng) -> Trajectory {
    let mut segs = vec![Segment::Think(words(rng))];
    for _ in 0..rng.random_range(0..4) {
        if rng.random_bool(0.5) {
            segs.push(Segment::Think(words(rng)));
        } else {
            for _ in 0..rng.random_range(1..3) {
                let tool = ToolName::ALL[rng.random_range(0..ToolName::ALL.len())];
                let mut call = ToolCall::new(tool);
                for key in ["x0", "y0"].iter().take(rng.random_range(0..3)) {
                    call = call.with_arg(key, ArgValue::Number(rng.random_range(0..200) as f64));
                }
                if rng.random_bool(0.3) {
                    call = call.with_arg("query", ArgValue::Text(words(rng)));
                }
                segs.push(Segment::CallTool(call));
            }
            segs.push(Segment::Observation(words(rng)));
        }
    }
    let yes = rng.random_bool(0.5);
    if yes {
        let (x, y) = (rng.random_range(0..100), rng.random_range(0..100));
        segs.push(Segment::Location(format!("({x}, {y}, {}, {})", x + 5, y + 7)));
        segs.push(Segment::DefectType(WORDS[rng.random_range(0..WORDS.len())].to_string()));
    }
    segs.push(Segment::Answer(BinaryLabel::from_anomalous(yes)));
    Trajectory::new(segs).expect("generator emits valid trajectories")
}

fn insert_after_first_think(text: &str, piece: &str) -> String {
    let at = text.find("</think>").unwrap() + "</think>".len();
    format!("{}{piece}{}", &text[..at], &text[at..])
}

fn c7_grammar() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut pool = Vec::with_capacity(1000);
    for n in 0..1000 {
        let t = random_trajectory(&mut rng);
        let text = render_trajectory(&t).map_err(|e| e.to_string())?;
        let back = parse_trajectory(&text).map_err(|e| format!("trajectory {n}: {e}"))?;
        ensure!(back == t, "trajectory {n} changed on round trip");
        ensure!(render_trajectory(&back).map_err(|e| e.to_string())? == text, "trajectory {n} re-renders differently");
        pool.push((t.answer(), text));
    }
    type Mutation = fn(&str, BinaryLabel) -> String;
    let classes: [(&str, Mutation); 6] = [
        ("missing-answer", |s, l| s.replace(&format!("<answer>{l}</answer>"), "")),
        ("duplicate-answer", |s, l| format!("{s}<answer>{l}</answer>")),
        ("malformed-tag", |s, _| s.replace("</answer>", "")),
        ("unknown-tag", |s, _| insert_after_first_think(s, "<note>checked twice</note>")),
        ("text-outside-tags", |s, _| insert_after_first_think(s, "stray words")),
        ("orphan-observation", |s, _| insert_after_first_think(s, "<observation>a reading</observation>")),
    ];
    for (code, mutate) in classes {
        for (i, (label, text)) in pool.iter().take(200).enumerate() {
            let broken = mutate(text, *label);
            let report = match parse_trajectory(&broken) {
                Ok(_) => return Err(format!("{code} #{i}: mutated text still parses: {broken}")),
                Err(r) => r,
            };
            let codes: Vec<&str> = report.violations.iter().map(|v| v.code()).collect();
            ensure!(codes == [code], "{code} #{i}: reported {codes:?} for {broken}");
        }
    }
    Ok("1000 round trips, 6 x 200 mutations".into())
}

fn c8_baseline_parser() -> Outcome {
    use BinaryLabel::{No, Yes};
    let y = Some(Yes);
    let n = Some(No);
    let cases: [(&str, Option<BinaryLabel>); 60] = [
        ("Yes", y),
        ("No", n),
        ("yes.", y),
        ("NO", n),
        ("Answer: yes", y),
        ("Answer: no", n),
        ("The part is anomalous.", y),
        ("The part is defective.", y),
        ("The image looks abnormal.", y),
        ("The image looks normal.", n),
        ("The surface is defect-free.", n),
        ("Hard to say.", None),
        ("", None),
        ("I cannot determine this from the image.", None),
        ("There is an anomaly on the rim.", None),
        ("Defects are not visible.", None),
        ("Nothing notable; the weld is not cracked.", None),
        ("Normally this would pass.", None),
        ("The yesterday batch looked similar.", None),
        ("Abnormality detected near the cap.", None),
        ("It looks normal at first, but the thread is defective.", y),
        ("It looks defective at first, but the mark is only glare, so the part is normal.", n),
        ("At first glance it seemed abnormal; on closer inspection it is defect-free.", n),
        ("The edge is uniform and the label is normal. However, the cap is anomalous.", y),
        ("Is it anomalous? No.", n),
        ("Is it normal? Yes.", y),
        ("Normal texture overall. Final answer: Yes", y),
        ("A scratch is visible on the rim. Final answer: No", n),
        ("Conclusion: abnormal", y),
        ("Conclusion: normal", n),
        ("The image is not abnormal.", y),
        ("The image is not normal.", n),
        ("ABNORMAL", y),
        ("Defect-Free", n),
        ("DEFECTIVE unit", y),
        ("yes, there is a crack", y),
        ("no, the part is intact", n),
        ("The crack makes it defective (yes).", y),
        ("Despite the glare (anomalous-looking), the answer is no.", n),
        ("Result -> normal", n),
        ("Result -> anomalous", y),
        ("anomalous/normal: anomalous", y),
        ("anomalous/normal: normal", n),
        ("Verdict: defect-free; earlier I thought it was defective.", y),
        ("Verdict: defective; earlier I thought it was defect-free.", n),
        ("The bottle is normal.\nThe cap is normal.", n),
        ("The bottle is normal.\nThe cap is abnormal.", y),
        ("no\nyes", y),
        ("yes\nno", n),
        ("Answer:Yes", y),
        ("Answer:No", n),
        ("<answer>Yes</answer>", y),
        ("<answer>No</answer>", n),
        ("abnormally bright, nonetheless", None),
        ("Everything is as expected.", None),
        ("The defect rate is low.", None),
        ("The product shows no defects.", n),
        ("Is there any anomaly? The answer is yes.", y),
        ("Overall the casting appears normal, no anomalies detected.", n),
        ("A dent makes this abnormal, not normal.", n),
    ];
    for (i, (text, want)) in cases.iter().enumerate() {
        let got = parse_baseline_answer(text);
        let expected = match want {
            Some(l) => BaselineAnswer::Label(*l),
            None => BaselineAnswer::Unparseable,
        };
        ensure!(got == expected, "case {i} {text:?}: got {got:?}, expected {expected:?}");
    }
    Ok(format!("{} cases agree", cases.len()))
}

const REAL_IAD: [&str; 30] = [
    "audiojack", "bottle_cap", "button_battery", "end_cap", "eraser", "fire_hood", "mint", "mounts", "pcb",
    "phone_battery", "plastic_nut", "plastic_plug", "porcelain_doll", "regulator", "rolled_strip_base",
    "sim_card_set", "switch", "tape", "terminalblock", "toothbrush", "toy", "toy_brick", "transistor1", "u_block",
    "usb", "usb_adaptor", "vcpill", "wooden_beads", "woodstick", "zipper",
];
const MVTEC: [&str; 15] = [
    "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "metal_nut", "pill", "screw", "tile",
    "toothbrush", "transistor", "wood", "zipper",
];
const VISA: [&str; 12] = [
    "candle", "capsules", "cashew", "chewinggum", "fryum", "macaroni1", "macaroni2", "pcb1", "pcb2", "pcb3", "pcb4",
    "pipe_fryum",
];
const MPDD: [&str; 6] = ["bracket_black", "bracket_brown", "bracket_white", "connector", "metal_plate", "tubes"];

fn c9_category_filter() -> Outcome {
    let test: Vec<&str> = MVTEC.iter().chain(&VISA).chain(&MPDD).copied().collect();
    let split = category_disjoint_filter(&CategoryNormalizer::default(), &REAL_IAD, &test).map_err(|e| e.to_string())?;
    let removed = split.removed_names();
    let want: BTreeSet<&str> = ["toothbrush", "zipper", "pcb", "transistor1"].into();
    ensure!(removed == want, "removed {removed:?}");
    let matched = |name: &str| split.removed.iter().find(|r| r.category == name).map(|r| r.matched.clone());
    ensure!(
        matched("pcb") == Some(vec!["pcb1".into(), "pcb2".into(), "pcb3".into(), "pcb4".into()]),
        "pcb matched {:?}",
        matched("pcb")
    );
    ensure!(matched("transistor1") == Some(vec!["transistor".into()]), "transistor1 matched {:?}", matched("transistor1"));
    ensure!(split.retained.len() == 26, "{} categories retained", split.retained.len());
    Ok(format!("removed {removed:?}, {} retained", split.retained.len()))
}

fn invocation(tool: ToolName, success: bool) -> ToolInvocation {
    ToolInvocation {
        call: ToolCall::new(tool),
        observation: None,
        success,
        error: (!success).then(|| "unavailable".to_string()),
        wall_ms: 0.0,
    }
}

fn c10_metrics() -> Outcome {
    // ten anomalous samples (7 caught) then ten normal ones (2 flagged)
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    let mut records = Vec::new();
    for i in 0..20 {
        let truth = BinaryLabel::from_anomalous(i < 10);
        let predicted = BinaryLabel::from_anomalous(if i < 10 { i < 7 } else { i >= 18 });
        let id = format!("fixture/bottle/{}/{i:03}.png", if i < 10 { "crack" } else { "good" });
        samples.push(Sample {
            id: id.clone(),
            dataset: "fixture".into(),
            path: format!("{i}.png").into(),
            category: "bottle".into(),
            view: "*".into(),
            label: truth,
            gt_box: None,
            gt_type: None,
        });
        preds.push(Prediction { sample_id: id.clone(), answer: Some(predicted) });
        let mut calls = Vec::new();
        if i < 10 {
            calls.push(invocation(ToolName::Crop, i >= 2));
        }
        if i < 5 {
            calls.push(invocation(ToolName::Enhance, true));
        }
        if i == 5 {
            calls.push(invocation(ToolName::Prior, false));
            calls.push(invocation(ToolName::Prior, false));
        }
        records.push(DiagnosisRecord {
            sample_id: id,
            rounds: Vec::new(),
            tool_calls: calls,
            final_answer: FinalAnswer { answer: Some(predicted), ..Default::default() },
            margins: None,
            notes: Vec::new(),
            timing: Timing::default(),
        });
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let c = ConfusionCounts::from_pairs(samples.iter().zip(&preds).map(|(s, p)| (s.label, p.answer.unwrap())));
    ensure!(c == ConfusionCounts { tp: 7, fn_: 3, tn: 8, fp: 2 }, "counts {c:?}");
    let ba = balanced_accuracy(&c).map_err(|e| e.to_string())?;
    ensure!(close(ba, 0.75), "balanced accuracy {ba}");
    ensure!(anomaly_recall(&c).is_some_and(|r| close(r, 0.7)), "recall {:?}", anomaly_recall(&c));
    ensure!(f1(&c).is_some_and(|f| close(f, 14.0 / 19.0)), "f1 {:?}", f1(&c));

    let ds = LoadedDataset { name: "fixture".into(), samples: samples.clone(), warnings: Vec::new() };
    let report = evaluate(&[ds], &preds, UnparseablePolicy::Exclude);
    let d = &report.datasets[0];
    ensure!(d.counts == c && d.balanced_accuracy.is_some_and(|v| close(v, 0.75)), "report {d:?}");

    // records go through JSON the way `eval` receives them
    let json: Vec<String> = records.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let parsed: Vec<DiagnosisRecord> = json.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    let s = tool_usage_stats(&parsed).map_err(|e| e.to_string())?;
    ensure!(s.records == 20 && s.total_calls == 17, "{} records, {} calls", s.records, s.total_calls);
    ensure!(close(s.avg_calls, 0.85), "avg calls {}", s.avg_calls);
    ensure!(s.success_rate.is_some_and(|v| close(v, 13.0 / 17.0)), "success {:?}", s.success_rate);
    let tool = |name: &str| s.per_tool[name].clone();
    ensure!(close(tool("crop").frequency, 0.5) && tool("crop").success_rate == Some(0.8), "crop {:?}", tool("crop"));
    ensure!(close(tool("enhance").frequency, 0.25) && tool("enhance").success_rate == Some(1.0), "enhance {:?}", tool("enhance"));
    ensure!(close(tool("prior").frequency, 0.05) && tool("prior").success_rate == Some(0.0), "prior {:?}", tool("prior"));
    ensure!(tool("measure").frequency == 0.0 && tool("measure").success_rate.is_none(), "measure {:?}", tool("measure"));

    let all_yes = ConfusionCounts::from_pairs(samples.iter().map(|s| (s.label, BinaryLabel::Yes)));
    let ba = balanced_accuracy(&all_yes).map_err(|e| e.to_string())?;
    ensure!(ba == 0.5, "all-Yes balanced accuracy {ba}");
    Ok("BA 0.75, recall 0.7, F1 14/19, tool stats, all-Yes 0.5".into())
}

fn c11_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ds, ids) = dataset(dir.path(), "fixture", 6, 6);
    ensure!(ids.len() == 12, "{} images", ids.len());
    let script = dir.path().join("script.json");
    write_json(&script, &infer_script(&ids));
    let mut runs = Vec::new();
    let mut first_raw = String::new();
    for k in 0..3 {
        let out = dir.path().join(format!("run{k}.jsonl"));
        let jobs = ["1", "4", "3"][k];
        let o = run(&[
            "--jobs", jobs, "--out", path_str(&out), "infer", "--dataset", path_str(&ds), "--mock-script", path_str(&script),
        ]);
        ensure!(o.status.success(), "run {k} exited {:?}: {}", o.status.code(), stderr(&o));
        let text = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
        if k == 0 {
            first_raw = text.clone();
        }
        let stripped: Vec<String> = text
            .lines()
            .map(|l| {
                let mut v: Value = serde_json::from_str(l).unwrap();
                strip_timing(&mut v);
                serde_json::to_string(&v).unwrap()
            })
            .collect();
        runs.push(stripped.join("\n"));
    }
    ensure!(runs[0] == runs[1] && runs[1] == runs[2], "runs differ after removing timings");

    let records: Vec<DiagnosisRecord> = first_raw.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure!(records.len() == 12, "{} records", records.len());
    let (mut none, mut multi, mut failed) = (0, 0, 0);
    for r in &records {
        if r.rounds.len() == 1 && r.tool_calls.is_empty() {
            none += 1;
        } else if r.tool_calls.iter().any(|c| !c.success) {
            failed += 1;
        } else if r.tool_calls.len() >= 2 {
            multi += 1;
        }
        let truth = BinaryLabel::from_anomalous(is_defective(&r.sample_id));
        ensure!(r.final_answer.answer == Some(truth), "{} answered {:?}", r.sample_id, r.final_answer.answer);
    }
    ensure!(none >= 2 && multi >= 2 && failed >= 2, "paths: none {none}, multi-tool {multi}, failure {failed}");
    Ok(format!("3 identical runs; none-route {none}, multi-tool {multi}, tool failure {failed}"))
}

/// Template lines that only the teacher prompts carry.
fn teacher_only_lines() -> Vec<String> {
    let training: BTreeSet<&str> = TRAINING_PROMPT.lines().map(str::trim).collect();
    STAGE1_DESCRIPTION
        .lines()
        .chain(STAGE2_FORMATTING.lines())
        .map(str::trim)
        .filter(|l| l.len() >= 20 && !training.contains(l))
        .map(str::to_string)
        .collect()
}

fn c12_corpus() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ds, ids) = dataset(dir.path(), "fixture", 10, 10);
    let (script, scores) = corpus_script(&ids);
    let script_path = dir.path().join("teacher.json");
    write_json(&script_path, &script);
    let recs = dir.path().join("records.jsonl");
    let rej = dir.path().join("rejected.jsonl");
    let o = run(&[
        "--out", path_str(&recs), "corpus", "build", "--dataset", path_str(&ds), "--candidates", "2",
        "--mock-script", path_str(&script_path), "--rejected", path_str(&rej),
    ]);
    ensure!(o.status.success(), "build exited {:?}: {}", o.status.code(), stderr(&o));
    let records: Vec<CotRecord> = read_lines(&recs)?;
    let rejected: Vec<CotRecord> = read_lines(&rej)?;
    ensure!(records.len() + rejected.len() == 20, "{} + {} records", records.len(), rejected.len());
    ensure!(rejected.iter().all(|r| r.status == CotStatus::Rejected), "non-rejected record in the rejected file");

    let mut judged = 0;
    for r in &records {
        let expected = &scores[&r.sample.id];
        let got: Vec<f64> = r.candidates.iter().filter_map(|c| c.judge_score).collect();
        ensure!(&got == expected, "{}: judge scores {got:?}, script {expected:?}", r.sample.id);
        let valid: Vec<_> = r.candidates.iter().filter(|c| c.is_valid()).collect();
        ensure!(valid.len() == 2, "{}: {} valid candidates", r.sample.id, valid.len());
        let best = valid
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |acc, (i, c)| match (acc, c.judge_score) {
                (Some((_, b)), Some(s)) if s <= b => acc,
                (_, Some(s)) => Some((i, s)),
                (acc, None) => acc,
            })
            .map(|(i, _)| i)
            .unwrap();
        let canonical = render_trajectory(&parse_trajectory(&valid[best].text).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ensure!(r.trajectory == canonical, "{}: kept a candidate other than the best judged", r.sample.id);
        ensure!(r.judge_score == valid[best].judge_score, "{}: kept score {:?}", r.sample.id, r.judge_score);
        judged += 1;
    }

    let sft = dir.path().join("sft.jsonl");
    let o = run(&["--out", path_str(&sft), "corpus", "export", "--records", path_str(&recs)]);
    ensure!(o.status.success(), "export exited {:?}: {}", o.status.code(), stderr(&o));
    let lines: Vec<SftLine> = read_lines(&sft)?;
    ensure!(lines.len() == records.len(), "{} lines for {} records", lines.len(), records.len());
    for l in &lines {
        let t = parse_trajectory(&l.target_text).map_err(|e| format!("{}: {e}", l.id))?;
        ensure!(render_trajectory(&t).map_err(|e| e.to_string())? == l.target_text, "{}: target does not round-trip", l.id);
        let truth = BinaryLabel::from_anomalous(is_defective(&l.id));
        ensure!(t.answer() == truth, "{}: answer {} for label {truth}", l.id, t.answer());
    }

    let raw = std::fs::read_to_string(&sft).map_err(|e| e.to_string())?;
    let mut banned = teacher_only_lines();
    banned.push(SUPERVISION_MARKER.to_string());
    for p in ["{LOCATION or N/A}", "{ANOMALY_TYPE or N/A}", "{normal or abnormal}", "{Yes or No}", "{CATEGORY}", "{VIEW_ID}", "{Question}"] {
        banned.push(p.to_string());
    }
    for l in &lines {
        for b in &banned {
            ensure!(!l.instruction.contains(b.as_str()) && !l.target_text.contains(b.as_str()), "{}: contains {b:?}", l.id);
        }
    }
    ensure!(!raw.contains(SUPERVISION_MARKER), "exported file mentions the supervision block");
    Ok(format!(
        "{} exported ({} rejected), {judged} argmax checks, {} template strings absent",
        lines.len(),
        rejected.len(),
        banned.len()
    ))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome, Option<f64>); 12] = [
        (1, "reward arithmetic", c1_reward_arithmetic, Some(1.0)),
        (2, "grpo math", c2_grpo, Some(10.0)),
        (3, "otsu oracle", c3_otsu, Some(5.0)),
        (4, "foreground extraction", c4_foreground, Some(30.0)),
        (5, "clahe and canny", c5_clahe_canny, Some(10.0)),
        (6, "iou", c6_iou, None),
        (7, "trajectory grammar", c7_grammar, None),
        (8, "baseline parser", c8_baseline_parser, None),
        (9, "category-disjoint filter", c9_category_filter, None),
        (10, "metrics", c10_metrics, None),
        (11, "hermetic infer", c11_end_to_end, Some(20.0)),
        (12, "corpus pipeline", c12_corpus, None),
    ];
    let mut failed = 0;
    for (n, name, f, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if took > Duration::from_secs_f64(b) => Err(format!("over the {b}s budget")),
            (o, _) => o,
        };
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => {
                failed += 1;
                ("FAIL", e.clone())
            }
        };
        println!("criterion {n:>2} {name:<26} {status} ({detail}; {:.2}s)", took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} of 12 criteria failed");
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
