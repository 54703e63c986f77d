use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use patchwise::config::RunConfig;
use patchwise::corpus::{export_sft, CorpusBuilder, CotRecord, CotStatus, ExportOptions};
use patchwise::evaluation::{
    category_disjoint_filter, evaluate, load_dataset, read_predictions, render_table, tool_usage_stats,
    CategoryNormalizer, LoadedDataset, Sample, UnparseablePolicy,
};
use patchwise::gateway::{Gateway, OpenAiTransport, Policy, RecordingSleeper, ScriptedPolicy};
use patchwise::imaging::{
    clahe, crop, edge_map, foreground_extract_with, measure_angle, measure_distance, BBox, ForegroundParams,
    Point, RasterImage,
};
use patchwise::orchestrator::{NoneRoute, Orchestrator, SampleRef};
use patchwise::priors::{PriorSource, PriorStore};
use patchwise::rewards::{
    grpo_objective, kl_estimate, score_trajectory, ScoringInput, StdMode, Taxonomy, TrajectoryGroup,
};
use patchwise::trajectory::BinaryLabel;

use crate::output::{missing_out_warning, read_jsonl, read_text, table, usage, write_json, write_jsonl};
use crate::{Cli, Command, CorpusCmd, EnhanceMode, FilterCmd, RewardCmd, ToolCmd};

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx { cfg, out: cli.out };
    match cli.command {
        Command::Tool(t) => tool(&ctx, t),
        Command::Infer(a) => infer(ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Reward(r) => reward(&ctx, r),
        Command::Corpus(c) => corpus(ctx, c),
        Command::Filter(FilterCmd::Categories { train, test }) => filter_categories(&ctx, &train, &test),
    }
}

fn parse_point(s: &str) -> anyhow::Result<Point> {
    Point::parse(s).ok_or_else(|| usage(format!("expected a point `x,y`, got {s:?}")))
}

fn load_image(path: &Path) -> anyhow::Result<RasterImage> {
    RasterImage::load_png(path).with_context(|| format!("loading {}", path.display()))
}

fn tool(ctx: &Ctx, cmd: ToolCmd) -> anyhow::Result<()> {
    match cmd {
        ToolCmd::Crop { image, bbox, background, save } => {
            let img = load_image(&image)?;
            let (b, fallback) = match bbox {
                Some(s) => (BBox::parse(&s).ok_or_else(|| usage(format!("expected `x0,y0,x1,y1`, got {s:?}")))?, None),
                None => {
                    let bg = background.as_deref().map(load_image).transpose()?;
                    let r = foreground_extract_with(&img, bg.as_ref(), &ForegroundParams::default())?;
                    (r.bbox, Some(r.fallback))
                }
            };
            let cropped = crop(&img, &b)?;
            if let Some(p) = &save {
                cropped.save_png(p)?;
            }
            println!("{b}{}", if fallback == Some(true) { " (center fallback)" } else { "" });
            write_json(ctx.out(), &json!({"bbox": b, "fallback": fallback, "width": cropped.width(), "height": cropped.height()}))
        }
        ToolCmd::Enhance { image, mode, clip, tiles, low, high, save } => {
            let gray = load_image(&image)?.to_gray();
            let s = &ctx.cfg.inference.tools;
            let out = match mode {
                EnhanceMode::Clahe => {
                    let tiles = match tiles {
                        Some(t) => {
                            let (c, r) = t.split_once(',').ok_or_else(|| usage("--tiles expects `cols,rows`"))?;
                            let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| usage(format!("bad tile count {v:?}")));
                            (parse(c)?, parse(r)?)
                        }
                        None => (s.clahe_tiles[0], s.clahe_tiles[1]),
                    };
                    clahe(&gray, clip.unwrap_or(s.clahe_clip), tiles)?
                }
                EnhanceMode::Edge => edge_map(&gray, low.unwrap_or(s.canny_low), high.unwrap_or(s.canny_high))?,
            };
            if let Some(p) = &save {
                out.save_png(p)?;
            }
            let edge_pixels = matches!(mode, EnhanceMode::Edge).then(|| out.data().iter().filter(|&&v| v > 0).count());
            match edge_pixels {
                Some(n) => println!("{}x{} edge map, {n} edge pixels", out.width(), out.height()),
                None => println!("{}x{} enhanced", out.width(), out.height()),
            }
            write_json(ctx.out(), &json!({"width": out.width(), "height": out.height(), "edge_pixels": edge_pixels}))
        }
        ToolCmd::Measure { distance, angle, scale, units } => {
            let m = match (distance, angle) {
                (Some(d), _) => {
                    let scale = scale.map(|s| (s, units.as_deref().unwrap_or("mm")));
                    measure_distance(parse_point(&d[0])?, parse_point(&d[1])?, scale)?
                }
                (None, Some(a)) => measure_angle(parse_point(&a[0])?, parse_point(&a[1])?, parse_point(&a[2])?)?,
                (None, None) => return Err(usage("give --distance or --angle")),
            };
            println!("{m}");
            write_json(ctx.out(), &m)
        }
        ToolCmd::Prior { priors, category, view, set } => {
            let path = priors
                .or_else(|| ctx.cfg.priors.clone())
                .ok_or_else(|| usage("--priors is required (or set `priors` in the config)"))?;
            match set {
                Some(text) => {
                    let store = if path.exists() { PriorStore::load(&path)? } else { PriorStore::new() };
                    store.put_prior(&category, &view, &text)?;
                    store.save(&path)?;
                    println!("stored prior for {category}/{view}");
                    write_json(ctx.out(), &json!({"category": category, "view": view, "prior": text}))
                }
                None => {
                    let store = PriorStore::load(&path)?;
                    let found = store.get_prior(&category, &view)?;
                    println!("{}", found.as_deref().unwrap_or("(no prior)"));
                    write_json(ctx.out(), &json!({"category": category, "view": view, "prior": found}))
                }
            }
        }
    }
}

fn dataset_roots(flags: Vec<PathBuf>, cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let roots = if flags.is_empty() { cfg.datasets.clone() } else { flags };
    if roots.is_empty() {
        return Err(usage("no dataset given; pass --dataset or set `datasets` in the config"));
    }
    Ok(roots)
}

fn load_datasets(roots: &[PathBuf]) -> anyhow::Result<Vec<LoadedDataset>> {
    let norm = CategoryNormalizer::default();
    roots
        .iter()
        .map(|r| {
            let ds = load_dataset(r, &norm)?;
            for w in &ds.warnings {
                log::warn!("{w}");
            }
            Ok(ds)
        })
        .collect()
}

/// Retrying gateway over the scripted backend or the HTTP endpoint.
fn build_policy(mock: Option<&Path>, cfg: &RunConfig) -> anyhow::Result<Gateway> {
    let gw = match mock {
        Some(p) => {
            let script = ScriptedPolicy::load(p).with_context(|| format!("loading mock script {}", p.display()))?;
            Gateway::new(script).with_sleeper(Arc::new(RecordingSleeper::default()))
        }
        None => {
            let endpoint = cfg.endpoint.clone().with_env();
            let transport = OpenAiTransport::from_env(endpoint.clone())?;
            let key = transport.api_key().to_string();
            let mut gw = Gateway::new(transport);
            if let Some(log_path) = &cfg.request_log {
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(log_path)
                    .with_context(|| format!("opening {}", log_path.display()))?;
                gw = gw.with_log(Box::new(f), vec![key]);
            }
            gw.with_concurrency(endpoint.concurrency)
        }
    };
    Ok(gw.with_retry(cfg.retry))
}

fn answer_str(a: Option<BinaryLabel>) -> String {
    a.map_or_else(|| "-".to_string(), |a| a.as_str().to_string())
}

fn infer(mut ctx: Ctx, a: crate::InferArgs) -> anyhow::Result<()> {
    if a.baseline_none_route {
        ctx.cfg.inference.none_route = NoneRoute::Baseline;
    }
    if a.no_logprobs {
        ctx.cfg.inference.want_logprobs = false;
    }
    missing_out_warning(ctx.out.as_ref(), "diagnosis records");
    let datasets = load_datasets(&dataset_roots(a.datasets, &ctx.cfg)?)?;
    let samples: Vec<SampleRef> = datasets
        .iter()
        .flat_map(|d| &d.samples)
        .map(|s| SampleRef { id: s.id.clone(), path: s.path.clone(), category: s.category.clone(), view: s.view.clone() })
        .collect();
    let priors = match a.priors.or_else(|| ctx.cfg.priors.clone()) {
        Some(p) => Some(PriorStore::load(&p).with_context(|| format!("loading priors {}", p.display()))?),
        None => None,
    };
    let policy = build_policy(a.backend.mock_script.as_deref(), &ctx.cfg)?;
    let orch = Orchestrator::new(&policy, priors.as_ref().map(|p| p as &dyn PriorSource), &ctx.cfg.inference);
    let results = orch.run_batch(&samples, ctx.cfg.jobs)?;

    let mut records = Vec::with_capacity(results.len());
    let mut failures = 0usize;
    let mut rows = vec![vec!["sample".into(), "answer".into(), "rounds".into(), "tools".into(), "notes".into()]];
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(rec) => {
                let tools: Vec<String> = rec
                    .tool_calls
                    .iter()
                    .map(|t| format!("{}{}", t.call.tool.as_str(), if t.success { "" } else { "!" }))
                    .collect();
                rows.push(vec![
                    rec.sample_id.clone(),
                    answer_str(rec.final_answer.answer),
                    rec.rounds.len().to_string(),
                    if tools.is_empty() { "-".into() } else { tools.join(",") },
                    rec.notes.len().to_string(),
                ]);
                records.push(rec);
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}: {e}", s.id);
            }
        }
    }
    print!("{}", table(&rows));
    write_jsonl(ctx.out(), &records)?;
    if failures > 0 {
        bail!("{failures} of {} samples failed", samples.len());
    }
    Ok(())
}

fn eval(ctx: &Ctx, a: crate::EvalArgs) -> anyhow::Result<()> {
    let datasets = load_datasets(&dataset_roots(a.datasets, &ctx.cfg)?)?;
    let (preds, records) = read_predictions(&read_text(&a.predictions)?)?;
    let policy = if a.unparseable_as_normal { UnparseablePolicy::AsNormal } else { UnparseablePolicy::Exclude };
    let mut report = evaluate(&datasets, &preds, policy);
    if !records.is_empty() {
        report.tool_usage = Some(tool_usage_stats(&records)?);
    }
    print!("{}", render_table(&report));
    write_json(ctx.out(), &report)
}

fn load_taxonomy(flag: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<Taxonomy> {
    match flag.or_else(|| cfg.taxonomy.clone()) {
        Some(p) => Ok(Taxonomy::from_toml(&read_text(&p)?)?),
        None => Ok(Taxonomy::default()),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrpoLine {
    rewards: Vec<f64>,
    #[serde(default)]
    ratios: Option<Vec<f64>>,
    #[serde(default)]
    logp_theta: Option<Vec<f64>>,
    #[serde(default)]
    logp_ref: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct GrpoRow {
    #[serde(flatten)]
    group: TrajectoryGroup,
    #[serde(skip_serializing_if = "Option::is_none")]
    kl: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    objective: Option<f64>,
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn reward(ctx: &Ctx, cmd: RewardCmd) -> anyhow::Result<()> {
    match cmd {
        RewardCmd::Score { input, taxonomy } => {
            let tax = load_taxonomy(taxonomy, &ctx.cfg)?;
            let inputs: Vec<ScoringInput> = read_jsonl(&input)?;
            let mut rows = vec![["#", "acc", "loc", "type", "tool", "format", "total"].map(String::from).to_vec()];
            let mut out = Vec::with_capacity(inputs.len());
            for (i, inp) in inputs.iter().enumerate() {
                let b = score_trajectory(inp, &tax, &ctx.cfg.reward).with_context(|| format!("input {}", i + 1))?;
                rows.push(vec![
                    (i + 1).to_string(),
                    b.acc.to_string(),
                    fmt4(b.loc),
                    fmt4(b.type_),
                    fmt4(b.tool),
                    fmt4(b.format),
                    fmt4(b.total),
                ]);
                out.push(b);
            }
            print!("{}", table(&rows));
            write_jsonl(ctx.out(), &out)
        }
        RewardCmd::Grpo { input, sample_std } => {
            let p = &ctx.cfg.grpo;
            let mode = if sample_std { StdMode::Sample } else { p.std_mode };
            let lines: Vec<GrpoLine> = read_jsonl(&input)?;
            let mut rows = vec![["group", "size", "advantages", "objective"].map(String::from).to_vec()];
            let mut out = Vec::with_capacity(lines.len());
            for (i, l) in lines.into_iter().enumerate() {
                let ctxmsg = || format!("group {}", i + 1);
                let group = TrajectoryGroup::new(l.rewards, mode).with_context(ctxmsg)?;
                let kl = match (l.logp_theta, l.logp_ref) {
                    (Some(t), Some(r)) => {
                        if t.len() != r.len() {
                            bail!("group {}: logp_theta and logp_ref differ in length", i + 1);
                        }
                        Some(t.iter().zip(&r).map(|(&t, &r)| kl_estimate(t, r)).collect::<Result<Vec<_>, _>>().with_context(ctxmsg)?)
                    }
                    (None, None) => None,
                    _ => bail!("group {}: give both logp_theta and logp_ref", i + 1),
                };
                let objective = match &l.ratios {
                    Some(r) => {
                        let kls = kl.clone().unwrap_or_else(|| vec![0.0; r.len()]);
                        Some(grpo_objective(r, &group.advantages, &kls, p.epsilon, p.kl_beta).with_context(ctxmsg)?)
                    }
                    None => None,
                };
                rows.push(vec![
                    (i + 1).to_string(),
                    group.len().to_string(),
                    group.advantages.iter().map(|&a| fmt4(a)).collect::<Vec<_>>().join(" "),
                    objective.map_or_else(|| "-".into(), fmt4),
                ]);
                out.push(GrpoRow { group, kl, objective });
            }
            print!("{}", table(&rows));
            write_jsonl(ctx.out(), &out)
        }
    }
}

fn corpus(mut ctx: Ctx, cmd: CorpusCmd) -> anyhow::Result<()> {
    match cmd {
        CorpusCmd::Build { datasets, limit, candidates, max_attempts, no_judge, rejected, backend } => {
            if let Some(c) = candidates {
                ctx.cfg.corpus.candidates = c;
            }
            if let Some(m) = max_attempts {
                ctx.cfg.corpus.max_attempts = m;
            }
            if ctx.cfg.corpus.candidates == 0 || ctx.cfg.corpus.max_attempts == 0 {
                return Err(usage("--candidates and --max-attempts must be at least 1"));
            }
            missing_out_warning(ctx.out.as_ref(), "corpus records");
            let loaded = load_datasets(&dataset_roots(datasets, &ctx.cfg)?)?;
            let limit = limit.unwrap_or(ctx.cfg.corpus.target_size);
            let samples: Vec<Sample> = loaded.into_iter().flat_map(|d| d.samples).take(limit).collect();
            let policy = build_policy(backend.mock_script.as_deref(), &ctx.cfg)?;
            let builder = CorpusBuilder {
                teacher: &policy,
                judge: (!no_judge).then_some(&policy as &dyn Policy),
                config: &ctx.cfg.corpus,
            };
            let results = builder.build_all(&samples, ctx.cfg.jobs)?;
            let (mut kept, mut dropped, mut failures) = (Vec::new(), Vec::new(), 0usize);
            let mut rows = vec![["sample", "label", "status", "attempts", "score"].map(String::from).to_vec()];
            for (s, r) in samples.iter().zip(results) {
                match r {
                    Ok(rec) => {
                        rows.push(vec![
                            rec.sample.id.clone(),
                            rec.sample.label.as_str().into(),
                            format!("{:?}", rec.status).to_lowercase(),
                            rec.attempts.to_string(),
                            rec.judge_score.map_or_else(|| "-".into(), |s| format!("{s:.2}")),
                        ]);
                        if rec.status == CotStatus::Rejected {
                            dropped.push(rec);
                        } else {
                            kept.push(rec);
                        }
                    }
                    Err(e) => {
                        failures += 1;
                        eprintln!("{}: {e}", s.id);
                    }
                }
            }
            print!("{}", table(&rows));
            println!("retained {}, rejected {}, failed {failures}", kept.len(), dropped.len());
            write_jsonl(ctx.out(), &kept)?;
            write_jsonl(rejected.as_deref(), &dropped)?;
            if failures > 0 {
                bail!("{failures} of {} samples failed", samples.len());
            }
            Ok(())
        }
        CorpusCmd::Export { records, balance } => {
            missing_out_warning(ctx.out.as_ref(), "SFT lines");
            let recs: Vec<CotRecord> = read_jsonl(&records)?;
            let lines = export_sft(&recs, ExportOptions { balance, seed: ctx.cfg.seed })?;
            let yes = lines.iter().filter(|l| l.target_text.ends_with("<answer>Yes</answer>")).count();
            println!("exported {} lines: {yes} anomalous, {} normal", lines.len(), lines.len() - yes);
            write_jsonl(ctx.out(), &lines)
        }
    }
}

fn name_list(arg: &str) -> anyhow::Result<Vec<String>> {
    let p = Path::new(arg);
    let text = if p.is_file() { read_text(p)? } else { arg.replace(',', "\n") };
    Ok(text.lines().map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
}

fn filter_categories(ctx: &Ctx, train: &str, test: &str) -> anyhow::Result<()> {
    let split = category_disjoint_filter(&CategoryNormalizer::default(), &name_list(train)?, &name_list(test)?)?;
    let mut rows = vec![["category", "status", "matched"].map(String::from).to_vec()];
    for r in &split.removed {
        rows.push(vec![r.category.clone(), "removed".into(), r.matched.join(",")]);
    }
    for c in &split.retained {
        rows.push(vec![c.clone(), "kept".into(), String::new()]);
    }
    print!("{}", table(&rows));
    write_json(ctx.out(), &split)
}
