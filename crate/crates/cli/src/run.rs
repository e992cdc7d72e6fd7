use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use stemseg::config::{parse_assignments, RunConfig};
use stemseg::distill;
use stemseg::eval::{ablation_report, class_proportions, evaluate, format_iou, ConfusionMatrix, RunSummary};
use stemseg::maskhead::argmax_mask;
use stemseg::model::{hash64, save_checkpoint, Model, Stage, Upsampler};
use stemseg::pipeline::{
    labeled_pairs, load_corpus, load_entries, load_model, run_ablation, select_unlabeled, selected_samples, summarize, train_model,
    write_ablation, write_dataset, AblationStage,
};
use stemseg::synthdata::{load_manifest, save_manifest, save_mask, save_sample, Manifest, Sample};
use stemseg::ttscale::{infer_multiscale_detailed, save_logit_dump, TilePlan};

use crate::{Common, Split};

pub const THREADS_ENV: &str = "STEMSEG_THREADS";

/// One-line error: `stemseg: error kind=<kind> msg=<message>`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub msg: String,
}

impl CliError {
    pub fn new(kind: &'static str, msg: impl Into<String>) -> Self {
        CliError { kind, msg: msg.into() }
    }

    pub fn report(&self) {
        let msg: String = self.msg.chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        eprintln!("stemseg: error kind={} msg={}", self.kind, msg);
    }
}

impl From<stemseg::Error> for CliError {
    fn from(e: stemseg::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::new("config", format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::new("config", "thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("config", e.to_string()))?;
    }
    Ok(())
}

fn require_exists(what: &str, p: &Path) -> Result<()> {
    if !p.exists() {
        return Err(CliError::new("missing_path", format!("{what} {} does not exist", p.display())));
    }
    Ok(())
}

/// Config file, then `--set` and other flag overrides. Overrides that
/// change a file value are logged and recorded.
pub fn resolve(common: &Common, extra: &[(&str, String)]) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = RunConfig::default();
    let mut from_file = Vec::new();
    if let Some(path) = &common.config {
        require_exists("config file", path)?;
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        from_file = parse_assignments(&text, &path.display().to_string())?;
        for (k, v) in &from_file {
            cfg.set(k, v)?;
        }
    }
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::new("usage", format!("--set expects SECTION.KEY=VALUE, got {s:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(p) = &common.out {
        overrides.push(("paths.out".into(), p.display().to_string()));
    }
    if let Some(p) = &common.data {
        overrides.push(("paths.data".into(), p.display().to_string()));
    }
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let mut notes = Vec::new();
    for (k, v) in &overrides {
        if let Some((_, old)) = from_file.iter().find(|(fk, _)| fk == k) {
            if old != v {
                log::warn!("flag overrides config file: {k} = {v} (file: {old})");
                notes.push(format!("override {k} = {v} (config file had {old})"));
                cfg.set(k, v)?;
                continue;
            }
        }
        notes.push(format!("flag {k} = {v}"));
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    if let Some(d) = &cfg.data_dir {
        require_exists("dataset directory", d)?;
    }
    Ok((cfg, notes))
}

/// `<paths.out>/<label>-<hash>` with the resolved config echoed inside.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(common: &Common, cfg: &RunConfig, command: &str, descriptor: &str, notes: &[String]) -> Result<RunDir> {
        let label = common.label.clone().unwrap_or_else(|| command.to_string());
        if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || label.starts_with('.') {
            return Err(CliError::new("usage", format!("label {label:?} must be non-empty [A-Za-z0-9._-]")));
        }
        let resolved = cfg.render();
        let hash = hash64(format!("{resolved}\n[command]\n{descriptor}\n").as_bytes());
        let path = cfg.out_dir.join(format!("{label}-{hash:016x}"));
        if path.exists() {
            if !common.force {
                return Err(CliError::new(
                    "run_exists",
                    format!("run directory {} exists; pass --force to replace it", path.display()),
                ));
            }
            fs::remove_dir_all(&path).map_err(|e| io_err(&path, e))?;
        }
        fs::create_dir_all(&path).map_err(|e| io_err(&path, e))?;
        write(&path.join("config.ini"), &resolved)?;
        let mut cmd = format!("{descriptor}\n");
        for n in notes {
            let _ = writeln!(cmd, "{n}");
        }
        write(&path.join("command.txt"), &cmd)?;
        log::info!("run directory {}", path.display());
        Ok(RunDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn finish(&self) {
        println!("run_dir: {}", self.path.display());
    }
}

/// Path plus content hash, so a changed input gives a new run directory.
fn input_id(what: &str, p: &Path) -> Result<String> {
    require_exists(what, p)?;
    let bytes = if p.is_dir() {
        fs::read(p.join("manifest.txt")).map_err(|e| io_err(p, e))?
    } else {
        fs::read(p).map_err(|e| io_err(p, e))?
    };
    Ok(format!("{what}={} ({:016x})", p.display(), hash64(&bytes)))
}

fn split_samples(corpus: &stemseg::synthdata::Corpus, split: Split) -> &[Sample] {
    match split {
        Split::Val => &corpus.val,
        Split::Test => &corpus.test,
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn write_eval(dir: &RunDir, summary: &RunSummary) -> Result<()> {
    let text = format_iou(&summary.per_class_iou, summary.miou);
    print!("{text}");
    write(&dir.file("eval.txt"), &text)?;
    let json = serde_json::to_string(summary).expect("summaries serialize") + "\n";
    write(&dir.file("eval.json"), &json)
}

pub fn gen_data(common: &Common) -> Result<()> {
    let (cfg, notes) = resolve(common, &[])?;
    let dir = RunDir::create(common, &cfg, "gen-data", "gen-data", &notes)?;
    let corpus = stemseg::synthdata::build_corpus(&cfg.data.scene(), &cfg.data.sizes)?;
    write_dataset(&dir.path, &corpus)?;
    let masks: Vec<_> = corpus.labeled.iter().filter_map(|s| s.mask.as_ref()).collect();
    let shares = class_proportions(&masks)?;
    let mut text = String::new();
    for (i, name) in stemseg::synthdata::CLASS_NAMES.iter().enumerate() {
        let _ = writeln!(text, "{name:<10} {:>10} {:.4}", shares.counts[i], shares.shares[i]);
    }
    print!("{text}");
    write(&dir.file("class_shares.txt"), &text)?;
    println!(
        "labeled={} unlabeled={} val={} test={}",
        corpus.labeled.len(),
        corpus.unlabeled.len(),
        corpus.val.len(),
        corpus.test.len()
    );
    dir.finish();
    Ok(())
}

pub fn train(common: &Common, upsampler: Option<String>, iterations: Option<u64>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(u) = upsampler {
        extra.push(("model.upsampler", u));
    }
    if let Some(n) = iterations {
        extra.push(("train.iterations", n.to_string()));
    }
    let (cfg, notes) = resolve(common, &extra)?;
    let dir = RunDir::create(common, &cfg, "train", "train", &notes)?;
    let corpus = load_corpus(&cfg)?;
    let sapa = matches!(cfg.model.upsampler, Upsampler::Sapa { .. });
    let (model, log) = train_model(&cfg, &corpus, sapa)?;
    save_checkpoint(&dir.file("model.ckpt"), &model, cfg.train.iterations, Some(Stage::Supervised))?;
    write(&dir.file("metrics.jsonl"), &log.to_jsonl())?;
    let cm = evaluate(&model, &labeled_pairs(&corpus.val)?)?;
    write_eval(&dir, &summarize("train", model.config.describe(), &cm)?)?;
    dir.finish();
    Ok(())
}

fn save_selection(dir: &RunDir, pool: &[Sample], ranked: &[stemseg::select::RankedSample]) -> Result<()> {
    let entries = pool.iter().map(|s| save_sample(&dir.path, s)).collect::<stemseg::Result<_>>()?;
    save_manifest(&dir.file("manifest.txt"), &Manifest { entries })?;
    let jsonl: String = ranked
        .iter()
        .map(|r| serde_json::to_string(r).expect("ranked samples serialize") + "\n")
        .collect();
    write(&dir.file("selection.jsonl"), &jsonl)
}

pub fn select(common: &Common, teacher: &Path, n: Option<usize>) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(n) = n {
        extra.push(("select.n_per_domain", n.to_string()));
    }
    let (cfg, notes) = resolve(common, &extra)?;
    let desc = format!("select {}", input_id("teacher", teacher)?);
    let dir = RunDir::create(common, &cfg, "select", &desc, &notes)?;
    let teacher = load_model(teacher, &cfg)?.model;
    let corpus = load_corpus(&cfg)?;
    let ranked = select_unlabeled(&teacher, &cfg, &corpus)?;
    let pool: Vec<Sample> = selected_samples(&corpus, &ranked)?;
    save_selection(&dir, &pool, &ranked)?;
    println!("selected {} of {} unlabeled samples", ranked.len(), corpus.unlabeled.len());
    dir.finish();
    Ok(())
}

pub fn distill(common: &Common, teacher: &Path, selection: Option<&Path>) -> Result<()> {
    let (cfg, notes) = resolve(common, &[])?;
    let mut desc = format!("distill {}", input_id("teacher", teacher)?);
    if let Some(s) = selection {
        desc.push(' ');
        desc.push_str(&input_id("selection", s)?);
    }
    let dir = RunDir::create(common, &cfg, "distill", &desc, &notes)?;
    let teacher = load_model(teacher, &cfg)?.model;
    let corpus = load_corpus(&cfg)?;
    let pool: Vec<Sample> = match selection {
        Some(s) => load_entries(s, &load_manifest(&s.join("manifest.txt"))?)?
            .into_iter()
            .map(Sample::without_mask)
            .collect(),
        None => selected_samples(&corpus, &select_unlabeled(&teacher, &cfg, &corpus)?)?,
    };
    log::info!("distilling with {} unlabeled samples", pool.len());
    let ckpt = dir.file("checkpoint.ckpt");
    let outcome = distill::run_with(teacher, &corpus.labeled, &pool, &corpus.val, &cfg.distill(), &mut |state, _| {
        save_checkpoint(&ckpt, &state.teacher, state.iteration, Some(state.stage))
    })?;
    let last = outcome.log.records.last().map_or(0, |r| r.iteration);
    save_checkpoint(&dir.file("teacher.ckpt"), &outcome.teacher, last, Some(Stage::Ema))?;
    write(&dir.file("metrics.jsonl"), &outcome.log.to_jsonl())?;
    let cm = evaluate(&outcome.teacher, &labeled_pairs(&corpus.val)?)?;
    write_eval(&dir, &summarize("distill", format!("stopped_early={}", outcome.stopped_early), &cm)?)?;
    dir.finish();
    Ok(())
}

fn scale_label(scales: &[f64]) -> String {
    let s: Vec<String> = scales.iter().map(f64::to_string).collect();
    format!("S={{{}}}", s.join(","))
}

pub fn infer(
    common: &Common,
    model_path: &Path,
    scale_sets: &[String],
    window: Option<String>,
    stride: Option<String>,
    split: Split,
    dump_logits: bool,
) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(first) = scale_sets.first() {
        extra.push(("ttscale.scales", first.clone()));
    }
    if let Some(w) = window {
        extra.push(("ttscale.window", w));
    }
    if let Some(t) = stride {
        extra.push(("ttscale.stride", t));
    }
    let (cfg, notes) = resolve(common, &extra)?;
    // each extra set is validated through the same key parser
    let mut plans = vec![cfg.tile.clone()];
    for set in scale_sets.iter().skip(1) {
        let mut c = cfg.clone();
        c.set("ttscale.scales", set)?;
        c.validate()?;
        plans.push(c.tile);
    }
    let desc = format!(
        "infer {} split={} dump_logits={dump_logits} scale_sets={}",
        input_id("model", model_path)?,
        split_name(split),
        plans.iter().map(|p| scale_label(&p.scales)).collect::<Vec<_>>().join(";")
    );
    let dir = RunDir::create(common, &cfg, "infer", &desc, &notes)?;
    let model = load_model(model_path, &cfg)?.model;
    let corpus = load_corpus(&cfg)?;
    let samples = split_samples(&corpus, split);
    let mut rows = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let sub = dir.file(&format!("scales_{i}"));
        fs::create_dir_all(sub.join("masks")).map_err(|e| io_err(&sub, e))?;
        if dump_logits {
            fs::create_dir_all(sub.join("logits")).map_err(|e| io_err(&sub, e))?;
        }
        let cm = infer_split(&model, samples, plan, &sub, dump_logits)?;
        let label = scale_label(&plan.scales);
        let desc = format!(
            "window={}x{} stride={}x{} windows_per_image={}",
            plan.window.0,
            plan.window.1,
            plan.stride.0,
            plan.stride.1,
            samples.first().map_or(Ok(0), |s| plan.window_count(s.image.h(), s.image.w()))?
        );
        if let Some(cm) = cm {
            rows.push(summarize(&label, desc, &cm)?);
        }
    }
    if !rows.is_empty() {
        let report = ablation_report(&format!("test-time scaling, {} mIoU", split_name(split)), &rows)?;
        print!("{}", report.text);
        write(&dir.file("report.txt"), &report.text)?;
        write(&dir.file("report.jsonl"), &report.jsonl)?;
    }
    dir.finish();
    Ok(())
}

/// Predicted masks (and logits) for every sample; the confusion matrix
/// when every sample is labeled.
fn infer_split(model: &Model, samples: &[Sample], plan: &TilePlan, sub: &Path, dump: bool) -> Result<Option<ConfusionMatrix>> {
    let hash = model.config.hash();
    let preds: Vec<_> = samples
        .par_iter()
        .map(|s| -> stemseg::Result<_> {
            let (logits, per_scale) = infer_multiscale_detailed(model, &s.image, plan)?;
            let pred = argmax_mask(&logits)?;
            save_mask(&sub.join("masks").join(format!("{}.pgm", s.sample_id)), &pred)?;
            if dump {
                save_logit_dump(&sub.join("logits").join(format!("{}.bin", s.sample_id)), hash, &per_scale)?;
            }
            Ok(pred)
        })
        .collect::<stemseg::Result<_>>()?;
    if samples.iter().any(|s| s.mask.is_none()) {
        return Ok(None);
    }
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (p, s) in preds.iter().zip(samples) {
        cm.accumulate(p, s.mask.as_ref().expect("checked"))?;
    }
    Ok(Some(cm))
}

pub fn eval(common: &Common, model_path: &Path, split: Split) -> Result<()> {
    let (cfg, notes) = resolve(common, &[])?;
    let desc = format!("eval {} split={}", input_id("model", model_path)?, split_name(split));
    let dir = RunDir::create(common, &cfg, "eval", &desc, &notes)?;
    let model = load_model(model_path, &cfg)?.model;
    let corpus = load_corpus(&cfg)?;
    let cm = evaluate(&model, &labeled_pairs(split_samples(&corpus, split))?)?;
    write_eval(&dir, &summarize(split_name(split), model.config.describe(), &cm)?)?;
    dir.finish();
    Ok(())
}

pub fn ablate(common: &Common, stages: &str) -> Result<()> {
    let stages = AblationStage::parse_list(stages)?;
    let (cfg, notes) = resolve(common, &[])?;
    let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
    let dir = RunDir::create(common, &cfg, "ablate", &format!("ablate stages={}", names.join(",")), &notes)?;
    let corpus = load_corpus(&cfg)?;
    let out = run_ablation(&cfg, &corpus, &stages)?;
    write_ablation(&dir.path, &out)?;
    for (name, m, stage) in [
        ("baseline.ckpt", &out.baseline, Stage::Supervised),
        ("sapa.ckpt", &out.sapa, Stage::Supervised),
        ("distilled.ckpt", &out.distilled, Stage::Ema),
    ] {
        if let Some(m) = m {
            save_checkpoint(&dir.file(name), m, 0, Some(stage))?;
        }
    }
    print!("{}", out.report.text);
    dir.finish();
    Ok(())
}
