//! Dataset layout on disk and the staged ablation: baseline, +SAPA,
//! +distill, +ttscale.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::distill::{self, MetricsLog};
use crate::error::{Error, Result};
use crate::eval::{ablation_report, evaluate, ConfusionMatrix, Report, RunSummary};
use crate::model::{load_checkpoint, Checkpoint, Model, Segmenter, TensorArchive};
use crate::select::{rank_pool, select_top_per_domain, RankedSample};
use crate::synthdata::{build_corpus, load_manifest, load_sample, save_manifest, save_sample, Corpus, Manifest, Sample, SegMask};
use crate::tensor::Tensor;
use crate::ttscale::MultiScale;

/// Training pool (labeled and unlabeled entries) of a dataset directory.
pub const TRAIN_MANIFEST: &str = "manifest.txt";
pub const VAL_MANIFEST: &str = "val_manifest.txt";
pub const TEST_MANIFEST: &str = "test_manifest.txt";

/// Writes `images/`, `masks/` and the three manifests under `dir`.
pub fn write_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    let write = |name: &str, samples: &[&Sample]| -> Result<()> {
        let entries = samples.iter().map(|s| save_sample(dir, s)).collect::<Result<_>>()?;
        save_manifest(&dir.join(name), &Manifest { entries })
    };
    let train: Vec<&Sample> = corpus.labeled.iter().chain(&corpus.unlabeled).collect();
    write(TRAIN_MANIFEST, &train)?;
    write(VAL_MANIFEST, &corpus.val.iter().collect::<Vec<_>>())?;
    write(TEST_MANIFEST, &corpus.test.iter().collect::<Vec<_>>())
}

pub fn load_entries(dir: &Path, manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest.entries.par_iter().map(|e| load_sample(dir, e)).collect()
}

/// Inverse of [`write_dataset`] up to 8-bit image quantisation.
pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let load = |name: &str| load_entries(dir, &load_manifest(&dir.join(name))?);
    let (labeled, unlabeled) = load(TRAIN_MANIFEST)?.into_iter().partition(|s| s.mask.is_some());
    let need_masks = |name: &str, v: Vec<Sample>| {
        if let Some(s) = v.iter().find(|s| s.mask.is_none()) {
            return Err(Error::format(dir.join(name), format!("sample {} has no mask", s.sample_id)));
        }
        Ok(v)
    };
    Ok(Corpus {
        labeled,
        unlabeled,
        val: need_masks(VAL_MANIFEST, load(VAL_MANIFEST)?)?,
        test: need_masks(TEST_MANIFEST, load(TEST_MANIFEST)?)?,
    })
}

/// The configured dataset directory, or a corpus generated in memory.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data_dir {
        Some(dir) => read_dataset(dir),
        None => build_corpus(&cfg.data.scene(), &cfg.data.sizes),
    }
}

/// Loads a checkpoint written for the configured model under either
/// upsampler; any other config hash is a mismatch.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let found = TensorArchive::load(path)?.config_hash;
    let candidates = [cfg.model, cfg.model_with(true), cfg.model_with(false)];
    match candidates.iter().find(|m| m.hash() == found) {
        Some(m) => load_checkpoint(path, m, false),
        None => Err(Error::ConfigHashMismatch {
            expected: cfg.model.hash(),
            found,
        }),
    }
}

pub fn labeled_pairs(samples: &[Sample]) -> Result<Vec<(&Tensor, &SegMask)>> {
    samples
        .iter()
        .map(|s| {
            s.mask
                .as_ref()
                .map(|m| (&s.image, m))
                .ok_or_else(|| Error::invalid(format!("sample {} has no mask", s.sample_id)))
        })
        .collect()
}

pub fn summarize(label: &str, config: String, cm: &ConfusionMatrix) -> Result<RunSummary> {
    let (per_class_iou, miou) = cm.miou()?;
    Ok(RunSummary {
        label: label.to_string(),
        config,
        per_class_iou,
        miou,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AblationStage {
    Baseline,
    Sapa,
    Distill,
    Ttscale,
}

impl AblationStage {
    pub const ALL: [AblationStage; 4] = [AblationStage::Baseline, AblationStage::Sapa, AblationStage::Distill, AblationStage::Ttscale];

    pub fn name(self) -> &'static str {
        match self {
            AblationStage::Baseline => "baseline",
            AblationStage::Sapa => "sapa",
            AblationStage::Distill => "distill",
            AblationStage::Ttscale => "ttscale",
        }
    }

    /// Row label in the report.
    pub fn label(self) -> &'static str {
        match self {
            AblationStage::Baseline => "baseline",
            AblationStage::Sapa => "+SAPA",
            AblationStage::Distill => "+distill",
            AblationStage::Ttscale => "+ttscale",
        }
    }

    /// Comma-separated stage names. Each stage after `sapa` builds on the
    /// previous one, so `distill` needs `sapa` and `ttscale` needs
    /// `distill`.
    pub fn parse_list(s: &str) -> Result<Vec<AblationStage>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let st = AblationStage::ALL
                .into_iter()
                .find(|st| st.name() == part)
                .ok_or_else(|| Error::Config(format!("unknown ablation stage {part:?}")))?;
            if out.contains(&st) {
                return Err(Error::Config(format!("stage {part} listed twice")));
            }
            out.push(st);
        }
        out.sort();
        if out.is_empty() {
            return Err(Error::Config("no ablation stages given".into()));
        }
        if out.contains(&AblationStage::Distill) && !out.contains(&AblationStage::Sapa) {
            return Err(Error::Config("stage distill needs sapa".into()));
        }
        if out.contains(&AblationStage::Ttscale) && !out.contains(&AblationStage::Distill) {
            return Err(Error::Config("stage ttscale needs distill".into()));
        }
        Ok(out)
    }
}

/// Supervised training of a fresh model with or without SAPA.
pub fn train_model(cfg: &RunConfig, corpus: &Corpus, sapa: bool) -> Result<(Model, MetricsLog)> {
    let model = Model::init(cfg.model_with(sapa), cfg.init_seed)?;
    distill::train_supervised(model, &corpus.labeled, &corpus.val, &cfg.supervised())
}

/// Ranks the unlabeled pool with `teacher` and keeps the top per domain.
pub fn select_unlabeled(teacher: &dyn Segmenter, cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<RankedSample>> {
    let ranked = rank_pool(teacher, &corpus.unlabeled)?;
    select_top_per_domain(&ranked, cfg.n_per_domain)
}

/// Unlabeled samples in selection order.
pub fn selected_samples(corpus: &Corpus, selected: &[RankedSample]) -> Result<Vec<Sample>> {
    let by_id: std::collections::HashMap<&str, &Sample> = corpus.unlabeled.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    selected
        .iter()
        .map(|r| {
            by_id
                .get(r.sample_id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| Error::invalid(format!("selected sample {} not in the unlabeled pool", r.sample_id)))
        })
        .collect()
}

pub struct AblationRow {
    pub stage: AblationStage,
    pub summary: RunSummary,
    pub log: MetricsLog,
    /// Wall time of the stage; not part of the report.
    pub seconds: f64,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub report: Report,
    pub baseline: Option<Model>,
    pub sapa: Option<Model>,
    pub distilled: Option<Model>,
    pub selected: Vec<RankedSample>,
}

pub const ABLATION_TITLE: &str = "ablation of stages, validation mIoU";

/// Runs the requested stages in order and scores each row on the
/// validation split.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus, stages: &[AblationStage]) -> Result<AblationOutcome> {
    cfg.validate()?;
    let val = labeled_pairs(&corpus.val)?;
    if val.is_empty() {
        return Err(Error::invalid("ablation needs validation samples"));
    }
    let mut rows = Vec::new();
    let mut out = AblationOutcome {
        rows: Vec::new(),
        report: Report {
            text: String::new(),
            jsonl: String::new(),
        },
        baseline: None,
        sapa: None,
        distilled: None,
        selected: Vec::new(),
    };
    for &stage in stages {
        ::log::info!("ablation stage {}", stage.name());
        let start = Instant::now();
        let (config, cm, log) = match stage {
            AblationStage::Baseline => {
                let (m, log) = train_model(cfg, corpus, false)?;
                let cm = evaluate(&m, &val)?;
                out.baseline = Some(m);
                ("upsampler=bilinear".to_string(), cm, log)
            }
            AblationStage::Sapa => {
                let (m, log) = train_model(cfg, corpus, true)?;
                let cm = evaluate(&m, &val)?;
                out.sapa = Some(m);
                (format!("upsampler=sapa(r={},d={})", cfg.sapa.0, cfg.sapa.1), cm, log)
            }
            AblationStage::Distill => {
                let teacher = out.sapa.as_ref().ok_or_else(|| Error::Config("stage distill needs sapa".into()))?;
                out.selected = select_unlabeled(teacher, cfg, corpus)?;
                let pool = selected_samples(corpus, &out.selected)?;
                let d = cfg.distill();
                let res = distill::run(teacher.clone(), &corpus.labeled, &pool, &corpus.val, &d)?;
                let cm = evaluate(&res.teacher, &val)?;
                out.distilled = Some(res.teacher);
                let desc = format!(
                    "selected={} burn_in={} total={} alpha={} lambda_u={} stopped_early={}",
                    pool.len(),
                    d.burn_in,
                    d.total,
                    d.alpha,
                    d.lambda_u,
                    res.stopped_early
                );
                (desc, cm, res.log)
            }
            AblationStage::Ttscale => {
                let model = out.distilled.as_ref().ok_or_else(|| Error::Config("stage ttscale needs distill".into()))?;
                let ms = MultiScale {
                    model,
                    plan: cfg.tile.clone(),
                };
                let cm = evaluate(&ms, &val)?;
                let scales: Vec<String> = cfg.tile.scales.iter().map(f64::to_string).collect();
                let desc = format!(
                    "scales={} window={}x{} stride={}x{}",
                    scales.join(","),
                    cfg.tile.window.0,
                    cfg.tile.window.1,
                    cfg.tile.stride.0,
                    cfg.tile.stride.1
                );
                (desc, cm, MetricsLog::default())
            }
        };
        let summary = summarize(stage.label(), config, &cm)?;
        ::log::info!("{} mIoU {:.4}", stage.label(), summary.miou);
        rows.push(AblationRow {
            stage,
            summary,
            log,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let summaries: Vec<RunSummary> = rows.iter().map(|r| r.summary.clone()).collect();
    out.report = ablation_report(ABLATION_TITLE, &summaries)?;
    out.rows = rows;
    Ok(out)
}

/// Placement of the ablation artefacts under `dir`.
pub fn write_ablation(dir: &Path, outcome: &AblationOutcome) -> Result<()> {
    let put = |name: &str, text: &str| fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e));
    put("report.txt", &outcome.report.text)?;
    put("report.jsonl", &outcome.report.jsonl)?;
    for row in &outcome.rows {
        if !row.log.records.is_empty() {
            put(&format!("metrics_{}.jsonl", row.stage.name()), &row.log.to_jsonl())?;
        }
    }
    Ok(())
}
