//! Run configuration: `key = value` lines grouped under `[section]` headers.
//! `#` starts a comment line. Every key is `section.key`; unknown keys are
//! errors. [`RunConfig::render`] writes every key, so a rendered config
//! reproduces a run on its own.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::distill::{DistillConfig, OptimConfig, SupervisedConfig};
use crate::error::{Error, Result};
use crate::maskhead::LossWeights;
use crate::model::{hash64, LossResolution, ModelConfig, Upsampler};
use crate::synthdata::{CorpusSizes, SceneSpec};
use crate::ttscale::TilePlan;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub sizes: CorpusSizes,
    pub seed: u64,
}

impl DataConfig {
    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            image_size: (self.image_size, self.image_size),
            seed: self.seed,
            ..SceneSpec::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Radius and embedding width used whenever the upsampler is SAPA.
    pub sapa: (usize, usize),
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: SupervisedConfig,
    pub init_seed: u64,
    pub distill: DistillConfig,
    pub n_per_domain: usize,
    pub tile: TilePlan,
    pub data: DataConfig,
    /// Dataset directory written by `gen-data`; generated in memory if unset.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig {
            image_size: 96,
            sizes: CorpusSizes::default(),
            seed: SceneSpec::default().seed,
        };
        RunConfig {
            model: ModelConfig::default(),
            sapa: (2, 32),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            train: SupervisedConfig::default(),
            init_seed: 1,
            distill: DistillConfig {
                optim: OptimConfig {
                    base_lr: 0.01,
                    ..OptimConfig::default()
                },
                ..DistillConfig::default()
            },
            n_per_domain: 100,
            tile: TilePlan::for_crop(data.image_size),
            data,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

struct Field {
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<()>,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn nonneg(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Config(format!("{key}: must be a finite non-negative number")));
    }
    Ok(x)
}

fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
    match v.split_once('x') {
        Some((a, b)) => Ok((num(key, a.trim())?, num(key, b.trim())?)),
        None => {
            let n = num(key, v)?;
            Ok((n, n))
        }
    }
}

fn render_pair(p: (usize, usize)) -> String {
    format!("{}x{}", p.0, p.1)
}

macro_rules! field {
    ($key:literal, |$c:ident| $get:expr, |$m:ident, $v:ident| $set:expr) => {
        Field {
            key: $key,
            get: |$c| $get.to_string(),
            set: |$m, $v| {
                $set;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("model.base_width", |c| c.model.base_width, |m, v| m.model.base_width = num("model.base_width", v)?),
        field!("model.decoder_width", |c| c.model.decoder_width, |m, v| m.model.decoder_width = num("model.decoder_width", v)?),
        field!("model.num_queries", |c| c.model.num_queries, |m, v| m.model.num_queries = num("model.num_queries", v)?),
        field!(
            "model.upsampler",
            |c| match c.model.upsampler {
                Upsampler::Bilinear => "bilinear",
                Upsampler::Sapa { .. } => "sapa",
            },
            |m, v| m.model.upsampler = match v {
                "bilinear" => Upsampler::Bilinear,
                "sapa" => Upsampler::Sapa { radius: m.sapa.0, embed_dim: m.sapa.1 },
                _ => return Err(Error::Config(format!("model.upsampler: expected bilinear or sapa, got {v:?}"))),
            }
        ),
        field!("model.sapa_radius", |c| c.sapa.0, |m, v| m.sapa.0 = num("model.sapa_radius", v)?),
        field!("model.sapa_dim", |c| c.sapa.1, |m, v| m.sapa.1 = num("model.sapa_dim", v)?),
        field!(
            "model.loss_resolution",
            |c| match c.model.loss_resolution {
                LossResolution::Full => "full",
                LossResolution::Quarter => "quarter",
            },
            |m, v| m.model.loss_resolution = match v {
                "full" => LossResolution::Full,
                "quarter" => LossResolution::Quarter,
                _ => return Err(Error::Config(format!("model.loss_resolution: expected full or quarter, got {v:?}"))),
            }
        ),
        field!("loss.dice", |c| c.loss.dice, |m, v| m.loss.dice = nonneg("loss.dice", v)?),
        field!("loss.mask_ce", |c| c.loss.mask_ce, |m, v| m.loss.mask_ce = nonneg("loss.mask_ce", v)?),
        field!("loss.no_object", |c| c.loss.no_object, |m, v| m.loss.no_object = nonneg("loss.no_object", v)?),
        field!("loss.dice_eps", |c| c.loss.dice_eps, |m, v| m.loss.dice_eps = nonneg("loss.dice_eps", v)?),
        field!("optim.lr", |c| c.optim.base_lr, |m, v| m.optim.base_lr = nonneg("optim.lr", v)?),
        field!("optim.momentum", |c| c.optim.momentum, |m, v| m.optim.momentum = nonneg("optim.momentum", v)?),
        field!("optim.weight_decay", |c| c.optim.weight_decay, |m, v| m.optim.weight_decay = nonneg("optim.weight_decay", v)?),
        field!("optim.poly_power", |c| c.optim.poly_power, |m, v| m.optim.poly_power = nonneg("optim.poly_power", v)?),
        field!("train.iterations", |c| c.train.iterations, |m, v| m.train.iterations = num("train.iterations", v)?),
        field!("train.batch_size", |c| c.train.batch_size, |m, v| m.train.batch_size = num("train.batch_size", v)?),
        field!("train.eval_interval", |c| c.train.eval_interval, |m, v| m.train.eval_interval = num("train.eval_interval", v)?),
        field!("train.seed", |c| c.train.seed, |m, v| m.train.seed = num("train.seed", v)?),
        field!("train.init_seed", |c| c.init_seed, |m, v| m.init_seed = num("train.init_seed", v)?),
        field!("distill.burn_in", |c| c.distill.burn_in, |m, v| m.distill.burn_in = num("distill.burn_in", v)?),
        field!("distill.total", |c| c.distill.total, |m, v| m.distill.total = num("distill.total", v)?),
        field!("distill.alpha", |c| c.distill.alpha, |m, v| m.distill.alpha = nonneg("distill.alpha", v)?),
        field!("distill.lambda_u", |c| c.distill.lambda_u, |m, v| m.distill.lambda_u = nonneg("distill.lambda_u", v)?),
        field!("distill.patience", |c| c.distill.patience, |m, v| m.distill.patience = num("distill.patience", v)?),
        field!("distill.min_delta", |c| c.distill.min_delta, |m, v| m.distill.min_delta = nonneg("distill.min_delta", v)?),
        field!("distill.eval_interval", |c| c.distill.eval_interval, |m, v| m.distill.eval_interval = num("distill.eval_interval", v)?),
        field!("distill.labeled_batch", |c| c.distill.labeled_batch, |m, v| m.distill.labeled_batch = num("distill.labeled_batch", v)?),
        field!("distill.unlabeled_batch", |c| c.distill.unlabeled_batch, |m, v| m.distill.unlabeled_batch = num("distill.unlabeled_batch", v)?),
        field!("distill.lr", |c| c.distill.optim.base_lr, |m, v| m.distill.optim.base_lr = nonneg("distill.lr", v)?),
        field!("distill.seed", |c| c.distill.seed, |m, v| m.distill.seed = num("distill.seed", v)?),
        field!("distill.student_seed", |c| c.distill.student_seed, |m, v| m.distill.student_seed = num("distill.student_seed", v)?),
        field!("select.n_per_domain", |c| c.n_per_domain, |m, v| m.n_per_domain = num("select.n_per_domain", v)?),
        field!(
            "ttscale.scales",
            |c| c.tile.scales.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            |m, v| m.tile.scales = v.split(',').map(|s| num("ttscale.scales", s.trim())).collect::<Result<_>>()?
        ),
        field!("ttscale.window", |c| render_pair(c.tile.window), |m, v| m.tile.window = pair("ttscale.window", v)?),
        field!("ttscale.stride", |c| render_pair(c.tile.stride), |m, v| m.tile.stride = pair("ttscale.stride", v)?),
        field!("data.image_size", |c| c.data.image_size, |m, v| m.data.image_size = num("data.image_size", v)?),
        field!("data.labeled", |c| c.data.sizes.labeled, |m, v| m.data.sizes.labeled = num("data.labeled", v)?),
        field!("data.unlabeled", |c| c.data.sizes.unlabeled, |m, v| m.data.sizes.unlabeled = num("data.unlabeled", v)?),
        field!("data.val", |c| c.data.sizes.val, |m, v| m.data.sizes.val = num("data.val", v)?),
        field!("data.test", |c| c.data.sizes.test, |m, v| m.data.sizes.test = num("data.test", v)?),
        field!("data.seed", |c| c.data.seed, |m, v| m.data.seed = num("data.seed", v)?),
        field!(
            "paths.data",
            |c| c.data_dir.as_ref().map_or_else(String::new, |p| p.display().to_string()),
            |m, v| m.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
        ),
        field!("paths.out", |c| c.out_dir.display(), |m, v| m.out_dir = PathBuf::from(v)),
    ]
}

/// Parsed `section.key → value` assignments in file order.
pub fn parse_assignments(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let at = |what: String| Error::Config(format!("{origin}:{}: {what}", i + 1));
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| at("unterminated section header".into()))?.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(at(format!("bad section name {name:?}")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(at("empty key".into()));
        }
        if section.is_empty() {
            return Err(at(format!("key {k:?} outside any section")));
        }
        let key = format!("{section}.{k}");
        if seen.insert(key.clone(), i + 1).is_some() {
            return Err(at(format!("duplicate key {key}")));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn keys() -> Vec<&'static str> {
        fields().iter().map(|f| f.key).collect()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        fields()
            .iter()
            .find(|f| f.key == key)
            .map(|f| (f.get)(self))
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let table = fields();
        let f = table
            .iter()
            .find(|f| f.key == key)
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        (f.set)(self, value)?;
        // the upsampler carries the SAPA shape, so re-derive it
        if let Upsampler::Sapa { .. } = self.model.upsampler {
            self.model.upsampler = Upsampler::Sapa {
                radius: self.sapa.0,
                embed_dim: self.sapa.1,
            };
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_assignments(text, origin)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// Every key, grouped by section, in table order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for f in fields() {
            let (section, key) = f.key.split_once('.').expect("keys are section.key");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", (f.get)(self)));
        }
        out
    }

    pub fn hash(&self) -> u64 {
        hash64(self.render().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tile.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.distill.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.n_per_domain == 0 {
            return Err(Error::Config("select.n_per_domain must be positive".into()));
        }
        if self.optim.momentum >= 1.0 {
            return Err(Error::Config("momentum must be below 1".into()));
        }
        self.data.scene().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Model config with the given upsampler choice.
    pub fn model_with(&self, sapa: bool) -> ModelConfig {
        ModelConfig {
            upsampler: if sapa {
                Upsampler::Sapa {
                    radius: self.sapa.0,
                    embed_dim: self.sapa.1,
                }
            } else {
                Upsampler::Bilinear
            },
            ..self.model
        }
    }

    pub fn supervised(&self) -> SupervisedConfig {
        SupervisedConfig {
            optim: self.optim,
            loss: self.loss,
            ..self.train
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            loss: self.loss,
            optim: OptimConfig {
                base_lr: self.distill.optim.base_lr,
                ..self.optim
            },
            ..self.distill
        }
    }
}
