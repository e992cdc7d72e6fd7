//! Toy multi-scale encoder/decoder with a query mask head.
//!
//! Encoder: a stride-2 stem and four stride-2 stages giving features at
//! 1/4, 1/8, 1/16 and 1/32. Decoder: 1×1 laterals, top-down bilinear ×2
//! addition and two-conv residual refinement per level. The mask feature is
//! `f4 + up(o8)`, where `up` is either bilinear or SAPA.

mod checkpoint;
mod net;
mod optim;

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sapa::SapaParams;
use crate::synthdata::NUM_CLASSES;
use crate::tensor::{Element, Shape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage, TensorArchive};
pub use net::{FeaturePyramid, ForwardOutput, ForwardTrace, Segmenter, TrainOutput};
pub use optim::{PolySchedule, Sgd};

/// Tensors the padded input is divided by at the coarsest level.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsampler {
    Bilinear,
    Sapa { radius: usize, embed_dim: usize },
}

/// Resolution the mask loss is evaluated at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossResolution {
    /// Mask logits upsampled ×4 and compared with the full-resolution mask.
    Full,
    /// Ground truth reduced to mask-logit resolution by area majority.
    Quarter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channels of the 1/4 feature; deeper stages double it.
    pub base_width: usize,
    pub decoder_width: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub upsampler: Upsampler,
    pub loss_resolution: LossResolution,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_width: 16,
            decoder_width: 32,
            num_queries: 8,
            num_classes: NUM_CLASSES,
            upsampler: Upsampler::Sapa { radius: 2, embed_dim: 32 },
            loss_resolution: LossResolution::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.decoder_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > NUM_CLASSES {
            return Err(Error::Config(format!("num_classes must be in 1..={NUM_CLASSES}")));
        }
        if self.num_queries < self.num_classes {
            return Err(Error::Config(format!(
                "{} queries cannot cover {} classes",
                self.num_queries, self.num_classes
            )));
        }
        if let Upsampler::Sapa { embed_dim: 0, .. } = self.upsampler {
            return Err(Error::Config("SAPA embed_dim must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; the config hash is taken over these bytes.
    pub fn describe(&self) -> String {
        let up = match self.upsampler {
            Upsampler::Bilinear => "bilinear".to_string(),
            Upsampler::Sapa { radius, embed_dim } => format!("sapa(r={radius},d={embed_dim})"),
        };
        let res = match self.loss_resolution {
            LossResolution::Full => "full",
            LossResolution::Quarter => "quarter",
        };
        format!(
            "stemseg-model/1;base_width={};decoder_width={};queries={};classes={};upsampler={};loss_resolution={}",
            self.base_width, self.decoder_width, self.num_queries, self.num_classes, up, res
        )
    }

    pub fn hash(&self) -> u64 {
        hash64(self.describe().as_bytes())
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `U(±sqrt(6 / fan_in))`, for weights feeding a ReLU.
    He(usize),
    /// `U(±1 / sqrt(fan_in))`.
    Linear(usize),
    Zero,
}

/// Ordered parameter names and shapes for one [`ModelConfig`].
#[derive(Debug, PartialEq)]
pub struct Schema {
    names: Vec<String>,
    shapes: Vec<Shape>,
    inits: Vec<Init>,
    index: HashMap<String, usize>,
}

impl Schema {
    pub fn for_config(cfg: &ModelConfig) -> Result<Schema> {
        cfg.validate()?;
        let mut s = Schema {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
            index: HashMap::new(),
        };
        let w = cfg.base_width;
        let d = cfg.decoder_width;
        s.conv("stem", 3, w, 3, true);
        let widths = [w, w, 2 * w, 4 * w, 8 * w];
        for stage in 1..=4 {
            let (cin, cout) = (widths[stage - 1], widths[stage]);
            s.conv(&format!("stage{stage}.a"), cin, cout, 3, true);
            s.conv(&format!("stage{stage}.b"), cout, cout, 3, true);
        }
        for (level, cin) in [(8, 2 * w), (16, 4 * w), (32, 8 * w)] {
            s.conv(&format!("lateral{level}"), cin, d, 1, false);
            s.conv(&format!("refine{level}.a"), d, d, 3, true);
            s.conv(&format!("refine{level}.b"), d, d, 3, true);
        }
        match cfg.upsampler {
            Upsampler::Bilinear => s.push("fusion.proj", [w, d, 1, 1], Init::Linear(d)),
            Upsampler::Sapa { embed_dim: e, .. } => {
                s.push("sapa.p_enc", [1, 1, e, w], Init::Linear(w));
                s.push("sapa.p_dec", [1, 1, e, w], Init::Linear(w));
                s.push("sapa.q_enc", [1, 1, e, w], Init::Linear(w));
                s.push("sapa.q_dec", [1, 1, e, w], Init::Linear(w));
                s.push("sapa.gate_w", [1, 1, 1, w], Init::Linear(w));
                s.push("sapa.gate_b", [1, 1, 1, 1], Init::Zero);
                s.push("sapa.value_proj", [w, d, 1, 1], Init::Linear(d));
            }
        }
        s.push("queries", [1, 1, cfg.num_queries, w], Init::Linear(w));
        s.push("class.weight", [1, 1, cfg.num_classes + 1, w], Init::Linear(w));
        s.push("class.bias", [1, 1, 1, cfg.num_classes + 1], Init::Zero);
        Ok(s)
    }

    fn push(&mut self, name: &str, shape: Shape, init: Init) {
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.inits.push(init);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, relu: bool) {
        let fan_in = cin * k * k;
        let init = if relu { Init::He(fan_in) } else { Init::Linear(fan_in) };
        self.push(&format!("{name}.weight"), [cout, cin, k, k], init);
        self.push(&format!("{name}.bias"), [1, 1, 1, cout], Init::Zero);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Every tensor named by a [`Schema`], in schema order.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Element = f32> {
    schema: Arc<Schema>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.schema.names == other.schema.names && self.tensors == other.tensors
    }
}

impl<T: Element> ModelParams<T> {
    pub fn zeros(schema: Arc<Schema>) -> Self {
        let tensors = schema.shapes.iter().map(|&s| Tensor::zeros(s)).collect();
        ModelParams { schema, tensors }
    }

    /// Fan-in scaled uniform weights, zero biases; deterministic per seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let schema = Arc::new(Schema::for_config(cfg)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = schema
            .shapes
            .iter()
            .zip(&schema.inits)
            .map(|(&shape, &init)| {
                let bound = match init {
                    Init::He(f) => (6.0 / f as f64).sqrt(),
                    Init::Linear(f) => 1.0 / (f as f64).sqrt(),
                    Init::Zero => return Tensor::zeros(shape),
                };
                Tensor::from_fn(shape, |_, _, _, _| T::from_f64(rng.gen_range(-bound..bound)))
            })
            .collect();
        Ok(ModelParams { schema, tensors })
    }

    /// Builds from named tensors, requiring exactly the schema's names and shapes.
    pub fn from_named(schema: Arc<Schema>, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        if named.len() != schema.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                schema.len(),
                named.len()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; schema.len()];
        for (name, t) in named {
            let i = schema
                .position(&name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
            if schema.shapes[i] != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    schema.shapes[i],
                    t.shape()
                )));
            }
            if slots[i].replace(t).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {name}")));
            }
        }
        let tensors = slots.into_iter().map(|t| t.expect("counts match and names are unique")).collect();
        Ok(ModelParams { schema, tensors })
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.schema.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = self.schema.position(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.schema.position(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.tensors[i]
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.schema.clone())
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            schema: self.schema.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_schema(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.schema, &other.schema) || *self.schema == *other.schema
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if !self.same_schema(other) {
            return Err(Error::invalid("parameter schema mismatch"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: T) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for t in &self.tensors {
            t.ensure_finite("model parameters")?;
        }
        Ok(())
    }

    pub(crate) fn conv(&self, name: &str) -> (&Tensor<T>, &Tensor<T>) {
        (self.get(&format!("{name}.weight")), self.get(&format!("{name}.bias")))
    }

    pub(crate) fn sapa(&self, radius: usize) -> SapaParams<T> {
        SapaParams {
            p_enc: self.get("sapa.p_enc").clone(),
            p_dec: self.get("sapa.p_dec").clone(),
            q_enc: self.get("sapa.q_enc").clone(),
            q_dec: self.get("sapa.q_dec").clone(),
            gate_w: self.get("sapa.gate_w").clone(),
            gate_b: self.get("sapa.gate_b").clone(),
            value_proj: self.get("sapa.value_proj").clone(),
            radius,
        }
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Element> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Model {
            params: ModelParams::init(&config, seed)?,
            config,
        })
    }

    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        let schema = Schema::for_config(&config)?;
        if schema != **params.schema() {
            return Err(Error::invalid("parameters do not match the model config"));
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config,
            params: self.params.cast(),
        }
    }
}
