//! Python bindings. Tensors cross the boundary as flat row-major lists plus
//! a shape; masks as flat lists of class indices.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stemseg::distill::ema_update;
use stemseg::eval::ConfusionMatrix;
use stemseg::maskhead::{self, argmax_mask, LossWeights};
use stemseg::model::{self as core_model, LossResolution, ModelConfig, Segmenter, Stage, Upsampler};
use stemseg::sapa;
use stemseg::select::{self, RankedSample};
use stemseg::synthdata::{self, SceneSpec, SegMask, CLASS_NAMES};
use stemseg::ttscale::{self, TilePlan};
use stemseg::Tensor;

create_exception!(pystemseg, StemsegError, PyException);

fn err(e: stemseg::Error) -> PyErr {
    StemsegError::new_err(e.to_string())
}

type Shape = (usize, usize, usize, usize);

fn tensor<T: stemseg::Element>(data: Vec<T>, shape: Shape) -> PyResult<Tensor<T>> {
    Tensor::new([shape.0, shape.1, shape.2, shape.3], data).map_err(err)
}

fn image(data: Vec<f32>, h: usize, w: usize) -> PyResult<Tensor> {
    tensor(data, (1, 3, h, w))
}

fn mask(classes: Vec<u8>, h: usize, w: usize) -> PyResult<SegMask> {
    SegMask::new(h, w, classes).map_err(err)
}

fn export<T: stemseg::Element>(t: Tensor<T>) -> (Vec<T>, Shape) {
    let [n, c, h, w] = t.shape();
    (t.into_data(), (n, c, h, w))
}

/// An f32 segmentation model.
#[pyclass(module = "pystemseg")]
struct Model {
    inner: core_model::Model,
}

fn model_config(base_width: usize, decoder_width: usize, num_queries: usize, upsampler: &str, sapa_radius: usize, sapa_dim: usize) -> PyResult<ModelConfig> {
    let upsampler = match upsampler {
        "sapa" => Upsampler::Sapa {
            radius: sapa_radius,
            embed_dim: sapa_dim,
        },
        "bilinear" => Upsampler::Bilinear,
        other => return Err(StemsegError::new_err(format!("unknown upsampler {other:?}"))),
    };
    let cfg = ModelConfig {
        base_width,
        decoder_width,
        num_queries,
        num_classes: synthdata::NUM_CLASSES,
        upsampler,
        loss_resolution: LossResolution::Full,
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (base_width=16, decoder_width=32, num_queries=8, upsampler="sapa", sapa_radius=2, sapa_dim=32, seed=0))]
    fn new(base_width: usize, decoder_width: usize, num_queries: usize, upsampler: &str, sapa_radius: usize, sapa_dim: usize, seed: u64) -> PyResult<Self> {
        let cfg = model_config(base_width, decoder_width, num_queries, upsampler, sapa_radius, sapa_dim)?;
        Ok(Model {
            inner: core_model::Model::init(cfg, seed).map_err(err)?,
        })
    }

    /// Loads a checkpoint written for the given architecture.
    #[staticmethod]
    #[pyo3(signature = (path, base_width=16, decoder_width=32, num_queries=8, upsampler="sapa", sapa_radius=2, sapa_dim=32))]
    fn load(path: PathBuf, base_width: usize, decoder_width: usize, num_queries: usize, upsampler: &str, sapa_radius: usize, sapa_dim: usize) -> PyResult<(Self, u64, Option<String>)> {
        let cfg = model_config(base_width, decoder_width, num_queries, upsampler, sapa_radius, sapa_dim)?;
        let ck = core_model::load_checkpoint(&path, &cfg, false).map_err(err)?;
        Ok((Model { inner: ck.model }, ck.iteration, ck.stage.map(|s| s.name().to_string())))
    }

    #[pyo3(signature = (path, iteration=0, stage=None))]
    fn save(&self, path: PathBuf, iteration: u64, stage: Option<&str>) -> PyResult<()> {
        let stage = match stage {
            None => None,
            Some(s) => Some(Stage::parse(s).ok_or_else(|| StemsegError::new_err(format!("unknown stage {s:?}")))?),
        };
        core_model::save_checkpoint(&path, &self.inner, iteration, stage).map_err(err)
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config.hash()
    }

    #[getter]
    fn describe(&self) -> String {
        self.inner.config.describe()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Per-class logits `(1, C, h, w)` for an `(1, 3, h, w)` image.
    fn infer(&self, py: Python<'_>, data: Vec<f32>, h: usize, w: usize) -> PyResult<(Vec<f32>, Shape)> {
        let x = image(data, h, w)?;
        py.detach(|| self.inner.infer(&x)).map(export).map_err(err)
    }

    fn segment(&self, py: Python<'_>, data: Vec<f32>, h: usize, w: usize) -> PyResult<Vec<u8>> {
        let x = image(data, h, w)?;
        let m = py.detach(|| self.inner.infer(&x).and_then(|l| argmax_mask(&l))).map_err(err)?;
        Ok(m.classes().to_vec())
    }

    /// Zoomed, tiled inference averaged over `scales`.
    #[pyo3(signature = (data, h, w, scales, window, stride))]
    fn infer_multiscale(&self, py: Python<'_>, data: Vec<f32>, h: usize, w: usize, scales: Vec<f64>, window: (usize, usize), stride: (usize, usize)) -> PyResult<(Vec<f32>, Shape)> {
        let x = image(data, h, w)?;
        let plan = TilePlan { scales, window, stride };
        plan.validate().map_err(err)?;
        py.detach(|| ttscale::infer_multiscale(&self.inner, &x, &plan)).map(export).map_err(err)
    }

    /// Matched set loss of one labeled image.
    fn loss(&self, py: Python<'_>, data: Vec<f32>, classes: Vec<u8>, h: usize, w: usize) -> PyResult<f64> {
        let x = image(data, h, w)?;
        let m = mask(classes, h, w)?;
        py.detach(|| {
            let gt = self.inner.loss_targets(&m)?;
            self.inner.loss_and_grad(&x, &gt, &LossWeights::default())
        })
        .map(|out| out.loss.total)
        .map_err(err)
    }

    /// `self ← α·self + (1 − α)·student`.
    fn ema_update(&mut self, student: PyRef<'_, Model>, alpha: f64) -> PyResult<()> {
        ema_update(&mut self.inner.params, &student.inner.params, alpha).map_err(err)
    }

    fn parameters(&self) -> Vec<(String, Vec<f32>, Shape)> {
        self.inner
            .params
            .named()
            .map(|(n, t)| {
                let (data, shape) = export(t.clone());
                (n.to_string(), data, shape)
            })
            .collect()
    }
}

/// SAPA upsampler parameters in 64-bit.
#[pyclass(module = "pystemseg")]
struct SapaParams {
    inner: sapa::SapaParams<f64>,
}

#[pymethods]
impl SapaParams {
    /// Fan-in scaled random projections; the decoder input must have
    /// `enc_channels` channels, the fusion input `raw_dec_channels`.
    #[new]
    #[pyo3(signature = (enc_channels, raw_dec_channels, embed_dim, radius=2, seed=0))]
    fn new(enc_channels: usize, raw_dec_channels: usize, embed_dim: usize, radius: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SapaParams {
            inner: sapa::SapaParams::init(&mut rng, enc_channels, raw_dec_channels, embed_dim, radius),
        }
    }

    #[getter]
    fn radius(&self) -> usize {
        self.inner.radius
    }

    /// Softmax weights of encoder point `y` over decoder points.
    fn kernel_weights(&self, y: Vec<f64>, neighborhood: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        if neighborhood.is_empty() {
            return Err(StemsegError::new_err("empty neighborhood"));
        }
        let refs: Vec<&[f64]> = neighborhood.iter().map(Vec::as_slice).collect();
        sapa::kernel_weights(&y, &refs, &self.inner).map_err(err)
    }

    fn upsample(&self, encoder: Vec<f64>, encoder_shape: Shape, decoder: Vec<f64>, decoder_shape: Shape) -> PyResult<(Vec<f64>, Shape)> {
        let e = tensor(encoder, encoder_shape)?;
        let d = tensor(decoder, decoder_shape)?;
        sapa::upsample(&e, &d, &self.inner).map(export).map_err(err)
    }

    /// `f4 + upsample(f4, value_proj(o8))`.
    fn fuse(&self, f4: Vec<f64>, f4_shape: Shape, o8: Vec<f64>, o8_shape: Shape) -> PyResult<(Vec<f64>, Shape)> {
        let a = tensor(f4, f4_shape)?;
        let b = tensor(o8, o8_shape)?;
        sapa::fuse_mask_feature(&a, &b, &self.inner).map(export).map_err(err)
    }
}

/// The `index`-th synthetic scene: image, mask and ids.
#[pyfunction]
#[pyo3(signature = (index, image_size=96, domain_id=1, seed=None))]
fn generate_scene<'py>(py: Python<'py>, index: u64, image_size: usize, domain_id: u32, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let defaults = SceneSpec::default();
    let spec = SceneSpec {
        image_size: (image_size, image_size),
        domain_id,
        seed: seed.unwrap_or(defaults.seed),
        ..defaults
    };
    spec.validate().map_err(err)?;
    let s = synthdata::generate_one(&spec, index);
    let out = PyDict::new(py);
    out.set_item("image", s.image.data().to_vec())?;
    out.set_item("mask", s.mask.as_ref().map(|m| m.classes().to_vec()))?;
    out.set_item("h", image_size)?;
    out.set_item("w", image_size)?;
    out.set_item("domain_id", s.domain_id)?;
    out.set_item("sample_id", s.sample_id)?;
    Ok(out)
}

#[pyfunction]
fn class_names() -> Vec<&'static str> {
    CLASS_NAMES.to_vec()
}

/// Minimum-cost assignment of rows to distinct columns.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let m = maskhead::hungarian(&cost).map_err(err)?;
    Ok((m.pairs, m.total))
}

#[pyfunction]
fn bce_loss(p: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if p.len() != y.len() {
        return Err(StemsegError::new_err("bce_loss operands differ in length"));
    }
    Ok(maskhead::bce_loss(&p, &y))
}

#[pyfunction]
#[pyo3(signature = (a, b, eps=1.0))]
fn dice_loss(a: Vec<f64>, b: Vec<f64>, eps: f64) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(StemsegError::new_err("dice_loss operands differ in length"));
    }
    Ok(maskhead::dice_loss(&a, &b, eps))
}

#[pyfunction]
fn stem_proportion(classes: Vec<u8>, h: usize, w: usize) -> PyResult<f64> {
    select::stem_proportion(&mask(classes, h, w)?).map_err(err)
}

/// `pool` holds `(sample_id, domain_id, stem_ratio)` triples.
#[pyfunction]
fn select_top_per_domain(pool: Vec<(String, u32, f64)>, n_per_domain: usize) -> PyResult<Vec<(String, u32, f64)>> {
    let pool: Vec<RankedSample> = pool
        .into_iter()
        .map(|(sample_id, domain_id, stem_ratio)| RankedSample {
            sample_id,
            domain_id,
            stem_ratio,
        })
        .collect();
    let chosen = select::select_top_per_domain(&pool, n_per_domain).map_err(err)?;
    Ok(chosen.into_iter().map(|s| (s.sample_id, s.domain_id, s.stem_ratio)).collect())
}

#[pyfunction]
fn plan_axis(length: usize, window: usize, stride: usize) -> PyResult<Vec<usize>> {
    ttscale::plan_axis(length, window, stride).map_err(err)
}

#[pyfunction]
fn plan_windows(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> PyResult<Vec<(usize, usize)>> {
    ttscale::plan_windows(h, w, window, stride).map_err(err)
}

/// Per-pixel window coverage of a plan, row-major.
#[pyfunction]
fn count_map(h: usize, w: usize, window: (usize, usize), stride: (usize, usize)) -> PyResult<Vec<f32>> {
    let origins = ttscale::plan_windows(h, w, window, stride).map_err(err)?;
    Ok(ttscale::CountMap::new(h, w, window, &origins).counts)
}

/// Rows are ground truth, columns predictions.
#[pyfunction]
fn confusion_matrix(pred: Vec<u8>, gt: Vec<u8>, h: usize, w: usize) -> PyResult<Vec<Vec<u64>>> {
    let cm = ConfusionMatrix::from_pair(&mask(pred, h, w)?, &mask(gt, h, w)?).map_err(err)?;
    let n = cm.num_classes();
    Ok((0..n).map(|g| (0..n).map(|p| cm.get(g, p)).collect()).collect())
}

/// Per-class IoU (`None` when a class is absent from both) and the mean.
#[pyfunction]
fn miou(pred: Vec<u8>, gt: Vec<u8>, h: usize, w: usize) -> PyResult<(Vec<Option<f64>>, f64)> {
    let cm = ConfusionMatrix::from_pair(&mask(pred, h, w)?, &mask(gt, h, w)?).map_err(err)?;
    cm.miou().map_err(err)
}

#[pymodule]
fn pystemseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StemsegError", m.py().get_type::<StemsegError>())?;
    m.add_class::<Model>()?;
    m.add_class::<SapaParams>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(stem_proportion, m)?)?;
    m.add_function(wrap_pyfunction!(select_top_per_domain, m)?)?;
    m.add_function(wrap_pyfunction!(plan_axis, m)?)?;
    m.add_function(wrap_pyfunction!(plan_windows, m)?)?;
    m.add_function(wrap_pyfunction!(count_map, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    Ok(())
}
