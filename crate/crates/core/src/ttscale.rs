//! Zoomed, tiled, multi-scale inference with count-map averaging of window
//! logits.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maskhead::argmax_mask;
use crate::model::{Segmenter, TensorArchive};
use crate::synthdata::SegMask;
use crate::tensor::{bilinear_resize, ResizeMode, Tensor};

pub const DEFAULT_SCALES: [f64; 6] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];

/// Window origins along one axis: multiples of `stride`, plus a final
/// origin at `len − window` when the progression stops short of the edge.
pub fn plan_axis(len: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::invalid(format!("need 1 <= stride <= window, got window {window} stride {stride}")));
    }
    if window > len {
        return Err(Error::invalid(format!("window {window} larger than extent {len}")));
    }
    let last = len - window;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("0 is always an origin") < last {
        out.push(last);
    }
    Ok(out)
}

/// Row-major window origins `(i, j)`.
pub fn plan_windows(h: usize, w: usize, k: (usize, usize), t: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let rows = plan_axis(h, k.0, t.0)?;
    let cols = plan_axis(w, k.1, t.1)?;
    Ok(rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).collect())
}

/// Per-pixel window coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct CountMap {
    pub h: usize,
    pub w: usize,
    pub counts: Vec<f32>,
}

impl CountMap {
    pub fn new(h: usize, w: usize, k: (usize, usize), origins: &[(usize, usize)]) -> Self {
        let mut counts = vec![0.0f32; h * w];
        for &(i, j) in origins {
            for y in i..i + k.0 {
                for c in &mut counts[y * w + j..y * w + j + k.1] {
                    *c += 1.0;
                }
            }
        }
        CountMap { h, w, counts }
    }

    pub fn min(&self) -> f32 {
        self.counts.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePlan {
    pub scales: Vec<f64>,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl TilePlan {
    /// Default scale set with half-overlapping `crop × crop` windows.
    pub fn for_crop(crop: usize) -> Self {
        TilePlan {
            scales: DEFAULT_SCALES.to_vec(),
            window: (crop, crop),
            stride: ((crop / 2).max(1), (crop / 2).max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::invalid("tile plan has no scales"));
        }
        if let Some(s) = self.scales.iter().find(|s| !s.is_finite() || **s < 1.0) {
            return Err(Error::invalid(format!("scale {s} must be finite and >= 1")));
        }
        let (k, t) = (self.window, self.stride);
        if k.0 == 0 || k.1 == 0 || t.0 == 0 || t.1 == 0 || t.0 > k.0 || t.1 > k.1 {
            return Err(Error::invalid(format!("need 1 <= stride <= window, got window {k:?} stride {t:?}")));
        }
        Ok(())
    }

    /// Window origins for each scale on an `h × w` image.
    pub fn grids(&self, h: usize, w: usize) -> Result<Vec<Vec<(usize, usize)>>> {
        self.scales
            .iter()
            .map(|&s| {
                let (zh, zw) = zoomed_dims(h, w, s)?;
                plan_windows(zh, zw, self.window, self.stride)
            })
            .collect()
    }

    pub fn window_count(&self, h: usize, w: usize) -> Result<usize> {
        Ok(self.grids(h, w)?.iter().map(Vec::len).sum())
    }
}

/// `(round(σH), round(σW))`.
pub fn zoomed_dims(h: usize, w: usize, sigma: f64) -> Result<(usize, usize)> {
    if !sigma.is_finite() || sigma < 1.0 {
        return Err(Error::invalid(format!("zoom ratio {sigma} must be finite and >= 1")));
    }
    Ok(((h as f64 * sigma).round() as usize, (w as f64 * sigma).round() as usize))
}

fn check_image(image: &Tensor) -> Result<()> {
    if image.n() != 1 || image.c() != 3 {
        return Err(Error::shape(format!("expected one RGB image, got {:?}", image.shape())));
    }
    Ok(())
}

/// Logits of the zoomed image: window logits padded into place and averaged
/// over the windows covering each pixel, in origin order.
pub fn infer_zoomed(model: &dyn Segmenter, image: &Tensor, sigma: f64, k: (usize, usize), t: (usize, usize)) -> Result<Tensor> {
    check_image(image)?;
    let (zh, zw) = zoomed_dims(image.h(), image.w(), sigma)?;
    let zoomed = if (zh, zw) == (image.h(), image.w()) {
        image.clone()
    } else {
        bilinear_resize(image, zh, zw, ResizeMode::Zoom)?
    };
    let origins = plan_windows(zh, zw, k, t)?;
    let c = model.num_classes();
    let windows: Vec<Tensor> = origins
        .par_iter()
        .map(|&(i, j)| {
            let out = model.infer(&zoomed.crop(i, j, k.0, k.1)?)?;
            if out.shape() != [1, c, k.0, k.1] {
                return Err(Error::shape(format!("window logits {:?}, expected {:?}", out.shape(), [1, c, k.0, k.1])));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    // running mean per pixel, in origin order: the same average as
    // sum / count, exact when all contributions agree
    let counts = CountMap::new(zh, zw, k, &origins);
    debug_assert!(counts.min() >= 1.0);
    let mut seen = vec![0.0f32; zh * zw];
    let mut mean = Tensor::<f32>::zeros([1, c, zh, zw]);
    for (&(i, j), win) in origins.iter().zip(&windows) {
        for y in i..i + k.0 {
            for n in &mut seen[y * zw + j..y * zw + j + k.1] {
                *n += 1.0;
            }
        }
        for ch in 0..c {
            let src = win.plane(0, ch);
            let dst = mean.plane_mut(0, ch);
            for y in 0..k.0 {
                let at = (i + y) * zw + j;
                let row = dst[at..at + k.1].iter_mut().zip(&seen[at..at + k.1]);
                for ((d, n), s) in row.zip(&src[y * k.1..(y + 1) * k.1]) {
                    *d += (*s - *d) / *n;
                }
            }
        }
    }
    debug_assert_eq!(seen, counts.counts);
    Ok(mean)
}

/// Per-scale zoomed logits, as dumped for replay.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleLogits {
    pub sigma: f64,
    pub logits: Tensor,
}

/// Mean over scales of the zoomed logits resized back to the input size.
/// Also returns each scale's zoomed logits.
pub fn infer_multiscale_detailed(model: &dyn Segmenter, image: &Tensor, plan: &TilePlan) -> Result<(Tensor, Vec<ScaleLogits>)> {
    plan.validate()?;
    check_image(image)?;
    let (h, w) = (image.h(), image.w());
    let per_scale: Vec<ScaleLogits> = plan
        .scales
        .par_iter()
        .map(|&sigma| {
            Ok(ScaleLogits {
                sigma,
                logits: infer_zoomed(model, image, sigma, plan.window, plan.stride)?,
            })
        })
        .collect::<Result<_>>()?;
    let mut total = Tensor::<f32>::zeros([1, model.num_classes(), h, w]);
    for (idx, s) in per_scale.iter().enumerate() {
        let down = if (s.logits.h(), s.logits.w()) == (h, w) {
            s.logits.clone()
        } else {
            bilinear_resize(&s.logits, h, w, ResizeMode::Downsample)?
        };
        let n = (idx + 1) as f32;
        for (t, d) in total.data_mut().iter_mut().zip(down.data()) {
            *t += (*d - *t) / n;
        }
    }
    Ok((total, per_scale))
}

pub fn infer_multiscale(model: &dyn Segmenter, image: &Tensor, plan: &TilePlan) -> Result<Tensor> {
    infer_multiscale_detailed(model, image, plan).map(|(l, _)| l)
}

pub fn segment_multiscale(model: &dyn Segmenter, image: &Tensor, plan: &TilePlan) -> Result<SegMask> {
    argmax_mask(&infer_multiscale(model, image, plan)?)
}

/// A model wrapped in multi-scale tiled inference.
pub struct MultiScale<'a> {
    pub model: &'a dyn Segmenter,
    pub plan: TilePlan,
}

impl Segmenter for MultiScale<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn infer(&self, image: &Tensor) -> Result<Tensor> {
        infer_multiscale(self.model, image, &self.plan)
    }
}

fn scale_name(sigma: f64) -> String {
    format!("scale_{sigma}")
}

/// Writes one archive tensor per scale, named `scale_<σ>`.
pub fn save_logit_dump(path: &Path, config_hash: u64, scales: &[ScaleLogits]) -> Result<()> {
    TensorArchive {
        config_hash,
        iteration: 0,
        stage: None,
        tensors: scales.iter().map(|s| (scale_name(s.sigma), s.logits.clone())).collect(),
    }
    .save(path)
}

pub fn load_logit_dump(path: &Path) -> Result<(u64, Vec<ScaleLogits>)> {
    let archive = TensorArchive::load(path)?;
    let scales = archive
        .tensors
        .into_iter()
        .map(|(name, logits)| {
            let sigma = name
                .strip_prefix("scale_")
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("tensor {name} is not a scale dump")))?;
            Ok(ScaleLogits { sigma, logits })
        })
        .collect::<Result<_>>()?;
    Ok((archive.config_hash, scales))
}
