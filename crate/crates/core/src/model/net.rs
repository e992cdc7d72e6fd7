use super::{LossResolution, Model, ModelParams, Upsampler, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::maskhead::{
    hungarian, matching_cost, predict, predict_backward, semantic_merge, supervised_loss, ClassHead, GroundTruthLayers,
    LossBreakdown, LossWeights, MaskPrediction,
};
use crate::sapa::{fuse_mask_feature_backward, fuse_mask_feature_with_cache, FusionCache};
use crate::synthdata::SegMask;
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, conv2d, conv2d_backward, relu, relu_backward, ConvGeometry, Element,
    ResizeMode, Tensor,
};

const DOWN: ConvGeometry = ConvGeometry::new(3, 2, 1);
const SAME: ConvGeometry = ConvGeometry::new(3, 1, 1);
const POINT: ConvGeometry = ConvGeometry::new(1, 1, 0);

/// Anything that maps an image `(1, 3, h, w)` to class logits `(1, C, h, w)`.
pub trait Segmenter: Sync {
    fn num_classes(&self) -> usize;
    fn infer(&self, image: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Element = f32> {
    pub f4: Tensor<T>,
    pub f8: Tensor<T>,
    pub f16: Tensor<T>,
    pub f32: Tensor<T>,
}

pub struct ForwardOutput<T: Element = f32> {
    pub pyramid: FeaturePyramid<T>,
    /// Refined decoder features at 1/8, 1/16, 1/32.
    pub refined: [Tensor<T>; 3],
    /// Semantic logits `(1, C, h, w)` at input resolution.
    pub logits: Tensor<T>,
}

struct RefineTrace<T: Element> {
    input: Tensor<T>,
    a: Tensor<T>,
    b: Tensor<T>,
    out: Tensor<T>,
}

enum FusionTrace<T: Element> {
    Bilinear { o8: Tensor<T> },
    Sapa(FusionCache<T>),
}

/// Activations kept for [`Model::backward`].
pub struct ForwardTrace<T: Element> {
    /// Input size before padding.
    size: (usize, usize),
    padded: (usize, usize),
    /// Encoder activations: image, stem, then `(a, b)` per stage.
    enc: Vec<Tensor<T>>,
    laterals: [Tensor<T>; 3],
    refine: [RefineTrace<T>; 3],
    fusion: FusionTrace<T>,
    f_mask: Tensor<T>,
    /// Head output at 1/4 of the padded input.
    pub low_res: MaskPrediction<T>,
}

pub struct TrainOutput<T: Element> {
    pub loss: LossBreakdown,
    pub grads: ModelParams<T>,
}

fn up2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    bilinear_resize(x, 2 * x.h(), 2 * x.w(), ResizeMode::Zoom)
}

fn round_up(v: usize) -> usize {
    v.div_ceil(INPUT_MULTIPLE).max(1) * INPUT_MULTIPLE
}

impl<T: Element> Model<T> {
    fn conv(&self, name: &str, x: &Tensor<T>, geom: ConvGeometry, act: bool) -> Result<Tensor<T>> {
        let (w, b) = self.params.conv(name);
        let y = conv2d(x, w, b.data(), geom)?;
        Ok(if act { relu(&y) } else { y })
    }

    fn conv_backward(
        &self,
        name: &str,
        input: &Tensor<T>,
        output: &Tensor<T>,
        grad: &Tensor<T>,
        geom: ConvGeometry,
        act: bool,
        grads: &mut ModelParams<T>,
    ) -> Result<Tensor<T>> {
        let g = if act { relu_backward(output, grad) } else { grad.clone() };
        let weight = self.params.get(&format!("{name}.weight"));
        let cg = conv2d_backward(input, weight, &g, geom)?;
        grads.get_mut(&format!("{name}.weight")).add_assign(&cg.weight)?;
        let gb = grads.get_mut(&format!("{name}.bias"));
        for (a, &b) in gb.data_mut().iter_mut().zip(&cg.bias) {
            *a = *a + b;
        }
        Ok(cg.input)
    }

    fn refine(&self, level: usize, input: Tensor<T>) -> Result<RefineTrace<T>> {
        let a = self.conv(&format!("refine{level}.a"), &input, SAME, true)?;
        let b = self.conv(&format!("refine{level}.b"), &a, SAME, true)?;
        let out = input.add(&b)?;
        Ok(RefineTrace { input, a, b, out })
    }

    fn refine_backward(&self, level: usize, t: &RefineTrace<T>, grad: &Tensor<T>, grads: &mut ModelParams<T>) -> Result<Tensor<T>> {
        let ga = self.conv_backward(&format!("refine{level}.b"), &t.a, &t.b, grad, SAME, true, grads)?;
        let mut gi = self.conv_backward(&format!("refine{level}.a"), &t.input, &t.a, &ga, SAME, true, grads)?;
        gi.add_assign(grad)?;
        Ok(gi)
    }

    /// Runs the network on one image, keeping what backward needs.
    pub fn forward_trace(&self, image: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let [n, c, h, w] = image.shape();
        if n != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::shape(format!("model input must be (1, 3, h, w), got {:?}", image.shape())));
        }
        let (hp, wp) = (round_up(h), round_up(w));
        let x = if (hp, wp) == (h, w) { image.clone() } else { image.pad_to(hp, wp)? };
        let mut enc = Vec::with_capacity(10);
        let stem = self.conv("stem", &x, DOWN, true)?;
        enc.push(x);
        enc.push(stem);
        for stage in 1..=4 {
            let a = self.conv(&format!("stage{stage}.a"), enc.last().expect("stem pushed"), DOWN, true)?;
            let b = self.conv(&format!("stage{stage}.b"), &a, SAME, true)?;
            enc.push(a);
            enc.push(b);
        }
        let (f4, f8, f16, f32) = (&enc[3], &enc[5], &enc[7], &enc[9]);
        let l8 = self.conv("lateral8", f8, POINT, false)?;
        let l16 = self.conv("lateral16", f16, POINT, false)?;
        let l32 = self.conv("lateral32", f32, POINT, false)?;
        let r32 = self.refine(32, l32.clone())?;
        let r16 = self.refine(16, l16.add(&up2(&r32.out)?)?)?;
        let r8 = self.refine(8, l8.add(&up2(&r16.out)?)?)?;

        let (f_mask, fusion) = match self.config.upsampler {
            Upsampler::Bilinear => {
                let proj = conv2d(&r8.out, self.params.get("fusion.proj"), &vec![T::zero(); f4.c()], POINT)?;
                (f4.add(&up2(&proj)?)?, FusionTrace::Bilinear { o8: r8.out.clone() })
            }
            Upsampler::Sapa { radius, .. } => {
                let (out, cache) = fuse_mask_feature_with_cache(f4, &r8.out, &self.params.sapa(radius))?;
                (out, FusionTrace::Sapa(cache))
            }
        };
        let head = self.class_head();
        let low_res = predict(self.params.get("queries"), &f_mask, &head)?;
        Ok(ForwardTrace {
            size: (h, w),
            padded: (hp, wp),
            laterals: [l8, l16, l32],
            refine: [r8, r16, r32],
            enc,
            fusion,
            f_mask,
            low_res,
        })
    }

    fn class_head(&self) -> ClassHead<T> {
        ClassHead {
            weight: self.params.get("class.weight").clone(),
            bias: self.params.get("class.bias").clone(),
        }
    }

    /// Head output with mask logits upsampled to the (unpadded) input size.
    pub fn full_resolution(&self, trace: &ForwardTrace<T>) -> Result<MaskPrediction<T>> {
        let (h, w) = trace.size;
        let (hp, wp) = trace.padded;
        let up = bilinear_resize(&trace.low_res.mask_logits, hp, wp, ResizeMode::Zoom)?;
        let masks = if (hp, wp) == (h, w) { up } else { up.crop(0, 0, h, w)? };
        MaskPrediction::new(masks, trace.low_res.class_logits.clone())
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let trace = self.forward_trace(image)?;
        let logits = semantic_merge(&self.full_resolution(&trace)?)?;
        let e = &trace.enc;
        Ok(ForwardOutput {
            pyramid: FeaturePyramid {
                f4: e[3].clone(),
                f8: e[5].clone(),
                f16: e[7].clone(),
                f32: e[9].clone(),
            },
            refined: [trace.refine[0].out.clone(), trace.refine[1].out.clone(), trace.refine[2].out.clone()],
            logits,
        })
    }

    /// Semantic logits `(1, C, h, w)`.
    pub fn logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = self.forward_trace(image)?;
        let logits = semantic_merge(&self.full_resolution(&trace)?)?;
        logits.ensure_finite("model logits")?;
        Ok(logits)
    }

    /// Gradients of all parameters given gradients of the 1/4-resolution
    /// head output.
    pub fn backward(&self, trace: &ForwardTrace<T>, grad: &MaskPrediction<T>) -> Result<ModelParams<T>> {
        let mut grads = self.params.zeros_like();
        let head = self.class_head();
        let pg = predict_backward(self.params.get("queries"), &trace.f_mask, &head, grad)?;
        grads.get_mut("queries").add_assign(&pg.queries)?;
        grads.get_mut("class.weight").add_assign(&pg.head.weight)?;
        grads.get_mut("class.bias").add_assign(&pg.head.bias)?;

        let (g_f4, g_o8) = match &trace.fusion {
            FusionTrace::Bilinear { o8 } => {
                let g_proj = bilinear_resize_backward(&pg.f_mask, o8.h(), o8.w())?;
                let proj_w = self.params.get("fusion.proj");
                let cg = conv2d_backward(o8, proj_w, &g_proj, POINT)?;
                grads.get_mut("fusion.proj").add_assign(&cg.weight)?;
                (pg.f_mask.clone(), cg.input)
            }
            FusionTrace::Sapa(cache) => {
                let Upsampler::Sapa { radius, .. } = self.config.upsampler else {
                    unreachable!("trace kind follows the config")
                };
                let fg = fuse_mask_feature_backward(cache, &pg.f_mask, &self.params.sapa(radius))?;
                for (name, t) in fg.params.tensors() {
                    grads.get_mut(&format!("sapa.{name}")).add_assign(t)?;
                }
                (fg.f4, fg.o8)
            }
        };

        let [r8, r16, r32] = &trace.refine;
        let [l8, l16, l32] = &trace.laterals;
        let e = &trace.enc;
        let g_s8 = self.refine_backward(8, r8, &g_o8, &mut grads)?;
        let g_f8 = self.conv_backward("lateral8", &e[5], l8, &g_s8, POINT, false, &mut grads)?;
        let g_o16 = bilinear_resize_backward(&g_s8, r16.out.h(), r16.out.w())?;
        let g_s16 = self.refine_backward(16, r16, &g_o16, &mut grads)?;
        let g_f16 = self.conv_backward("lateral16", &e[7], l16, &g_s16, POINT, false, &mut grads)?;
        let g_o32 = bilinear_resize_backward(&g_s16, r32.out.h(), r32.out.w())?;
        let g_s32 = self.refine_backward(32, r32, &g_o32, &mut grads)?;
        let g_f32 = self.conv_backward("lateral32", &e[9], l32, &g_s32, POINT, false, &mut grads)?;

        // encoder, deepest first; stage s has input e[2s-1], a = e[2s], b = e[2s+1]
        let mut g = g_f32;
        for stage in (1..=4).rev() {
            let (input, a, b) = (&e[2 * stage - 1], &e[2 * stage], &e[2 * stage + 1]);
            let ga = self.conv_backward(&format!("stage{stage}.b"), a, b, &g, SAME, true, &mut grads)?;
            g = self.conv_backward(&format!("stage{stage}.a"), input, a, &ga, DOWN, true, &mut grads)?;
            match stage {
                4 => g.add_assign(&g_f16)?,
                3 => g.add_assign(&g_f8)?,
                2 => g.add_assign(&g_f4)?,
                _ => {}
            }
        }
        self.conv_backward("stem", &e[0], &e[1], &g, DOWN, true, &mut grads)?;
        Ok(grads)
    }

    /// Ground-truth layers at the resolution the loss runs at.
    pub fn loss_targets(&self, mask: &SegMask) -> Result<GroundTruthLayers> {
        match self.config.loss_resolution {
            LossResolution::Full => Ok(GroundTruthLayers::from_mask(mask)),
            LossResolution::Quarter => GroundTruthLayers::from_mask_downsampled(mask, 4),
        }
    }

    /// Matched loss on one sample and its parameter gradients.
    pub fn loss_and_grad(&self, image: &Tensor<T>, gt: &GroundTruthLayers, weights: &LossWeights) -> Result<TrainOutput<T>> {
        let trace = self.forward_trace(image)?;
        let (loss, low_grad) = match self.config.loss_resolution {
            LossResolution::Full => {
                let full = self.full_resolution(&trace)?;
                let m = hungarian(&matching_cost(&full, gt, weights)?)?;
                let (loss, g) = supervised_loss(&full, gt, &m, weights)?;
                let (h, w) = trace.size;
                let (hp, wp) = trace.padded;
                let padded = if (hp, wp) == (h, w) { g.mask_logits } else { g.mask_logits.pad_to(hp, wp)? };
                let low = trace.low_res.mask_logits.shape();
                let gm = bilinear_resize_backward(&padded, low[2], low[3])?;
                (loss, MaskPrediction::new(gm, g.class_logits)?)
            }
            LossResolution::Quarter => {
                let m = hungarian(&matching_cost(&trace.low_res, gt, weights)?)?;
                supervised_loss(&trace.low_res, gt, &m, weights)?
            }
        };
        let grads = self.backward(&trace, &low_grad)?;
        Ok(TrainOutput { loss, grads })
    }
}

impl Segmenter for Model<f32> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn infer(&self, image: &Tensor) -> Result<Tensor> {
        self.logits(image)
    }
}
