//! Similarity-aware point affiliation: a 2× dynamic upsampler whose kernel
//! at each high-resolution location is a softmax over gated similarities
//! between that location's encoder feature and a window of low-resolution
//! decoder features.
//!
//! Similarity between encoder point `y` and decoder point `x`:
//!
//! ```text
//! sim(x, y) = g(y) · (P_dec x)·(P_enc y) + (1 − g(y)) · (Q_dec x)·(Q_enc y)
//! g(y)      = sigmoid(gate_w · y + gate_b)
//! ```
//!
//! Both operands are projected to the embedding dimension so encoder and
//! decoder channel counts may differ.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, matmul, sigmoid, ConvGeometry, Element, Tensor, Transpose};

/// Learnable tensors are stored as `(1, 1, rows, cols)` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SapaParams<T: Element = f32> {
    pub p_enc: Tensor<T>,
    pub p_dec: Tensor<T>,
    pub q_enc: Tensor<T>,
    pub q_dec: Tensor<T>,
    /// `(1, 1, 1, C_enc)`.
    pub gate_w: Tensor<T>,
    /// `(1, 1, 1, 1)`.
    pub gate_b: Tensor<T>,
    /// Projects the raw decoder feature to the encoder width before
    /// upsampling, `(C_enc, C_raw, 1, 1)`. Only used by [`fuse_mask_feature`].
    pub value_proj: Tensor<T>,
    pub radius: usize,
}

fn matrix<T: Element>(rows: usize, cols: usize) -> Tensor<T> {
    Tensor::zeros([1, 1, rows, cols])
}

impl<T: Element> SapaParams<T> {
    /// Fan-in scaled uniform projections, gate bias 0 (gate opens at 0.5).
    pub fn init<R: Rng>(rng: &mut R, enc_channels: usize, raw_dec_channels: usize, embed_dim: usize, radius: usize) -> Self {
        let mut uniform = |shape: [usize; 4], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_, _, _, _| T::from_f64(rng.gen_range(-bound..bound)))
        };
        SapaParams {
            p_enc: uniform([1, 1, embed_dim, enc_channels], enc_channels),
            p_dec: uniform([1, 1, embed_dim, enc_channels], enc_channels),
            q_enc: uniform([1, 1, embed_dim, enc_channels], enc_channels),
            q_dec: uniform([1, 1, embed_dim, enc_channels], enc_channels),
            gate_w: uniform([1, 1, 1, enc_channels], enc_channels),
            gate_b: Tensor::zeros([1, 1, 1, 1]),
            value_proj: uniform([enc_channels, raw_dec_channels, 1, 1], raw_dec_channels),
            radius,
        }
    }

    pub fn zeros(enc_channels: usize, dec_channels: usize, raw_dec_channels: usize, embed_dim: usize, radius: usize) -> Self {
        SapaParams {
            p_enc: matrix(embed_dim, enc_channels),
            p_dec: matrix(embed_dim, dec_channels),
            q_enc: matrix(embed_dim, enc_channels),
            q_dec: matrix(embed_dim, dec_channels),
            gate_w: matrix(1, enc_channels),
            gate_b: matrix(1, 1),
            value_proj: Tensor::zeros([enc_channels, raw_dec_channels, 1, 1]),
            radius,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.p_enc.h()
    }

    pub fn enc_channels(&self) -> usize {
        self.p_enc.w()
    }

    pub fn dec_channels(&self) -> usize {
        self.p_dec.w()
    }

    /// Named tensors in a fixed order, for checkpoints and optimizers.
    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 7] {
        [
            ("p_enc", &self.p_enc),
            ("p_dec", &self.p_dec),
            ("q_enc", &self.q_enc),
            ("q_dec", &self.q_dec),
            ("gate_w", &self.gate_w),
            ("gate_b", &self.gate_b),
            ("value_proj", &self.value_proj),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 7] {
        [
            ("p_enc", &mut self.p_enc),
            ("p_dec", &mut self.p_dec),
            ("q_enc", &mut self.q_enc),
            ("q_dec", &mut self.q_dec),
            ("gate_w", &mut self.gate_w),
            ("gate_b", &mut self.gate_b),
            ("value_proj", &mut self.value_proj),
        ]
    }

    /// Same layout, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        SapaParams {
            p_enc: z(&self.p_enc),
            p_dec: z(&self.p_dec),
            q_enc: z(&self.q_enc),
            q_dec: z(&self.q_dec),
            gate_w: z(&self.gate_w),
            gate_b: z(&self.gate_b),
            value_proj: z(&self.value_proj),
            radius: self.radius,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        let (ce, cd) = (self.enc_channels(), self.dec_channels());
        let ok = self.q_enc.shape() == [1, 1, d, ce]
            && self.q_dec.shape() == [1, 1, d, cd]
            && self.p_dec.shape() == [1, 1, d, cd]
            && self.gate_w.shape() == [1, 1, 1, ce]
            && self.gate_b.shape() == [1, 1, 1, 1];
        if ok {
            Ok(())
        } else {
            Err(Error::shape("inconsistent SAPA projection shapes"))
        }
    }
}

/// Inclusive index window of radius `r` around `center`, clipped to `[0, len)`.
#[inline]
fn window(center: usize, r: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(r), (center + r).min(len - 1))
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Point-major transpose of one `(C, HW)` block.
fn to_points<T: Element>(src: &[T], channels: usize, points: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for p in 0..points {
            out[p * channels + c] = src[c * points + p];
        }
    }
    out
}

/// Kernel weights over `neighborhood` for one encoder point `y`.
pub fn kernel_weights<T: Element>(y: &[T], neighborhood: &[&[T]], params: &SapaParams<T>) -> Result<Vec<T>> {
    params.validate()?;
    assert!(!neighborhood.is_empty(), "SAPA neighborhood is never empty");
    let (ce, cd, d) = (params.enc_channels(), params.dec_channels(), params.embed_dim());
    if y.len() != ce || neighborhood.iter().any(|z| z.len() != cd) {
        return Err(Error::shape("kernel_weights operand widths"));
    }
    let project = |m: &Tensor<T>, v: &[T]| -> Vec<T> {
        (0..d).map(|r| dot(&m.data()[r * v.len()..(r + 1) * v.len()], v)).collect()
    };
    let a = project(&params.p_enc, y);
    let b = project(&params.q_enc, y);
    let g = sigmoid(dot(params.gate_w.data(), y) + params.gate_b.data()[0]);
    let mut sims: Vec<T> = neighborhood
        .iter()
        .map(|z| g * dot(&a, &project(&params.p_dec, z)) + (T::one() - g) * dot(&b, &project(&params.q_dec, z)))
        .collect();
    crate::tensor::softmax_in_place(&mut sims);
    Ok(sims)
}

/// Intermediate values kept for [`upsample_backward`].
pub struct SapaCache<T: Element> {
    enc: Tensor<T>,
    dec: Tensor<T>,
    items: Vec<ItemCache<T>>,
}

struct ItemCache<T> {
    /// Point-major projections, `(HW, d)`.
    a: Vec<T>,
    b: Vec<T>,
    pz: Vec<T>,
    qz: Vec<T>,
    /// Point-major decoder values `(hw, C_dec)`.
    x: Vec<T>,
    gate: Vec<T>,
    /// Softmax weights per output location, concatenated in window order.
    weights: Vec<T>,
    offsets: Vec<usize>,
}

/// Upsamples `decoder` (`h × w`) to the encoder's `2h × 2w` grid.
pub fn upsample<T: Element>(encoder: &Tensor<T>, decoder: &Tensor<T>, params: &SapaParams<T>) -> Result<Tensor<T>> {
    upsample_with_cache(encoder, decoder, params).map(|(out, _)| out)
}

pub fn upsample_with_cache<T: Element>(
    encoder: &Tensor<T>,
    decoder: &Tensor<T>,
    params: &SapaParams<T>,
) -> Result<(Tensor<T>, SapaCache<T>)> {
    params.validate()?;
    let [n, ce, hh, ww] = encoder.shape();
    let [dn, cd, h, w] = decoder.shape();
    if dn != n || hh != 2 * h || ww != 2 * w || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "SAPA needs encoder at exactly 2x decoder: {:?} vs {:?}",
            encoder.shape(),
            decoder.shape()
        )));
    }
    if ce != params.enc_channels() || cd != params.dec_channels() {
        return Err(Error::shape(format!(
            "SAPA channels: encoder {ce}/{}, decoder {cd}/{}",
            params.enc_channels(),
            params.dec_channels()
        )));
    }
    let d = params.embed_dim();
    let r = params.radius;
    let (hw_hi, hw_lo) = (hh * ww, h * w);
    let mut out = Tensor::zeros([n, cd, hh, ww]);
    let mut items = Vec::with_capacity(n);
    for ni in 0..n {
        let y = encoder.item(ni);
        let xs = decoder.item(ni);
        let mut a = vec![T::zero(); hw_hi * d];
        let mut b = vec![T::zero(); hw_hi * d];
        let mut pz = vec![T::zero(); hw_lo * d];
        let mut qz = vec![T::zero(); hw_lo * d];
        matmul(y, Transpose::Yes, params.p_enc.data(), Transpose::Yes, &mut a, hw_hi, ce, d, T::one(), T::zero());
        matmul(y, Transpose::Yes, params.q_enc.data(), Transpose::Yes, &mut b, hw_hi, ce, d, T::one(), T::zero());
        matmul(xs, Transpose::Yes, params.p_dec.data(), Transpose::Yes, &mut pz, hw_lo, cd, d, T::one(), T::zero());
        matmul(xs, Transpose::Yes, params.q_dec.data(), Transpose::Yes, &mut qz, hw_lo, cd, d, T::one(), T::zero());
        let mut pre = vec![T::zero(); hw_hi];
        matmul(params.gate_w.data(), Transpose::No, y, Transpose::No, &mut pre, 1, ce, hw_hi, T::one(), T::zero());
        let gb = params.gate_b.data()[0];
        let gate: Vec<T> = pre.iter().map(|&p| sigmoid(p + gb)).collect();
        let x = to_points(xs, cd, hw_lo);

        let mut weights = Vec::with_capacity(hw_hi * (2 * r + 1) * (2 * r + 1));
        let mut offsets = Vec::with_capacity(hw_hi + 1);
        let mut acc = vec![T::zero(); cd];
        let dst = out.item_mut(ni);
        for oy in 0..hh {
            let (y0, y1) = window(oy / 2, r, h);
            for ox in 0..ww {
                let (x0, x1) = window(ox / 2, r, w);
                let l = oy * ww + ox;
                let g = gate[l];
                let al = &a[l * d..(l + 1) * d];
                let bl = &b[l * d..(l + 1) * d];
                let start = weights.len();
                offsets.push(start);
                for zy in y0..=y1 {
                    for zx in x0..=x1 {
                        let z = zy * w + zx;
                        let s = g * dot(al, &pz[z * d..(z + 1) * d]) + (T::one() - g) * dot(bl, &qz[z * d..(z + 1) * d]);
                        weights.push(s);
                    }
                }
                crate::tensor::softmax_in_place(&mut weights[start..]);
                acc.fill(T::zero());
                let mut k = start;
                for zy in y0..=y1 {
                    for zx in x0..=x1 {
                        let z = zy * w + zx;
                        let wz = weights[k];
                        k += 1;
                        for (c, v) in acc.iter_mut().enumerate() {
                            *v = *v + wz * x[z * cd + c];
                        }
                    }
                }
                for (c, &v) in acc.iter().enumerate() {
                    dst[c * hw_hi + l] = v;
                }
            }
        }
        offsets.push(weights.len());
        items.push(ItemCache {
            a,
            b,
            pz,
            qz,
            x,
            gate,
            weights,
            offsets,
        });
    }
    out.ensure_finite("sapa upsample")?;
    Ok((
        out,
        SapaCache {
            enc: encoder.clone(),
            dec: decoder.clone(),
            items,
        },
    ))
}

pub struct SapaGrads<T: Element> {
    pub encoder: Tensor<T>,
    pub decoder: Tensor<T>,
    /// `value_proj` is left at zero; it is filled by [`fuse_mask_feature_backward`].
    pub params: SapaParams<T>,
}

/// Gradients of [`upsample`] given the output gradient.
pub fn upsample_backward<T: Element>(cache: &SapaCache<T>, grad: &Tensor<T>, params: &SapaParams<T>) -> Result<SapaGrads<T>> {
    let [n, ce, hh, ww] = cache.enc.shape();
    let [_, cd, h, w] = cache.dec.shape();
    if grad.shape() != [n, cd, hh, ww] {
        return Err(Error::shape("SAPA backward gradient shape"));
    }
    let d = params.embed_dim();
    let r = params.radius;
    let (hw_hi, hw_lo) = (hh * ww, h * w);
    let mut genc = Tensor::zeros(cache.enc.shape());
    let mut gdec = Tensor::zeros(cache.dec.shape());
    let mut gp = params.zeros_like();
    for (ni, it) in cache.items.iter().enumerate() {
        let gout = to_points(grad.item(ni), cd, hw_hi);
        let mut da = vec![T::zero(); hw_hi * d];
        let mut db = vec![T::zero(); hw_hi * d];
        let mut dpz = vec![T::zero(); hw_lo * d];
        let mut dqz = vec![T::zero(); hw_lo * d];
        let mut dx = vec![T::zero(); hw_lo * cd];
        let mut dpre = vec![T::zero(); hw_hi];
        let mut dw = Vec::with_capacity((2 * r + 1) * (2 * r + 1));
        for oy in 0..hh {
            let (y0, y1) = window(oy / 2, r, h);
            for ox in 0..ww {
                let (x0, x1) = window(ox / 2, r, w);
                let l = oy * ww + ox;
                let gl = &gout[l * cd..(l + 1) * cd];
                let wts = &it.weights[it.offsets[l]..it.offsets[l + 1]];
                let g = it.gate[l];
                dw.clear();
                for zy in y0..=y1 {
                    for zx in x0..=x1 {
                        let z = zy * w + zx;
                        dw.push(dot(gl, &it.x[z * cd..(z + 1) * cd]));
                    }
                }
                let mean = wts.iter().zip(&dw).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                let al = &it.a[l * d..(l + 1) * d];
                let bl = &it.b[l * d..(l + 1) * d];
                let mut dg = T::zero();
                let mut k = 0;
                for zy in y0..=y1 {
                    for zx in x0..=x1 {
                        let z = zy * w + zx;
                        let wz = wts[k];
                        let ds = wz * (dw[k] - mean);
                        k += 1;
                        for (c, v) in dx[z * cd..(z + 1) * cd].iter_mut().enumerate() {
                            *v = *v + wz * gl[c];
                        }
                        let pzz = &it.pz[z * d..(z + 1) * d];
                        let qzz = &it.qz[z * d..(z + 1) * d];
                        dg = dg + ds * (dot(al, pzz) - dot(bl, qzz));
                        let (sg, sq) = (g * ds, (T::one() - g) * ds);
                        for e in 0..d {
                            da[l * d + e] = da[l * d + e] + sg * pzz[e];
                            db[l * d + e] = db[l * d + e] + sq * qzz[e];
                            dpz[z * d + e] = dpz[z * d + e] + sg * al[e];
                            dqz[z * d + e] = dqz[z * d + e] + sq * bl[e];
                        }
                    }
                }
                dpre[l] = dg * g * (T::one() - g);
            }
        }
        let y = cache.enc.item(ni);
        let xs = cache.dec.item(ni);
        // projection weights: dP = dAᵀ · Yᵀ
        matmul(&da, Transpose::Yes, y, Transpose::Yes, gp.p_enc.data_mut(), d, hw_hi, ce, T::one(), T::one());
        matmul(&db, Transpose::Yes, y, Transpose::Yes, gp.q_enc.data_mut(), d, hw_hi, ce, T::one(), T::one());
        matmul(&dpz, Transpose::Yes, xs, Transpose::Yes, gp.p_dec.data_mut(), d, hw_lo, cd, T::one(), T::one());
        matmul(&dqz, Transpose::Yes, xs, Transpose::Yes, gp.q_dec.data_mut(), d, hw_lo, cd, T::one(), T::one());
        matmul(&dpre, Transpose::No, y, Transpose::Yes, gp.gate_w.data_mut(), 1, hw_hi, ce, T::one(), T::one());
        gp.gate_b.data_mut()[0] = gp.gate_b.data()[0] + dpre.iter().fold(T::zero(), |a, &b| a + b);
        // inputs: dY = Pᵀ · dAᵀ (+ gate), dX = value path + Pᵀ · dPzᵀ
        let ge = genc.item_mut(ni);
        matmul(params.p_enc.data(), Transpose::Yes, &da, Transpose::Yes, ge, ce, d, hw_hi, T::one(), T::zero());
        matmul(params.q_enc.data(), Transpose::Yes, &db, Transpose::Yes, ge, ce, d, hw_hi, T::one(), T::one());
        matmul(params.gate_w.data(), Transpose::Yes, &dpre, Transpose::No, ge, ce, 1, hw_hi, T::one(), T::one());
        let gd = gdec.item_mut(ni);
        for c in 0..cd {
            for z in 0..hw_lo {
                gd[c * hw_lo + z] = dx[z * cd + c];
            }
        }
        matmul(params.p_dec.data(), Transpose::Yes, &dpz, Transpose::Yes, gd, cd, d, hw_lo, T::one(), T::one());
        matmul(params.q_dec.data(), Transpose::Yes, &dqz, Transpose::Yes, gd, cd, d, hw_lo, T::one(), T::one());
    }
    Ok(SapaGrads {
        encoder: genc,
        decoder: gdec,
        params: gp,
    })
}

const POINTWISE: ConvGeometry = ConvGeometry::new(1, 1, 0);

/// Mask feature: `f4 + SAPA(f4, value_proj(o8))`.
pub fn fuse_mask_feature<T: Element>(f4: &Tensor<T>, o8: &Tensor<T>, params: &SapaParams<T>) -> Result<Tensor<T>> {
    fuse_mask_feature_with_cache(f4, o8, params).map(|(out, _)| out)
}

pub struct FusionCache<T: Element> {
    o8: Tensor<T>,
    sapa: SapaCache<T>,
}

pub fn fuse_mask_feature_with_cache<T: Element>(
    f4: &Tensor<T>,
    o8: &Tensor<T>,
    params: &SapaParams<T>,
) -> Result<(Tensor<T>, FusionCache<T>)> {
    if f4.c() != params.enc_channels() || params.value_proj.shape() != [f4.c(), o8.c(), 1, 1] {
        return Err(Error::shape(format!(
            "mask fusion: f4 {:?}, o8 {:?}, value_proj {:?}",
            f4.shape(),
            o8.shape(),
            params.value_proj.shape()
        )));
    }
    let zero_bias = vec![T::zero(); f4.c()];
    let values = conv2d(o8, &params.value_proj, &zero_bias, POINTWISE)?;
    let (up, sapa) = upsample_with_cache(f4, &values, params)?;
    let out = f4.add(&up)?;
    Ok((out, FusionCache { o8: o8.clone(), sapa }))
}

pub struct FusionGrads<T: Element> {
    pub f4: Tensor<T>,
    pub o8: Tensor<T>,
    pub params: SapaParams<T>,
}

pub fn fuse_mask_feature_backward<T: Element>(
    cache: &FusionCache<T>,
    grad: &Tensor<T>,
    params: &SapaParams<T>,
) -> Result<FusionGrads<T>> {
    let mut g = upsample_backward(&cache.sapa, grad, params)?;
    let mut df4 = g.encoder;
    df4.add_assign(grad)?;
    let conv = conv2d_backward(&cache.o8, &params.value_proj, &g.decoder, POINTWISE)?;
    g.params.value_proj = conv.weight;
    Ok(FusionGrads {
        f4: df4,
        o8: conv.input,
        params: g.params,
    })
}
