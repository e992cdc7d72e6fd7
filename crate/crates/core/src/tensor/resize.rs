use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Direction of a resize; only used to validate the requested extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    /// Output at least as large as the input along both axes.
    Zoom,
    /// Output at most as large as the input along both axes.
    Downsample,
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-center sampling table: output `o` reads input coordinate
/// `(o + 0.5) · in / out − 0.5`, clamped into `[0, in − 1]`.
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

#[inline]
fn lerp<T: Element>(a: T, b: T, f: T) -> T {
    // `a + (b - a) f` reproduces constants exactly; the clamp keeps the
    // result inside [a, b] under rounding.
    let v = a + (b - a) * f;
    v.max(a.min(b)).min(a.max(b))
}

/// Bilinear resize of every plane to `out_h × out_w`.
pub fn bilinear_resize<T: Element>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_resize of zero-sized input"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize to zero-sized output"));
    }
    let ok = match mode {
        ResizeMode::Zoom => out_h >= h && out_w >= w,
        ResizeMode::Downsample => out_h <= h && out_w <= w,
    };
    if !ok {
        return Err(Error::invalid(format!(
            "{mode:?} from {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let fx: Vec<T> = tx.iter().map(|t| T::from_f64(t.frac)).collect();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let mut row_lo = vec![T::zero(); out_w];
    let mut row_hi = vec![T::zero(); out_w];
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for (oy, ty) in ty.iter().enumerate() {
                let lo = &src[ty.lo * w..(ty.lo + 1) * w];
                let hi = &src[ty.hi * w..(ty.hi + 1) * w];
                for (ox, t) in tx.iter().enumerate() {
                    row_lo[ox] = lerp(lo[t.lo], lo[t.hi], fx[ox]);
                    row_hi[ox] = lerp(hi[t.lo], hi[t.hi], fx[ox]);
                }
                let fy = T::from_f64(ty.frac);
                let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
                for ox in 0..out_w {
                    drow[ox] = lerp(row_lo[ox], row_hi[ox], fy);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters `grad` (output-sized) back onto
/// an `in_h × in_w` input.
pub fn bilinear_resize_backward<T: Element>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, out_h, out_w] = grad.shape();
    if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize_backward with zero extent"));
    }
    if out_h == in_h && out_w == in_w {
        return Ok(grad.clone());
    }
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut out = Tensor::zeros([n, c, in_h, in_w]);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for (oy, ty) in ty.iter().enumerate() {
                let fy = T::from_f64(ty.frac);
                for (ox, tx) in tx.iter().enumerate() {
                    let fx = T::from_f64(tx.frac);
                    let v = g[oy * out_w + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[ty.lo * in_w + tx.lo] = dst[ty.lo * in_w + tx.lo] + top * (T::one() - fx);
                    dst[ty.lo * in_w + tx.hi] = dst[ty.lo * in_w + tx.hi] + top * fx;
                    dst[ty.hi * in_w + tx.lo] = dst[ty.hi * in_w + tx.lo] + bot * (T::one() - fx);
                    dst[ty.hi * in_w + tx.hi] = dst[ty.hi * in_w + tx.hi] + bot * fx;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zoom_to_768() {
        let x = Tensor::<f32>::zeros([1, 3, 512, 512]);
        let y = bilinear_resize(&x, 768, 768, ResizeMode::Zoom).unwrap();
        assert_eq!(y.shape(), [1, 3, 768, 768]);
    }

    #[test]
    fn identity_is_bitwise() {
        let x = Tensor::<f32>::from_fn([1, 2, 5, 7], |_, c, h, w| ((c + h * w) as f32).sin());
        let y = bilinear_resize(&x, 5, 7, ResizeMode::Zoom).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rejects_zero_and_wrong_direction() {
        let x = Tensor::<f32>::zeros([1, 1, 0, 4]);
        assert!(bilinear_resize(&x, 2, 2, ResizeMode::Zoom).is_err());
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        assert!(bilinear_resize(&x, 0, 2, ResizeMode::Downsample).is_err());
        assert!(bilinear_resize(&x, 2, 2, ResizeMode::Zoom).is_err());
        assert!(bilinear_resize(&x, 8, 8, ResizeMode::Downsample).is_err());
    }

    #[test]
    fn half_pixel_upsample_by_two() {
        // [0, 1] -> sample points -0.25, 0.25, 0.75, 1.25 -> clamp -> 0, .25, .75, 1
        let x = Tensor::<f64>::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4, ResizeMode::Zoom).unwrap();
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        // <resize(x), g> == <x, resize_backward(g)>
        let x = Tensor::<f64>::from_fn([1, 2, 3, 5], |_, c, h, w| ((c * 7 + h * 3 + w) as f64).cos());
        let y = bilinear_resize(&x, 6, 10, ResizeMode::Zoom).unwrap();
        let g = Tensor::<f64>::from_fn(y.shape(), |_, c, h, w| ((c + h * 5 + w * 2) as f64).sin());
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let gx = bilinear_resize_backward(&g, 3, 5).unwrap();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn constant_stays_exact(c in -100.0f32..100.0, h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20) {
            let x = Tensor::<f32>::full([1, 2, h, w], c);
            let (oh, ow) = (oh.max(h), ow.max(w));
            let y = bilinear_resize(&x, oh, ow, ResizeMode::Zoom).unwrap();
            prop_assert!(y.data().iter().all(|&v| v == c));
        }

        #[test]
        fn output_within_input_range(seed in 0u64..1000, h in 2usize..12, w in 2usize..12, oh in 1usize..12, ow in 1usize..12) {
            let x = Tensor::<f32>::from_fn([1, 1, h, w], |_, _, y, x| (((seed as usize * 31 + y * 17 + x * 7) % 23) as f32 * 0.37).sin());
            let (lo, hi) = x.min_max();
            let (oh, ow) = (oh.min(h), ow.min(w));
            let y = bilinear_resize(&x, oh, ow, ResizeMode::Downsample).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= lo && v <= hi));
        }
    }
}
