use super::gemm::{matmul, Transpose};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry { kernel, stride, pad }
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub struct Conv2dGrads<T: Element> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

fn check_weight<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, geom: ConvGeometry) -> Result<(usize, usize)> {
    let [_, cin, h, w] = x.shape();
    let [_, wcin, kh, kw] = weight.shape();
    if wcin != cin || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(format!(
            "conv weight {:?} incompatible with input {:?} and kernel {}",
            weight.shape(),
            x.shape(),
            geom.kernel
        )));
    }
    match (geom.out_extent(h), geom.out_extent(w)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::shape(format!(
            "conv input {h}x{w} smaller than kernel {}",
            geom.kernel
        ))),
    }
}

/// Unfolds one batch item into a `(Cin·k·k, Hout·Wout)` matrix.
fn im2col<T: Element>(src: &[T], cin: usize, h: usize, w: usize, geom: ConvGeometry, oh: usize, ow: usize, cols: &mut [T]) {
    let k = geom.kernel;
    let ohw = oh * ow;
    for c in 0..cin {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ohw;
                let dst = &mut cols[row..row + ohw];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], cin: usize, h: usize, w: usize, geom: ConvGeometry, oh: usize, ow: usize, dst: &mut [T]) {
    let k = geom.kernel;
    let ohw = oh * ow;
    for c in 0..cin {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ohw;
                let src = &cols[row..row + ohw];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] = prow[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution. `weight` is `(Cout, Cin, k, k)`, `bias` has `Cout` entries.
pub fn conv2d<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &[T], geom: ConvGeometry) -> Result<Tensor<T>> {
    let (oh, ow) = check_weight(x, weight, geom)?;
    let [n, cin, h, w] = x.shape();
    let cout = weight.n();
    if bias.len() != cout {
        return Err(Error::shape(format!("conv bias has {} entries, expected {cout}", bias.len())));
    }
    let kdim = cin * geom.kernel * geom.kernel;
    let ohw = oh * ow;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * ohw] };
    for ni in 0..n {
        let src = x.item(ni);
        let b: &[T] = if geom.is_pointwise() {
            src
        } else {
            im2col(src, cin, h, w, geom, oh, ow, &mut cols);
            &cols
        };
        let dst = out.item_mut(ni);
        for (co, &bv) in bias.iter().enumerate() {
            dst[co * ohw..(co + 1) * ohw].fill(bv);
        }
        matmul(weight.data(), Transpose::No, b, Transpose::No, dst, cout, kdim, ohw, T::one(), T::one());
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Conv2dGrads<T>> {
    let (oh, ow) = check_weight(x, weight, geom)?;
    let [n, cin, h, w] = x.shape();
    let cout = weight.n();
    if grad_out.shape() != [n, cout, oh, ow] {
        return Err(Error::shape(format!(
            "conv grad {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout, oh, ow]
        )));
    }
    let kdim = cin * geom.kernel * geom.kernel;
    let ohw = oh * ow;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![T::zero(); cout];
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * ohw] };
    let mut dcols = vec![T::zero(); kdim * ohw];
    for ni in 0..n {
        let g = grad_out.item(ni);
        for (co, d) in db.iter_mut().enumerate() {
            *d = *d + g[co * ohw..(co + 1) * ohw].iter().fold(T::zero(), |a, &b| a + b);
        }
        let src = x.item(ni);
        let b: &[T] = if geom.is_pointwise() {
            src
        } else {
            im2col(src, cin, h, w, geom, oh, ow, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        matmul(g, Transpose::No, b, Transpose::Yes, dw.data_mut(), cout, ohw, kdim, T::one(), T::one());
        // dcols = Wᵀ · dY
        if geom.is_pointwise() {
            matmul(weight.data(), Transpose::Yes, g, Transpose::No, dx.item_mut(ni), kdim, cout, ohw, T::one(), T::zero());
        } else {
            matmul(weight.data(), Transpose::Yes, g, Transpose::No, &mut dcols, kdim, cout, ohw, T::one(), T::zero());
            col2im(&dcols, cin, h, w, geom, oh, ow, dx.item_mut(ni));
        }
    }
    Ok(Conv2dGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64], g: ConvGeometry) -> Tensor<f64> {
        let [n, cin, h, w] = x.shape();
        let cout = wt.n();
        let oh = g.out_extent(h).unwrap();
        let ow = g.out_extent(w).unwrap();
        Tensor::from_fn([n, cout, oh, ow], |ni, co, oy, ox| {
            let mut acc = b[co];
            for ci in 0..cin {
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt.at(co, ci, ky, kx) * x.at(ni, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn fixture(g: ConvGeometry) -> (Tensor<f64>, Tensor<f64>, Vec<f64>) {
        let x = Tensor::from_fn([2, 3, 7, 6], |n, c, h, w| ((n * 97 + c * 31 + h * 7 + w) as f64 * 0.37).sin());
        let wt = Tensor::from_fn([4, 3, g.kernel, g.kernel], |o, c, y, x| ((o * 13 + c * 5 + y * 3 + x) as f64 * 0.71).cos() * 0.5);
        let b = vec![0.1, -0.2, 0.3, 0.05];
        (x, wt, b)
    }

    #[test]
    fn forward_matches_direct_sum() {
        for g in [ConvGeometry::new(3, 1, 1), ConvGeometry::new(3, 2, 1), ConvGeometry::new(1, 1, 0)] {
            let (x, wt, b) = fixture(g);
            let got = conv2d(&x, &wt, &b, g).unwrap();
            let want = naive_conv(&x, &wt, &b, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_extent() {
        let g = ConvGeometry::new(3, 2, 1);
        assert_eq!(g.out_extent(96), Some(48));
        assert_eq!(g.out_extent(3), Some(2));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for g in [ConvGeometry::new(3, 2, 1), ConvGeometry::new(1, 1, 0)] {
            let (x, wt, b) = fixture(g);
            let y = conv2d(&x, &wt, &b, g).unwrap();
            // objective: <y, r> for a fixed r
            let r = Tensor::from_fn(y.shape(), |n, c, h, w| ((n + c * 3 + h * 5 + w * 7) as f64 * 0.13).sin());
            let grads = conv2d_backward(&x, &wt, &r, g).unwrap();
            let obj = |y: &Tensor<f64>| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
            let rx = grad_check(|p| obj(&conv2d(p, &wt, &b, g).unwrap()), &x, &grads.input, 1e-5).unwrap();
            let rw = grad_check(|p| obj(&conv2d(&x, p, &b, g).unwrap()), &wt, &grads.weight, 1e-5).unwrap();
            let bt = Tensor::new([1, 4, 1, 1], b.clone()).unwrap();
            let gb = Tensor::new([1, 4, 1, 1], grads.bias.clone()).unwrap();
            let rb = grad_check(|p| obj(&conv2d(&x, &wt, p.data(), g).unwrap()), &bt, &gb, 1e-5).unwrap();
            assert!(rx.max_rel_error < 1e-7, "{rx:?}");
            assert!(rw.max_rel_error < 1e-7, "{rw:?}");
            assert!(rb.max_rel_error < 1e-7, "{rb:?}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([3, 5, 3, 3]);
        assert!(conv2d(&x, &w, &[0.0; 3], ConvGeometry::new(3, 1, 1)).is_err());
    }
}
