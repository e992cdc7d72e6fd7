use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Max-subtracted softmax of a slice, in place.
pub fn softmax_in_place<T: Element>(v: &mut [T]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Softmax along `axis` (0..4) of a rank-4 tensor.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= 4 {
        return Err(Error::invalid(format!("softmax axis {axis} out of range")));
    }
    x.ensure_finite("softmax input")?;
    let shape = x.shape();
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * len * stride + s;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = data[base + i * stride];
            }
            softmax_in_place(&mut buf);
            for (i, b) in buf.iter().enumerate() {
                data[base + i * stride] = *b;
            }
        }
    }
    Ok(out)
}
