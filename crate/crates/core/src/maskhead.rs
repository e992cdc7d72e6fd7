//! Query-based mask head: per-query mask logits and class logits, bipartite
//! matching against ground-truth layers, the matched set loss and the
//! reduction of query masks to per-pixel class scores.

use crate::error::{Error, Result};
use crate::synthdata::{SegMask, NUM_CLASSES};
use crate::tensor::{matmul, sigmoid, Element, Tensor, Transpose};

/// Probability clamp applied before every logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// `ln((1 − c) / c)`: clamping a probability to `[c, 1 − c]` is the same as
/// clamping its logit to `±LOGIT_CLAMP`.
fn logit_clamp() -> f64 {
    ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln()
}

/// `mask_logits` is `(1, K, h, w)`; `class_logits` is `(1, 1, K, C + 1)`
/// with the last column meaning "no object".
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction<T: Element = f32> {
    pub mask_logits: Tensor<T>,
    pub class_logits: Tensor<T>,
}

impl<T: Element> MaskPrediction<T> {
    pub fn new(mask_logits: Tensor<T>, class_logits: Tensor<T>) -> Result<Self> {
        let k = mask_logits.c();
        if mask_logits.n() != 1 || class_logits.shape()[..3] != [1, 1, k] || class_logits.w() < 2 {
            return Err(Error::shape(format!(
                "mask prediction: masks {:?}, classes {:?}",
                mask_logits.shape(),
                class_logits.shape()
            )));
        }
        mask_logits.ensure_finite("mask logits")?;
        class_logits.ensure_finite("class logits")?;
        Ok(MaskPrediction { mask_logits, class_logits })
    }

    pub fn num_queries(&self) -> usize {
        self.mask_logits.c()
    }

    /// Real classes, excluding no-object.
    pub fn num_classes(&self) -> usize {
        self.class_logits.w() - 1
    }

    pub fn class_row(&self, k: usize) -> &[T] {
        let c = self.class_logits.w();
        &self.class_logits.data()[k * c..(k + 1) * c]
    }
}

/// Linear classifier applied to each query embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassHead<T: Element = f32> {
    /// `(1, 1, C + 1, D)`.
    pub weight: Tensor<T>,
    /// `(1, 1, 1, C + 1)`.
    pub bias: Tensor<T>,
}

/// `queries` is `(1, 1, K, D)`, `f_mask` is `(1, D, h, w)`.
pub fn predict<T: Element>(queries: &Tensor<T>, f_mask: &Tensor<T>, head: &ClassHead<T>) -> Result<MaskPrediction<T>> {
    let [_, _, k, d] = queries.shape();
    let [n, dc, h, w] = f_mask.shape();
    let c1 = head.weight.h();
    if n != 1 || dc != d || head.weight.w() != d || head.bias.shape() != [1, 1, 1, c1] {
        return Err(Error::shape(format!(
            "predict: queries {:?}, f_mask {:?}, class head {:?}",
            queries.shape(),
            f_mask.shape(),
            head.weight.shape()
        )));
    }
    let mut masks = Tensor::zeros([1, k, h, w]);
    matmul(queries.data(), Transpose::No, f_mask.data(), Transpose::No, masks.data_mut(), k, d, h * w, T::one(), T::zero());
    let mut classes = Tensor::zeros([1, 1, k, c1]);
    for row in classes.data_mut().chunks_mut(c1) {
        row.copy_from_slice(head.bias.data());
    }
    matmul(queries.data(), Transpose::No, head.weight.data(), Transpose::Yes, classes.data_mut(), k, d, c1, T::one(), T::one());
    MaskPrediction::new(masks, classes)
}

pub struct PredictGrads<T: Element> {
    pub queries: Tensor<T>,
    pub f_mask: Tensor<T>,
    pub head: ClassHead<T>,
}

pub fn predict_backward<T: Element>(
    queries: &Tensor<T>,
    f_mask: &Tensor<T>,
    head: &ClassHead<T>,
    grad: &MaskPrediction<T>,
) -> Result<PredictGrads<T>> {
    let [_, _, k, d] = queries.shape();
    let hw = f_mask.h() * f_mask.w();
    let c1 = head.weight.h();
    if grad.mask_logits.shape() != [1, k, f_mask.h(), f_mask.w()] || grad.class_logits.shape() != [1, 1, k, c1] {
        return Err(Error::shape("predict backward gradient shapes"));
    }
    let (gm, gc) = (grad.mask_logits.data(), grad.class_logits.data());
    let mut gq = Tensor::zeros(queries.shape());
    matmul(gm, Transpose::No, f_mask.data(), Transpose::Yes, gq.data_mut(), k, hw, d, T::one(), T::zero());
    matmul(gc, Transpose::No, head.weight.data(), Transpose::No, gq.data_mut(), k, c1, d, T::one(), T::one());
    let mut gf = Tensor::zeros(f_mask.shape());
    matmul(queries.data(), Transpose::Yes, gm, Transpose::No, gf.data_mut(), d, k, hw, T::one(), T::zero());
    let mut gw = Tensor::zeros(head.weight.shape());
    matmul(gc, Transpose::Yes, queries.data(), Transpose::No, gw.data_mut(), c1, k, d, T::one(), T::zero());
    let mut gb = Tensor::zeros(head.bias.shape());
    for row in gc.chunks(c1) {
        for (b, &g) in gb.data_mut().iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok(PredictGrads {
        queries: gq,
        f_mask: gf,
        head: ClassHead { weight: gw, bias: gb },
    })
}

/// Binary targets, one per class present in a mask, at some resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthLayers {
    pub h: usize,
    pub w: usize,
    /// `(binary target as 0/1 f64, class index)`.
    pub layers: Vec<(Vec<f64>, usize)>,
}

impl GroundTruthLayers {
    /// One layer per present class, ordered by class index.
    pub fn from_mask(mask: &SegMask) -> Self {
        let mut layers = Vec::new();
        for class in 0..NUM_CLASSES {
            let target: Vec<f64> = mask.classes().iter().map(|&c| f64::from(u8::from(c as usize == class))).collect();
            if target.iter().any(|&v| v > 0.0) {
                layers.push((target, class));
            }
        }
        GroundTruthLayers {
            h: mask.h(),
            w: mask.w(),
            layers,
        }
    }

    /// Area-majority downsampling by an integer factor before layer
    /// decomposition; ties go to the lower class index.
    pub fn from_mask_downsampled(mask: &SegMask, factor: usize) -> Result<Self> {
        if factor == 0 || mask.h() % factor != 0 || mask.w() % factor != 0 {
            return Err(Error::invalid(format!(
                "cannot downsample {}x{} mask by {factor}",
                mask.h(), mask.w()
            )));
        }
        let (h, w) = (mask.h() / factor, mask.w() / factor);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut counts = [0usize; NUM_CLASSES];
                for dy in 0..factor {
                    for dx in 0..factor {
                        counts[mask.get(y * factor + dy, x * factor + dx) as usize] += 1;
                    }
                }
                let best = (0..NUM_CLASSES).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
                out.push(best as u8);
            }
        }
        Ok(Self::from_mask(&SegMask::new(h, w, out)?))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Loss and matching-cost weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub mask_ce: f64,
    /// Weight of the no-object cross-entropy over unmatched queries.
    pub no_object: f64,
    /// Dice smoothing; 0 gives the plain overlap ratio.
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 5.0,
            mask_ce: 5.0,
            no_object: 0.1,
            dice_eps: 1.0,
        }
    }
}

/// `1 − 2Σab / (Σa + Σb + eps)`.
pub fn dice_loss(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom: f64 = a.iter().sum::<f64>() + b.iter().sum::<f64>() + eps;
    if denom == 0.0 {
        return 0.0;
    }
    1.0 - 2.0 * inter / denom
}

/// Mean binary cross-entropy of probabilities `p` (clamped) against `y`.
pub fn bce_loss(p: &[f64], y: &[f64]) -> f64 {
    let n = p.len().max(1) as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-query quantities used by both cost and loss.
struct QueryStats {
    /// Clamped sigmoid per pixel.
    p: Vec<f64>,
    /// Clamped logit per pixel.
    xc: Vec<f64>,
    sum_p: f64,
    /// `Σ softplus(xc)`: the BCE against an all-zero target, unnormalized.
    sum_softplus: f64,
    log_probs: Vec<f64>,
}

fn query_stats<T: Element>(pred: &MaskPrediction<T>, k: usize) -> QueryStats {
    let lim = logit_clamp();
    let plane = pred.mask_logits.plane(0, k);
    let xc: Vec<f64> = plane.iter().map(|v| v.as_f64().clamp(-lim, lim)).collect();
    let p: Vec<f64> = xc.iter().map(|&x| sigmoid(x)).collect();
    let row: Vec<f64> = pred.class_row(k).iter().map(|v| v.as_f64()).collect();
    QueryStats {
        sum_p: p.iter().sum(),
        sum_softplus: xc.iter().map(|&x| softplus(x)).sum(),
        p,
        xc,
        log_probs: log_softmax(&row),
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

fn check_layers<T: Element>(pred: &MaskPrediction<T>, gt: &GroundTruthLayers) -> Result<()> {
    if (pred.mask_logits.h(), pred.mask_logits.w()) != (gt.h, gt.w) {
        return Err(Error::shape(format!(
            "ground truth {}x{} vs mask logits {}x{}",
            gt.h,
            gt.w,
            pred.mask_logits.h(),
            pred.mask_logits.w()
        )));
    }
    if let Some((_, c)) = gt.layers.iter().find(|(_, c)| *c >= pred.num_classes()) {
        return Err(Error::invalid(format!("ground-truth class {c} out of range")));
    }
    Ok(())
}

/// `cost[k][q] = −ln p_q(c_k) + λ_dice·dice + λ_c·bce`, shape `n × K`.
pub fn matching_cost<T: Element>(pred: &MaskPrediction<T>, gt: &GroundTruthLayers, weights: &LossWeights) -> Result<Vec<Vec<f64>>> {
    check_layers(pred, gt)?;
    let hw = (gt.h * gt.w) as f64;
    let stats: Vec<QueryStats> = (0..pred.num_queries()).map(|k| query_stats(pred, k)).collect();
    let cost = gt
        .layers
        .iter()
        .map(|(y, c)| {
            let sum_y: f64 = y.iter().sum();
            stats
                .iter()
                .map(|s| {
                    let prob = s.log_probs[*c].exp().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let mut cost = -prob.ln();
                    if weights.dice != 0.0 {
                        let inter: f64 = s.p.iter().zip(y).map(|(a, b)| a * b).sum();
                        let denom = s.sum_p + sum_y + weights.dice_eps;
                        cost += weights.dice * (1.0 - 2.0 * inter / denom);
                    }
                    if weights.mask_ce != 0.0 {
                        let yx: f64 = s.xc.iter().zip(y).map(|(a, b)| a * b).sum();
                        cost += weights.mask_ce * (s.sum_softplus - yx) / hw;
                    }
                    cost
                })
                .collect()
        })
        .collect();
    Ok(cost)
}

/// Ground-truth layer `k` is assigned to query `pairs[k].1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    /// `Σ_k cost[k][m_k]` accumulated in `k` order.
    pub total: f64,
}

/// Minimum-cost injective assignment (Kuhn–Munkres with potentials),
/// returning only the optimal value.
fn assignment_value(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return 0.0;
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![0usize; n + 1];
    for j in 1..=m {
        if p[j] != 0 {
            assigned[p[j]] = j;
        }
    }
    (1..=n).map(|i| a(i, assigned[i])).sum()
}

/// Optimal matching with the lexicographically smallest `(m_0, m_1, ...)`
/// among all optima.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching> {
    let n = cost.len();
    let k = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != k) {
        return Err(Error::shape("ragged cost matrix"));
    }
    if n > k {
        return Err(Error::invalid(format!("{n} ground-truth layers but only {k} queries")));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matching cost"));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..k).collect();
    let best = assignment_value(cost, &all_rows, &all_cols);
    let scale = cost.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * n.max(1) as f64;

    let mut pairs = Vec::with_capacity(n);
    let mut fixed = 0.0;
    let mut free: Vec<usize> = all_cols;
    for row in 0..n {
        let rest: Vec<usize> = (row + 1..n).collect();
        let mut chosen = None;
        for (pos, &col) in free.iter().enumerate() {
            let mut others = free.clone();
            others.remove(pos);
            let value = fixed + cost[row][col] + assignment_value(cost, &rest, &others);
            if value <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("some column always attains the optimum");
        let col = free.remove(pos);
        fixed += cost[row][col];
        pairs.push((row, col));
    }
    let total = pairs.iter().fold(0.0, |acc, &(r, c)| acc + cost[r][c]);
    Ok(Matching { pairs, total })
}

/// Loss value with its components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub class_ce: f64,
    pub dice: f64,
    pub mask_ce: f64,
    pub no_object: f64,
}

/// Matched set loss: the mean over matched pairs of
/// `ce + λ_dice·dice + λ_c·bce`, plus `no_object · mean ce(no-object)` over
/// unmatched queries. Returns the loss and its gradient with respect to the
/// prediction.
pub fn supervised_loss<T: Element>(
    pred: &MaskPrediction<T>,
    gt: &GroundTruthLayers,
    matching: &Matching,
    weights: &LossWeights,
) -> Result<(LossBreakdown, MaskPrediction<T>)> {
    check_layers(pred, gt)?;
    let kq = pred.num_queries();
    let c1 = pred.class_logits.w();
    let no_obj = c1 - 1;
    if matching.pairs.len() != gt.len() || matching.pairs.iter().any(|&(g, q)| g >= gt.len() || q >= kq) {
        return Err(Error::invalid("matching does not fit the prediction"));
    }
    let hw = gt.h * gt.w;
    let lim = logit_clamp();
    let mut gmask = vec![0.0f64; kq * hw];
    let mut gclass = vec![0.0f64; kq * c1];
    let mut out = LossBreakdown::default();
    let mut matched = vec![false; kq];
    let inv_n = if gt.is_empty() { 0.0 } else { 1.0 / gt.len() as f64 };

    let class_term = |q: usize, target: usize, weight: f64, gclass: &mut [f64]| -> f64 {
        let row: Vec<f64> = pred.class_row(q).iter().map(|v| v.as_f64()).collect();
        let lp = log_softmax(&row);
        for (j, g) in gclass[q * c1..(q + 1) * c1].iter_mut().enumerate() {
            let onehot = if j == target { 1.0 } else { 0.0 };
            *g += weight * (lp[j].exp() - onehot);
        }
        -lp[target]
    };

    for &(g, q) in &matching.pairs {
        matched[q] = true;
        let (y, c) = &gt.layers[g];
        out.class_ce += inv_n * class_term(q, *c, inv_n, &mut gclass);

        let logits = pred.mask_logits.plane(0, q);
        let xc: Vec<f64> = logits.iter().map(|v| v.as_f64().clamp(-lim, lim)).collect();
        let inside: Vec<bool> = logits.iter().map(|v| v.as_f64().abs() < lim).collect();
        let p: Vec<f64> = xc.iter().map(|&x| sigmoid(x)).collect();
        let gq = &mut gmask[q * hw..(q + 1) * hw];

        if weights.dice != 0.0 {
            let s: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
            let d = p.iter().sum::<f64>() + y.iter().sum::<f64>() + weights.dice_eps;
            if d > 0.0 {
                out.dice += inv_n * (1.0 - 2.0 * s / d);
                let scale = weights.dice * inv_n;
                for i in 0..hw {
                    if inside[i] {
                        let dp = (2.0 * s - 2.0 * y[i] * d) / (d * d);
                        gq[i] += scale * dp * p[i] * (1.0 - p[i]);
                    }
                }
            }
        }
        if weights.mask_ce != 0.0 {
            let bce: f64 = xc.iter().zip(y).map(|(&x, &t)| softplus(x) - t * x).sum::<f64>() / hw as f64;
            out.mask_ce += inv_n * bce;
            let scale = weights.mask_ce * inv_n / hw as f64;
            for i in 0..hw {
                if inside[i] {
                    gq[i] += scale * (p[i] - y[i]);
                }
            }
        }
    }
    let unmatched: Vec<usize> = (0..kq).filter(|&q| !matched[q]).collect();
    if !unmatched.is_empty() && weights.no_object != 0.0 {
        let w = weights.no_object / unmatched.len() as f64;
        let mut acc = 0.0;
        for &q in &unmatched {
            acc += class_term(q, no_obj, w, &mut gclass);
        }
        out.no_object = acc / unmatched.len() as f64;
    }
    out.total = out.class_ce + weights.dice * out.dice + weights.mask_ce * out.mask_ce + weights.no_object * out.no_object;
    let to_t = |v: Vec<f64>, shape: [usize; 4]| Tensor::new(shape, v.into_iter().map(T::from_f64).collect());
    let grad = MaskPrediction {
        mask_logits: to_t(gmask, pred.mask_logits.shape())?,
        class_logits: to_t(gclass, pred.class_logits.shape())?,
    };
    Ok((out, grad))
}

/// `ln Σ_k softmax(class_k)[c] · sigmoid(mask_k)`, shape `(1, C, h, w)`.
pub fn semantic_merge<T: Element>(pred: &MaskPrediction<T>) -> Result<Tensor<T>> {
    let [_, kq, h, w] = pred.mask_logits.shape();
    let c = pred.num_classes();
    let mut scores = vec![0.0f64; c * h * w];
    for q in 0..kq {
        let row: Vec<f64> = pred.class_row(q).iter().map(|v| v.as_f64()).collect();
        let probs: Vec<f64> = log_softmax(&row).into_iter().map(f64::exp).collect();
        let plane = pred.mask_logits.plane(0, q);
        for (cls, &pc) in probs.iter().take(c).enumerate() {
            let dst = &mut scores[cls * h * w..(cls + 1) * h * w];
            for (s, m) in dst.iter_mut().zip(plane) {
                *s += pc * sigmoid(m.as_f64());
            }
        }
    }
    let data = scores.into_iter().map(|s| T::from_f64(s.max(PROB_CLAMP).ln())).collect();
    Tensor::new([1, c, h, w], data)
}

/// Per-pixel argmax over channels of `(1, C, H, W)` logits; ties go to the
/// lowest class index.
pub fn argmax_mask<T: Element>(logits: &Tensor<T>) -> Result<SegMask> {
    let [_, c, h, w] = logits.shape();
    if logits.n() != 1 || c == 0 || c > NUM_CLASSES {
        return Err(Error::shape(format!("argmax over logits {:?}", logits.shape())));
    }
    let mut out = vec![0u8; h * w];
    for (i, o) in out.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_v = logits.data()[i];
        for k in 1..c {
            let v = logits.data()[k * h * w + i];
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        *o = best as u8;
    }
    SegMask::new(h, w, out)
}
