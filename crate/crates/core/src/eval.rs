//! Confusion-matrix IoU, class pixel statistics and ablation tables.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskhead::argmax_mask;
use crate::model::Segmenter;
use crate::synthdata::{SegMask, CLASS_NAMES, NUM_CLASSES};
use crate::tensor::Tensor;

/// Rows are ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new(NUM_CLASSES)
    }
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix { n, counts: vec![0; n * n] }
    }

    pub fn from_pair(pred: &SegMask, gt: &SegMask) -> Result<Self> {
        let mut cm = Self::default();
        cm.accumulate(pred, gt)?;
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &SegMask, gt: &SegMask) -> Result<()> {
        if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.h(),
                pred.w(),
                gt.h(),
                gt.w()
            )));
        }
        if let Some(&c) = pred.classes().iter().chain(gt.classes()).find(|&&c| c as usize >= self.n) {
            return Err(Error::invalid(format!("class {c} outside a {}-class matrix", self.n)));
        }
        for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` for classes absent from both ground truth and
    /// prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|i| {
                let tp = self.get(i, i);
                let row: u64 = (0..self.n).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..self.n).map(|j| self.get(j, i)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Per-class IoU and their mean over present classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        let iou = self.iou();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::invalid("mIoU of an empty confusion matrix"));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok((iou, mean))
    }
}

/// Argmax masks of `model` over `images`, in input order.
pub fn predict_masks(model: &dyn Segmenter, images: &[&Tensor]) -> Result<Vec<SegMask>> {
    images.par_iter().map(|x| argmax_mask(&model.infer(x)?)).collect()
}

/// Dataset-global confusion matrix of `predict(image)` against `gt`.
pub fn evaluate_with<F>(pairs: &[(&Tensor, &SegMask)], predict: F) -> Result<ConfusionMatrix>
where
    F: Fn(&Tensor) -> Result<SegMask> + Sync,
{
    let parts: Vec<ConfusionMatrix> = pairs
        .par_iter()
        .map(|(x, gt)| ConfusionMatrix::from_pair(&predict(x)?, gt))
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::default();
    for p in &parts {
        cm.merge(p)?;
    }
    Ok(cm)
}

pub fn evaluate(model: &dyn Segmenter, pairs: &[(&Tensor, &SegMask)]) -> Result<ConfusionMatrix> {
    evaluate_with(pairs, |x| argmax_mask(&model.infer(x)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassShares {
    pub counts: [u64; NUM_CLASSES],
    pub shares: [f64; NUM_CLASSES],
    /// Counts divided by the stem count; `None` when there are no stem pixels.
    pub relative_to_stem: Option<[f64; NUM_CLASSES]>,
}

pub fn class_proportions(masks: &[&SegMask]) -> Result<ClassShares> {
    if masks.is_empty() {
        return Err(Error::invalid("class proportions of no masks"));
    }
    let mut counts = [0u64; NUM_CLASSES];
    for m in masks {
        for (t, c) in counts.iter_mut().zip(m.counts()) {
            *t += c;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class proportions of empty masks"));
    }
    let shares = counts.map(|c| c as f64 / total as f64);
    let stem = counts[crate::synthdata::STEM as usize];
    let relative_to_stem = (stem > 0).then(|| counts.map(|c| c as f64 / stem as f64));
    Ok(ClassShares {
        counts,
        shares,
        relative_to_stem,
    })
}

/// One finished configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    /// Free-form description of what differs in this run.
    pub config: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

#[derive(Serialize)]
struct ReportRecord<'a> {
    row: usize,
    label: &'a str,
    config: &'a str,
    miou: f64,
    delta: Option<f64>,
    iou: Vec<(String, Option<f64>)>,
}

/// Text table plus one JSON record per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub jsonl: String,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x:.4}"))
}

/// Rows in the given order; `delta` is relative to the previous row.
pub fn ablation_report(title: &str, runs: &[RunSummary]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::invalid("ablation report needs at least one run"));
    }
    let mut seen = HashSet::new();
    for r in runs {
        if !seen.insert(r.label.as_str()) {
            return Err(Error::invalid(format!("duplicate run label {}", r.label)));
        }
    }
    let n_classes = runs.iter().map(|r| r.per_class_iou.len()).max().unwrap_or(0);
    let name = |i: usize| CLASS_NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string());
    let label_w = runs.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);

    let mut text = String::new();
    let _ = writeln!(text, "# {title}");
    let _ = write!(text, "{:<label_w$}  {:>7}  {:>8}", "label", "mIoU", "delta");
    for i in 0..n_classes {
        let _ = write!(text, "  {:>10}", name(i));
    }
    let _ = writeln!(text, "  config");
    let mut jsonl = String::new();
    for (row, r) in runs.iter().enumerate() {
        let delta = (row > 0).then(|| r.miou - runs[row - 1].miou);
        let delta_s = delta.map_or_else(|| "-".to_string(), |d| format!("{d:+.4}"));
        let _ = write!(text, "{:<label_w$}  {:>7.4}  {:>8}", r.label, r.miou, delta_s);
        for i in 0..n_classes {
            let _ = write!(text, "  {:>10}", fmt_opt(r.per_class_iou.get(i).copied().flatten()));
        }
        let _ = writeln!(text, "  {}", r.config);
        let rec = ReportRecord {
            row,
            label: &r.label,
            config: &r.config,
            miou: r.miou,
            delta,
            iou: (0..n_classes).map(|i| (name(i), r.per_class_iou.get(i).copied().flatten())).collect(),
        };
        jsonl.push_str(&serde_json::to_string(&rec).expect("report records serialize"));
        jsonl.push('\n');
    }
    Ok(Report { text, jsonl })
}

/// Per-class IoU lines followed by the mean, for the `eval` command.
pub fn format_iou(iou: &[Option<f64>], miou: f64) -> String {
    let mut out = String::new();
    for (i, v) in iou.iter().enumerate() {
        let name = CLASS_NAMES.get(i).copied().unwrap_or("?");
        let _ = writeln!(out, "{name:<10} {}", fmt_opt(*v));
    }
    let _ = writeln!(out, "{:<10} {miou:.4}", "mIoU");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, v: &[u8]) -> SegMask {
        SegMask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn worked_two_by_two() {
        let pred = mask(2, 2, &[0, 0, 1, 1]);
        let gt = mask(2, 2, &[0, 1, 1, 1]);
        let cm = ConfusionMatrix::from_pair(&pred, &gt).unwrap();
        assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [1, 0, 1, 2]);
        let (iou, m) = cm.miou().unwrap();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(2.0 / 3.0));
        assert_eq!(iou[2], None);
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_errors() {
        let gt = mask(2, 3, &[0, 1, 2, 3, 3, 2]);
        let cm = ConfusionMatrix::from_pair(&gt, &gt).unwrap();
        assert_eq!(cm.miou().unwrap().1, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(cm.get(i, j), 0);
                }
            }
        }
        assert!(ConfusionMatrix::from_pair(&mask(1, 6, &[0; 6]), &gt).is_err());
        assert!(ConfusionMatrix::default().miou().is_err());
        let mut small = ConfusionMatrix::new(2);
        assert!(small.accumulate(&gt, &gt).is_err());
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SegMask {
        mask(h, w, &(0..h * w).map(|_| rng.gen_range(0..4)).collect::<Vec<u8>>())
    }

    #[test]
    fn matches_set_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (a, b) = (random_mask(&mut rng, 16, 16), random_mask(&mut rng, 16, 16));
            let (iou, m) = ConfusionMatrix::from_pair(&a, &b).unwrap().miou().unwrap();
            let mut direct = Vec::new();
            for c in 0..4u8 {
                let inter = a.classes().iter().zip(b.classes()).filter(|(&x, &y)| x == c && y == c).count();
                let union = a.classes().iter().zip(b.classes()).filter(|(&x, &y)| x == c || y == c).count();
                if union > 0 {
                    let v = inter as f64 / union as f64;
                    assert!((iou[c as usize].unwrap() - v).abs() < 1e-12);
                    direct.push(v);
                }
            }
            assert!((m - direct.iter().sum::<f64>() / direct.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn proportions() {
        let m = mask(2, 2, &[3; 4]);
        assert_eq!(class_proportions(&[&m]).unwrap().shares, [0.0, 0.0, 0.0, 1.0]);
        let mut v = vec![0u8; 85];
        v.extend([1; 27]);
        v.extend([2; 9]);
        v.extend([3; 137]);
        let big = mask(1, 258, &v);
        let s = class_proportions(&[&big]).unwrap();
        for (got, c) in s.shares.iter().zip([85.0, 27.0, 9.0, 137.0]) {
            assert!((got - c / 258.0).abs() < 1e-15);
        }
        assert_eq!(s.relative_to_stem.unwrap(), [85.0 / 9.0, 3.0, 1.0, 137.0 / 9.0]);
        assert!((s.shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(class_proportions(&[]).is_err());
    }

    fn run(label: &str, miou: f64) -> RunSummary {
        RunSummary {
            label: label.into(),
            config: format!("cfg-{label}"),
            per_class_iou: vec![Some(0.9), Some(0.8), None, Some(miou)],
            miou,
        }
    }

    #[test]
    fn report_layout() {
        let runs = vec![run("baseline", 0.7), run("sapa", 0.72), run("distill", 0.75), run("ttscale", 0.76)];
        let r = ablation_report("ablation", &runs).unwrap();
        let rows: Vec<&str> = r.text.lines().skip(2).map(|l| l.split_whitespace().next().unwrap()).collect();
        assert_eq!(rows, ["baseline", "sapa", "distill", "ttscale"]);
        assert_eq!(r.jsonl.lines().count(), 4);
        assert!(r.text.contains("+0.0200"));
        assert!(r.text.contains("absent"));
        assert_eq!(r, ablation_report("ablation", &runs).unwrap());
        assert_eq!(ablation_report("x", &runs[..1]).unwrap().jsonl.lines().count(), 1);
        assert!(ablation_report("x", &[run("a", 0.1), run("a", 0.2)]).is_err());
        assert!(ablation_report("x", &[]).is_err());
    }

    proptest! {
        #[test]
        fn accumulation_is_order_independent(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(SegMask, SegMask)> = (0..5).map(|_| (random_mask(&mut rng, 4, 5), random_mask(&mut rng, 4, 5))).collect();
            let mut fwd = ConfusionMatrix::default();
            for (p, g) in &pairs {
                fwd.accumulate(p, g).unwrap();
            }
            let mut rev = ConfusionMatrix::default();
            for (p, g) in pairs.iter().rev() {
                rev.merge(&ConfusionMatrix::from_pair(p, g).unwrap()).unwrap();
            }
            prop_assert_eq!(&fwd, &rev);
            let (iou, _) = fwd.miou().unwrap();
            prop_assert!(iou.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
            let self_m = ConfusionMatrix::from_pair(&pairs[0].0, &pairs[0].0).unwrap().miou().unwrap().1;
            prop_assert_eq!(self_m, 1.0);
        }
    }
}
