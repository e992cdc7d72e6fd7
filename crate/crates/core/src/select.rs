//! Stem-aware selection of unlabeled samples by pseudo-mask stem share.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::pseudo_label;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::synthdata::{Manifest, Sample, SegMask, STEM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSample {
    pub sample_id: String,
    pub domain_id: u32,
    pub stem_ratio: f64,
}

/// Fraction of stem pixels in `mask`.
pub fn stem_proportion(mask: &SegMask) -> Result<f64> {
    let total = mask.h() * mask.w();
    if total == 0 {
        return Err(Error::invalid("stem_proportion of an empty mask"));
    }
    let stems = mask.classes().iter().filter(|&&c| c == STEM).count();
    Ok(stems as f64 / total as f64)
}

/// Pseudo-labels every pool sample with `teacher` and records its stem share.
pub fn rank_pool(teacher: &dyn Segmenter, pool: &[Sample]) -> Result<Vec<RankedSample>> {
    pool.par_iter()
        .map(|s| {
            let mask = pseudo_label(teacher, &s.image)?;
            Ok(RankedSample {
                sample_id: s.sample_id.clone(),
                domain_id: s.domain_id,
                stem_ratio: stem_proportion(&mask)?,
            })
        })
        .collect()
}

/// Ratio descending, then sample id ascending.
fn rank_order(a: &RankedSample, b: &RankedSample) -> Ordering {
    b.stem_ratio
        .total_cmp(&a.stem_ratio)
        .then_with(|| a.sample_id.cmp(&b.sample_id))
}

/// Top `n` per domain; output ordered by domain, then rank.
pub fn select_top_per_domain(pool: &[RankedSample], n: usize) -> Result<Vec<RankedSample>> {
    if n == 0 {
        return Err(Error::invalid("n_per_domain must be positive"));
    }
    if let Some(bad) = pool.iter().find(|s| !(0.0..=1.0).contains(&s.stem_ratio)) {
        return Err(Error::invalid(format!("stem ratio {} of {} outside [0, 1]", bad.stem_ratio, bad.sample_id)));
    }
    let mut by_domain: BTreeMap<u32, Vec<&RankedSample>> = BTreeMap::new();
    for s in pool {
        by_domain.entry(s.domain_id).or_default().push(s);
    }
    let mut out = Vec::new();
    for (_, mut group) in by_domain {
        group.sort_by(|a, b| rank_order(a, b));
        out.extend(group.into_iter().take(n).cloned());
    }
    Ok(out)
}

/// Entries of `source` for the selected ids, in selection order.
pub fn selection_manifest(source: &Manifest, selected: &[RankedSample]) -> Result<Manifest> {
    let index: BTreeMap<&str, usize> = source
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (e.sample_id.as_str(), i))
        .collect();
    let entries = selected
        .iter()
        .map(|s| {
            index
                .get(s.sample_id.as_str())
                .map(|&i| source.entries[i].clone())
                .ok_or_else(|| Error::invalid(format!("selected sample {} not in manifest", s.sample_id)))
        })
        .collect::<Result<_>>()?;
    Ok(Manifest { entries })
}
