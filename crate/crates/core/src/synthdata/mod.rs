//! Procedural wheat-like scenes with exact ground truth.
//!
//! Classes: 0 background, 1 head, 2 stem, 3 leaf. Paint order is
//! background, leaf, stem, head, so heads occlude the stems they sit on.

mod io;
mod render;

use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{
    load_image, load_manifest, load_mask, load_sample, save_image, save_manifest, save_mask,
    save_sample, Manifest, ManifestEntry,
};

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: u8 = 0;
pub const HEAD: u8 = 1;
pub const STEM: u8 = 2;
pub const LEAF: u8 = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "head", "stem", "leaf"];

/// Held-out domain, never used for training manifests.
pub const TEST_DOMAIN: u32 = 0;
pub const NUM_DOMAINS: u32 = 10;

/// H×W map of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    classes: Vec<u8>,
}

impl SegMask {
    pub fn new(h: usize, w: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != h * w {
            return Err(Error::shape(format!(
                "mask of {h}x{w} with {} entries",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("mask class index {bad} >= {NUM_CLASSES}")));
        }
        Ok(SegMask { h, w, classes })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Result<Self> {
        Self::new(h, w, vec![class; h * w])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.w + x]
    }

    pub fn flip_horizontal(&self) -> SegMask {
        let mut classes = self.classes.clone();
        for row in classes.chunks_mut(self.w.max(1)) {
            row.reverse();
        }
        SegMask { classes, ..*self }
    }

    pub fn counts(&self) -> [u64; NUM_CLASSES] {
        let mut out = [0u64; NUM_CLASSES];
        for &c in &self.classes {
            out[c as usize] += 1;
        }
        out
    }
}

/// One binary ground-truth layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryLayer {
    pub class: u8,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<bool>,
}

/// Decomposes a mask into one disjoint binary layer per present class, in
/// ascending class order.
pub fn mask_to_binary_layers(mask: &SegMask) -> Vec<BinaryLayer> {
    let counts = mask.counts();
    (0..NUM_CLASSES as u8)
        .filter(|&c| counts[c as usize] > 0)
        .map(|c| BinaryLayer {
            class: c,
            h: mask.h,
            w: mask.w,
            pixels: mask.classes.iter().map(|&v| v == c).collect(),
        })
        .collect()
}

/// Inverse of [`mask_to_binary_layers`].
pub fn binary_layers_to_mask(layers: &[BinaryLayer]) -> Result<SegMask> {
    let first = layers
        .first()
        .ok_or_else(|| Error::invalid("no layers to recompose"))?;
    let (h, w) = (first.h, first.w);
    let mut classes = vec![u8::MAX; h * w];
    for layer in layers {
        if layer.h != h || layer.w != w {
            return Err(Error::shape("layers of different sizes"));
        }
        for (dst, &on) in classes.iter_mut().zip(&layer.pixels) {
            if on {
                if *dst != u8::MAX {
                    return Err(Error::invalid("overlapping layers"));
                }
                *dst = layer.class;
            }
        }
    }
    if classes.contains(&u8::MAX) {
        return Err(Error::invalid("layers do not cover the image"));
    }
    SegMask::new(h, w, classes)
}

/// One image, optionally labeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub mask: Option<SegMask>,
    pub domain_id: u32,
    pub sample_id: String,
}

impl Sample {
    pub fn without_mask(mut self) -> Sample {
        self.mask = None;
        self
    }
}

/// Scene generator parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: (usize, usize),
    pub stems_per_image: RangeInclusive<u32>,
    pub stem_width_px: RangeInclusive<f32>,
    pub leaves_per_image: RangeInclusive<u32>,
    pub heads_per_image: RangeInclusive<u32>,
    pub illumination_jitter: f32,
    pub domain_id: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: (96, 96),
            stems_per_image: 2..=4,
            stem_width_px: 1.5..=3.0,
            leaves_per_image: 8..=13,
            heads_per_image: 2..=4,
            illumination_jitter: 0.3,
            domain_id: 1,
            seed: 0x5eed_0001,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::invalid(format!("degenerate image size {h}x{w}")));
        }
        if self.stems_per_image.is_empty()
            || self.leaves_per_image.is_empty()
            || self.heads_per_image.is_empty()
            || self.stem_width_px.is_empty()
        {
            return Err(Error::invalid("empty count range in scene spec"));
        }
        if *self.stem_width_px.start() < 1.0 {
            return Err(Error::invalid("stem width must be at least 1 px"));
        }
        if !(0.0..=1.0).contains(&self.illumination_jitter) {
            return Err(Error::invalid("illumination_jitter outside [0, 1]"));
        }
        if self.domain_id >= NUM_DOMAINS {
            return Err(Error::invalid(format!("domain id {} >= {NUM_DOMAINS}", self.domain_id)));
        }
        Ok(())
    }
}

/// Generates `n` labeled samples. Sample `i` draws from its own ChaCha8
/// stream (`seed`, stream `i`), so output is independent of how many
/// samples are requested before it.
pub fn generate(spec: &SceneSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("generate requires n >= 1"));
    }
    Ok((0..n).map(|i| generate_one(spec, i as u64)).collect())
}

/// The `index`-th sample of `spec`'s stream.
pub fn generate_one(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (spec.domain_id as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    rng.set_stream(index);
    let (image, mask) = render::render_scene(spec, &mut rng);
    Sample {
        image,
        mask: Some(mask),
        domain_id: spec.domain_id,
        sample_id: format!("d{}-{:08x}-{:05}", spec.domain_id, spec.seed as u32, index),
    }
}

/// Split sizes for [`build_corpus`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSizes {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            labeled: 64,
            unlabeled: 2000,
            val: 64,
            test: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Training/validation data from domains 1–9 (round-robin), test data from
/// the held-out domain 0. Unlabeled samples carry no mask.
pub fn build_corpus(base: &SceneSpec, sizes: &CorpusSizes) -> Result<Corpus> {
    base.validate()?;
    let split = |salt: u64, count: usize, domains: &[u32]| -> Vec<Sample> {
        (0..count)
            .map(|i| {
                let domain = domains[i % domains.len()];
                let spec = SceneSpec {
                    domain_id: domain,
                    seed: base.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    ..base.clone()
                };
                generate_one(&spec, (i / domains.len()) as u64)
            })
            .collect()
    };
    let train: Vec<u32> = (1..NUM_DOMAINS).collect();
    Ok(Corpus {
        labeled: split(1, sizes.labeled, &train),
        unlabeled: split(2, sizes.unlabeled, &train)
            .into_iter()
            .map(Sample::without_mask)
            .collect(),
        val: split(3, sizes.val, &train),
        test: split(4, sizes.test, &[TEST_DOMAIN]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SceneSpec::default();
        let a = generate(&spec, 3).unwrap();
        let b = generate(&spec, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate(&spec, 1).unwrap()[0], a[0]);
    }

    #[test]
    fn stem_is_the_rarest_class() {
        let mut totals = [0u64; NUM_CLASSES];
        for domain in 1..=4 {
            let spec = SceneSpec {
                domain_id: domain,
                ..SceneSpec::default()
            };
            for s in generate(&spec, 250).unwrap() {
                for (t, c) in totals.iter_mut().zip(s.mask.unwrap().counts()) {
                    *t += c;
                }
            }
        }
        let stem = totals[STEM as usize];
        for class in [BACKGROUND, HEAD, LEAF] {
            assert!(stem < totals[class as usize], "{totals:?}");
        }
    }

    #[test]
    fn no_stems_means_no_stem_pixels() {
        let spec = SceneSpec {
            stems_per_image: 0..=0,
            ..SceneSpec::default()
        };
        for s in generate(&spec, 20).unwrap() {
            assert_eq!(s.mask.unwrap().counts()[STEM as usize], 0);
        }
    }

    #[test]
    fn images_in_unit_range() {
        for s in generate(&SceneSpec::default(), 10).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), [1, 3, 96, 96]);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let tiny = SceneSpec {
            image_size: (2, 2),
            ..SceneSpec::default()
        };
        assert!(generate(&tiny, 1).is_err());
        assert!(generate(&SceneSpec::default(), 0).is_err());
        let thin = SceneSpec {
            stem_width_px: 0.5..=1.0,
            ..SceneSpec::default()
        };
        assert!(thin.validate().is_err());
    }

    #[test]
    fn all_background_is_one_layer() {
        let m = SegMask::filled(3, 4, BACKGROUND).unwrap();
        let layers = mask_to_binary_layers(&m);
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].class, 0);
        assert!(layers[0].pixels.iter().all(|&p| p));
    }

    #[test]
    fn two_by_two_layers() {
        let m = SegMask::new(2, 2, vec![0, 2, 2, 3]).unwrap();
        let layers = mask_to_binary_layers(&m);
        let summary: Vec<(Vec<bool>, u8)> = layers.iter().map(|l| (l.pixels.clone(), l.class)).collect();
        assert_eq!(
            summary,
            vec![
                (vec![true, false, false, false], 0),
                (vec![false, true, true, false], 2),
                (vec![false, false, false, true], 3),
            ]
        );
        assert_eq!(binary_layers_to_mask(&layers).unwrap(), m);
    }

    #[test]
    fn generated_layers_roundtrip() {
        for s in generate(&SceneSpec::default(), 5).unwrap() {
            let m = s.mask.unwrap();
            assert_eq!(binary_layers_to_mask(&mask_to_binary_layers(&m)).unwrap(), m);
        }
    }

    #[test]
    fn corpus_domains() {
        let sizes = CorpusSizes {
            labeled: 18,
            unlabeled: 9,
            val: 9,
            test: 2,
        };
        let c = build_corpus(&SceneSpec::default(), &sizes).unwrap();
        assert!(c.labeled.iter().all(|s| s.domain_id != TEST_DOMAIN && s.mask.is_some()));
        assert!(c.unlabeled.iter().all(|s| s.mask.is_none()));
        assert!(c.test.iter().all(|s| s.domain_id == TEST_DOMAIN));
        let mut ids: Vec<&str> = c.labeled.iter().chain(&c.unlabeled).chain(&c.val).map(|s| s.sample_id.as_str()).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }
}
