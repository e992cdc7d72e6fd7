use rand::Rng;

use crate::synthdata::SegMask;
use crate::tensor::Tensor;

/// Photometric change `x ↦ clamp((x − mean)·contrast + mean + brightness)`,
/// with the mean taken over the whole image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
}

/// Erased rectangle, filled with the image mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Erase {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

/// A recorded view of an image. Only `flip` moves pixels; labels follow it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub flip: bool,
    pub jitter: Option<ColorJitter>,
    pub erase: Option<Erase>,
}

impl View {
    pub const IDENTITY: View = View {
        flip: false,
        jitter: None,
        erase: None,
    };

    /// Horizontal flip only.
    pub fn weak<R: Rng>(rng: &mut R) -> View {
        View {
            flip: rng.gen_bool(0.5),
            ..View::IDENTITY
        }
    }

    /// Flip plus colour jitter, used for supervised batches.
    pub fn photometric<R: Rng>(rng: &mut R) -> View {
        View {
            flip: rng.gen_bool(0.5),
            jitter: Some(ColorJitter {
                brightness: rng.gen_range(-0.12..0.12),
                contrast: rng.gen_range(0.8..1.25),
            }),
            erase: None,
        }
    }

    /// Flip, colour jitter and a random erased rectangle.
    pub fn strong<R: Rng>(rng: &mut R, h: usize, w: usize) -> View {
        let mut v = View::photometric(rng);
        let eh = rng.gen_range(h / 8..=h / 3).max(1);
        let ew = rng.gen_range(w / 8..=w / 3).max(1);
        v.erase = Some(Erase {
            top: rng.gen_range(0..=h - eh),
            left: rng.gen_range(0..=w - ew),
            h: eh,
            w: ew,
        });
        v
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let mut x = if self.flip { image.flip_horizontal() } else { image.clone() };
        let mean = x.sum() / x.len().max(1) as f32;
        if let Some(j) = self.jitter {
            for v in x.data_mut() {
                *v = ((*v - mean) * j.contrast + mean + j.brightness).clamp(0.0, 1.0);
            }
        }
        if let Some(e) = self.erase {
            let [_, c, h, w] = x.shape();
            for ch in 0..c {
                for y in e.top..(e.top + e.h).min(h) {
                    for xx in e.left..(e.left + e.w).min(w) {
                        x.set(0, ch, y, xx, mean);
                    }
                }
            }
        }
        x
    }

    pub fn apply_mask(&self, mask: &SegMask) -> SegMask {
        if self.flip {
            mask.flip_horizontal()
        } else {
            mask.clone()
        }
    }
}

/// Weak view for the teacher, strong view for the student.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationPair {
    pub weak: View,
    pub strong: View,
}

impl AugmentationPair {
    pub fn sample<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        AugmentationPair {
            weak: View::weak(rng),
            strong: View::strong(rng, h, w),
        }
    }

    /// Maps a label computed on the weak view into the strong view.
    pub fn align(&self, weak_label: &SegMask) -> SegMask {
        if self.weak.flip != self.strong.flip {
            weak_label.flip_horizontal()
        } else {
            weak_label.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alignment_follows_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = Tensor::from_fn([1, 3, 4, 6], |_, c, y, x| (c * 24 + y * 6 + x) as f32 / 72.0);
        let mask = SegMask::new(4, 6, (0..24).map(|i| (i % 4) as u8).collect()).unwrap();
        for _ in 0..20 {
            let pair = AugmentationPair::sample(&mut rng, 4, 6);
            let weak_label = pair.weak.apply_mask(&mask);
            assert_eq!(pair.align(&weak_label), pair.strong.apply_mask(&mask));
            let s = pair.strong.apply(&image);
            assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let w = pair.weak.apply(&image);
            assert_eq!(w, if pair.weak.flip { image.flip_horizontal() } else { image.clone() });
        }
    }
}
