use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SceneSpec, SegMask, BACKGROUND, HEAD, LEAF, STEM};
use crate::tensor::Tensor;

type Rgb = [f32; 3];

struct Palette {
    soil: Rgb,
    leaf: Rgb,
    stem: Rgb,
    head: Rgb,
}

impl Palette {
    /// Fixed per-domain colour shift; depends only on the domain id.
    fn for_domain(domain: u32) -> Palette {
        let mut rng = ChaCha8Rng::seed_from_u64(0xD0_3A1F_0000 + domain as u64);
        let brightness = rng.gen_range(0.8f32..1.15);
        let mut tint = |base: Rgb| -> Rgb {
            let mut out = base;
            for ch in out.iter_mut() {
                *ch *= brightness * rng.gen_range(0.88f32..1.12);
            }
            out
        };
        Palette {
            soil: tint([0.42, 0.31, 0.21]),
            leaf: tint([0.20, 0.47, 0.15]),
            stem: tint([0.64, 0.68, 0.30]),
            head: tint([0.80, 0.66, 0.33]),
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<Rgb>,
    mask: Vec<u8>,
}

impl Canvas {
    /// Calls `paint(y, x, dist)` for every pixel whose centre lies within
    /// `radius` of `(cy, cx)`.
    fn stamp_disc(&mut self, cy: f32, cx: f32, radius: f32, mut paint: impl FnMut(&mut Rgb, &mut u8, f32)) {
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as isize).min(self.h as isize - 1);
        let x1 = ((cx + radius).ceil() as isize).min(self.w as isize - 1);
        if y1 < 0 || x1 < 0 {
            return;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let d = (dy * dy + dx * dx).sqrt();
                if d <= radius {
                    let i = y * self.w + x;
                    paint(&mut self.rgb[i], &mut self.mask[i], d);
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Bezier {
    p0: (f32, f32),
    p1: (f32, f32),
    p2: (f32, f32),
}

impl Bezier {
    fn at(&self, t: f32) -> (f32, f32) {
        let u = 1.0 - t;
        (
            u * u * self.p0.0 + 2.0 * u * t * self.p1.0 + t * t * self.p2.0,
            u * u * self.p0.1 + 2.0 * u * t * self.p1.1 + t * t * self.p2.1,
        )
    }

    fn tangent(&self, t: f32) -> (f32, f32) {
        let u = 1.0 - t;
        let d = (
            2.0 * u * (self.p1.0 - self.p0.0) + 2.0 * t * (self.p2.0 - self.p1.0),
            2.0 * u * (self.p1.1 - self.p0.1) + 2.0 * t * (self.p2.1 - self.p1.1),
        );
        let n = (d.0 * d.0 + d.1 * d.1).sqrt().max(1e-6);
        (d.0 / n, d.1 / n)
    }

    fn approx_len(&self) -> f32 {
        let mut len = 0.0;
        let mut prev = self.p0;
        for i in 1..=16 {
            let p = self.at(i as f32 / 16.0);
            len += ((p.0 - prev.0).powi(2) + (p.1 - prev.1).powi(2)).sqrt();
            prev = p;
        }
        len
    }
}

/// Coarse random lattice, bilinearly interpolated; values in [0, 1].
struct ValueNoise {
    cells: usize,
    grid: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 1;
        ValueNoise {
            cells,
            grid: (0..n * n).map(|_| rng.gen::<f32>()).collect(),
        }
    }

    fn sample(&self, u: f32, v: f32) -> f32 {
        let n = self.cells + 1;
        let fu = (u * self.cells as f32).clamp(0.0, self.cells as f32 - 1e-4);
        let fv = (v * self.cells as f32).clamp(0.0, self.cells as f32 - 1e-4);
        let (iu, iv) = (fu as usize, fv as usize);
        let (tu, tv) = (fu - iu as f32, fv - iv as f32);
        let g = |a: usize, b: usize| self.grid[b * n + a];
        let top = g(iu, iv) * (1.0 - tu) + g(iu + 1, iv) * tu;
        let bot = g(iu, iv + 1) * (1.0 - tu) + g(iu + 1, iv + 1) * tu;
        top * (1.0 - tv) + bot * tv
    }
}

fn scaled(c: Rgb, s: f32) -> Rgb {
    [c[0] * s, c[1] * s, c[2] * s]
}

fn count(rng: &mut ChaCha8Rng, r: &std::ops::RangeInclusive<u32>) -> u32 {
    rng.gen_range(*r.start()..=*r.end())
}

pub(super) fn render_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Tensor, SegMask) {
    let (h, w) = spec.image_size;
    let scale = h.min(w) as f32 / 96.0;
    let palette = Palette::for_domain(spec.domain_id);
    let mut canvas = Canvas {
        h,
        w,
        rgb: vec![[0.0; 3]; h * w],
        mask: vec![BACKGROUND; h * w],
    };

    let soil_noise = ValueNoise::new(rng, 6);
    for y in 0..h {
        for x in 0..w {
            let n = soil_noise.sample(x as f32 / w as f32, y as f32 / h as f32);
            let grain = rng.gen_range(-0.05f32..0.05);
            canvas.rgb[y * w + x] = scaled(palette.soil, 0.7 + 0.5 * n + grain);
        }
    }

    let n_leaves = count(rng, &spec.leaves_per_image);
    for _ in 0..n_leaves {
        let base = (rng.gen_range(0.0..w as f32), rng.gen_range(0.35 * h as f32..1.1 * h as f32));
        let angle = rng.gen_range(-1.3f32..1.3);
        let length = rng.gen_range(0.45f32..0.95) * h as f32;
        let dir = (angle.sin(), -angle.cos());
        let tip = (base.0 + dir.0 * length, base.1 + dir.1 * length);
        let bend = rng.gen_range(-0.35f32..0.35) * length;
        let mid = ((base.0 + tip.0) * 0.5 - dir.1 * bend, (base.1 + tip.1) * 0.5 + dir.0 * bend);
        let curve = Bezier { p0: base, p1: mid, p2: tip };
        let max_width = rng.gen_range(12.0f32..20.0) * scale;
        let shade = rng.gen_range(0.85f32..1.1);
        let steps = (curve.approx_len() * 2.0).ceil() as usize + 1;
        for i in 0..=steps {
            let t = i as f32 / steps as f32;
            let width = max_width * (PI * (0.12 + 0.88 * t)).sin().max(0.0).powf(0.7);
            if width < 0.8 {
                continue;
            }
            let (cx, cy) = curve.at(t);
            let r = width * 0.5;
            let jitter = rng.gen_range(-0.03f32..0.03);
            canvas.stamp_disc(cy, cx, r, |rgb, m, d| {
                let midrib = 1.0 + 0.15 * (1.0 - d / r);
                *rgb = scaled(palette.leaf, shade * midrib + jitter);
                *m = LEAF;
            });
        }
    }

    let n_stems = count(rng, &spec.stems_per_image);
    let mut tops = Vec::with_capacity(n_stems as usize);
    for _ in 0..n_stems {
        let base = (rng.gen_range(0.05 * w as f32..0.95 * w as f32), h as f32 + 2.0);
        let top = (
            (base.0 + rng.gen_range(-0.25f32..0.25) * w as f32).clamp(0.0, w as f32),
            rng.gen_range(0.2f32..0.55) * h as f32,
        );
        let bend = rng.gen_range(-0.12f32..0.12) * h as f32;
        let mid = ((base.0 + top.0) * 0.5 + bend, (base.1 + top.1) * 0.5);
        let curve = Bezier { p0: base, p1: mid, p2: top };
        let width = rng.gen_range(*spec.stem_width_px.start()..=*spec.stem_width_px.end());
        let shade = rng.gen_range(0.9f32..1.1);
        let steps = (curve.approx_len() * 4.0).ceil() as usize + 1;
        for i in 0..=steps {
            let (cx, cy) = curve.at(i as f32 / steps as f32);
            let jitter = rng.gen_range(-0.03f32..0.03);
            canvas.stamp_disc(cy, cx, width * 0.5, |rgb, m, _| {
                *rgb = scaled(palette.stem, shade + jitter);
                *m = STEM;
            });
        }
        tops.push((curve.at(1.0), curve.tangent(1.0)));
    }

    let n_heads = count(rng, &spec.heads_per_image).min(n_stems);
    for &((tx, ty), (dx, dy)) in tops.iter().take(n_heads as usize) {
        let a = rng.gen_range(12.0f32..17.0) * scale;
        let b = rng.gen_range(4.5f32..6.5) * scale;
        let (cx, cy) = (tx + dx * a * 0.9, ty + dy * a * 0.9);
        let freq = rng.gen_range(1.6f32..2.4);
        let shade = rng.gen_range(0.9f32..1.1);
        let reach = a.max(b) + 1.0;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(h.saturating_sub(1));
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(w.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let py = y as f32 + 0.5 - cy;
                let px = x as f32 + 0.5 - cx;
                let u = px * dx + py * dy;
                let v = -px * dy + py * dx;
                let e = (u / a).powi(2) + (v / b).powi(2);
                if e <= 1.0 {
                    let spikelet = 0.5 + 0.5 * (u * freq).sin();
                    let rim = 1.0 - 0.25 * e;
                    let grain = rng.gen_range(-0.04f32..0.04);
                    let i = y * w + x;
                    canvas.rgb[i] = scaled(palette.head, shade * rim * (0.8 + 0.3 * spikelet) + grain);
                    canvas.mask[i] = HEAD;
                }
            }
        }
    }

    let gain = 1.0 + spec.illumination_jitter * rng.gen_range(-0.5f32..0.5);
    let slope = spec.illumination_jitter * rng.gen_range(-0.4f32..0.4);
    let theta = rng.gen_range(0.0f32..2.0 * PI);
    let (gx, gy) = (theta.cos(), theta.sin());
    let mut image = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let ramp = ((x as f32 / w as f32 - 0.5) * gx + (y as f32 / h as f32 - 0.5) * gy) * slope;
            let light = gain * (1.0 + ramp);
            let rgb = canvas.rgb[y * w + x];
            for (c, v) in rgb.iter().enumerate() {
                image.set(0, c, y, x, (v * light).clamp(0.0, 1.0));
            }
        }
    }
    let mask = SegMask::new(h, w, canvas.mask).expect("renderer writes valid classes");
    (image, mask)
}
