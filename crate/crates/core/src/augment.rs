//! Two-view stochastic augmentation.
//!
//! The default policy is the usual SimSiam recipe: random resized crop with
//! scale `[0.2, 1]`, horizontal flip (p = 0.5), colour jitter
//! (0.4, 0.4, 0.4, 0.1) with p = 0.8, grayscale (p = 0.2) and Gaussian blur
//! (p = 0.5). Blur sigmas are given for a 224-pixel reference and scaled to
//! the output resolution. Every view stays inside `[0, 1]`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the source, `[lo, hi]`.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio range (width / height).
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Brightness, contrast, saturation, hue.
    pub jitter_strength: [f64; 4],
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    /// Blur sigma range in pixels at a 224-pixel reference.
    pub blur_sigma: [f64; 2],
    /// Square output size.
    pub resolution: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_strength: [0.4, 0.4, 0.4, 0.1],
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            resolution: 64,
        }
    }
}

impl AugmentPolicy {
    /// The default recipe at another output size.
    pub fn default_at(resolution: usize) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    /// No-op transforms: every view is the resized source.
    pub fn identity(resolution: usize) -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            jitter_strength: [0.0; 4],
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: [0.1, 2.0],
            resolution,
        }
    }

    /// Random resized crop and flip only, as used when training probes.
    pub fn crop_and_flip(resolution: usize) -> Self {
        Self {
            crop_scale: [0.08, 1.0],
            flip_prob: 0.5,
            ..Self::identity(resolution)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::validation(format!(
                "crop_scale must be a sub-range of (0, 1], got [{lo}, {hi}]"
            )));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::validation("crop_ratio must be a positive, ordered range"));
        }
        if self.jitter_strength.iter().any(|&s| !(s >= 0.0)) || self.jitter_strength[3] > 0.5 {
            return Err(Error::validation("jitter strengths must be >= 0 and hue <= 0.5"));
        }
        if !(self.blur_sigma[0] > 0.0 && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(Error::validation("blur_sigma must be a positive, ordered range"));
        }
        if self.resolution < 32 {
            return Err(Error::validation(format!(
                "resolution must be at least 32, got {}",
                self.resolution
            )));
        }
        Ok(())
    }
}

/// Which random transforms fired for one view.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AppliedOps {
    /// `(top, left, height, width)` of the crop window in source pixels.
    pub crop: (f64, f64, f64, f64),
    pub flipped: bool,
    pub jittered: bool,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

fn random_crop_window<R: Rng>(h: usize, w: usize, p: &AugmentPolicy, rng: &mut R) -> (f64, f64, f64, f64) {
    let (hf, wf) = (h as f64, w as f64);
    let area = hf * wf;
    let (log_lo, log_hi) = (p.crop_ratio[0].ln(), p.crop_ratio[1].ln());
    for _ in 0..10 {
        let target = area * sample_range(rng, p.crop_scale[0], p.crop_scale[1]);
        let ratio = sample_range(rng, log_lo, log_hi).exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw > 0.0 && ch > 0.0 && cw <= wf && ch <= hf {
            let top = rng.gen_range(0..=(h - ch as usize)) as f64;
            let left = rng.gen_range(0..=(w - cw as usize)) as f64;
            return (top, left, ch, cw);
        }
    }
    // fall back to a central crop at the clamped aspect ratio
    let in_ratio = wf / hf;
    let (ch, cw) = if in_ratio < p.crop_ratio[0] {
        let cw = wf;
        (cw / p.crop_ratio[0], cw)
    } else if in_ratio > p.crop_ratio[1] {
        let ch = hf;
        (ch, ch * p.crop_ratio[1])
    } else {
        (hf, wf)
    };
    let ch = ch.round().min(hf);
    let cw = cw.round().min(wf);
    (((hf - ch) / 2.0).floor(), ((wf - cw) / 2.0).floor(), ch, cw)
}

fn sample_range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn grayscale_in_place(img: &mut Image) {
    let s = img.height * img.width;
    for i in 0..s {
        let l = luminance(img.data[i], img.data[s + i], img.data[2 * s + i]);
        img.data[i] = l;
        img.data[s + i] = l;
        img.data[2 * s + i] = l;
    }
}

fn blend_in_place(img: &mut Image, other: &[f32], factor: f32) {
    for (v, &o) in img.data.iter_mut().zip(other) {
        *v = (factor * *v + (1.0 - factor) * o).clamp(0.0, 1.0);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn color_jitter<R: Rng>(img: &mut Image, strength: [f64; 4], rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let s = img.height * img.width;
    for op in order {
        let k = strength[op];
        if k == 0.0 {
            continue;
        }
        match op {
            0 => {
                let f = sample_range(rng, (1.0 - k).max(0.0), 1.0 + k) as f32;
                let black = vec![0f32; img.data.len()];
                blend_in_place(img, &black, f);
            }
            1 => {
                let f = sample_range(rng, (1.0 - k).max(0.0), 1.0 + k) as f32;
                let mean = (0..s)
                    .map(|i| luminance(img.data[i], img.data[s + i], img.data[2 * s + i]))
                    .sum::<f32>()
                    / s as f32;
                let flat = vec![mean; img.data.len()];
                blend_in_place(img, &flat, f);
            }
            2 => {
                let f = sample_range(rng, (1.0 - k).max(0.0), 1.0 + k) as f32;
                let mut gray = img.clone();
                grayscale_in_place(&mut gray);
                blend_in_place(img, &gray.data, f);
            }
            _ => {
                let shift = sample_range(rng, -k, k) as f32;
                for i in 0..s {
                    let (h, sat, v) = rgb_to_hsv(img.data[i], img.data[s + i], img.data[2 * s + i]);
                    let (r, g, b) = hsv_to_rgb(h + shift, sat, v);
                    img.data[i] = r.clamp(0.0, 1.0);
                    img.data[s + i] = g.clamp(0.0, 1.0);
                    img.data[2 * s + i] = b.clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Separable Gaussian blur with clamped edges.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = ((3.0 * sigma).ceil() as usize).max(1);
    let mut kernel: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp() as f32
        })
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (h, w) = (img.height, img.width);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..3 {
        let src = img.plane(c);
        let dst = tmp.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (i, &k) in kernel.iter().enumerate() {
                    let xx = (x as isize + i as isize - radius as isize).clamp(0, w as isize - 1) as usize;
                    acc += k * src[y * w + xx];
                }
                dst[y * w + x] = acc;
            }
        }
        let src = tmp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for (i, &k) in kernel.iter().enumerate() {
                    let yy = (y as isize + i as isize - radius as isize).clamp(0, h as isize - 1) as usize;
                    acc += k * src[yy * w + x];
                }
                dst[y * w + x] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn flip_in_place(img: &mut Image) {
    let w = img.width;
    for row in img.data.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Draws one augmented view.
pub fn augment<R: Rng>(x: &Image, p: &AugmentPolicy, rng: &mut R) -> (Image, AppliedOps) {
    let crop = random_crop_window(x.height, x.width, p, rng);
    let mut v = x.resample(crop.0, crop.1, crop.2, crop.3, p.resolution, p.resolution);
    let mut ops = AppliedOps {
        crop,
        ..Default::default()
    };
    if rng.gen::<f64>() < p.flip_prob {
        flip_in_place(&mut v);
        ops.flipped = true;
    }
    if rng.gen::<f64>() < p.jitter_prob {
        color_jitter(&mut v, p.jitter_strength, rng);
        ops.jittered = true;
    }
    if rng.gen::<f64>() < p.grayscale_prob {
        grayscale_in_place(&mut v);
        ops.grayscale = true;
    }
    if rng.gen::<f64>() < p.blur_prob {
        let sigma = sample_range(rng, p.blur_sigma[0], p.blur_sigma[1]) * p.resolution as f64 / 224.0;
        v = gaussian_blur(&v, sigma);
        ops.blur_sigma = Some(sigma);
    }
    v.data.iter_mut().for_each(|px| *px = px.clamp(0.0, 1.0));
    (v, ops)
}

/// Two independently augmented views of `x`, deterministic in `seed`.
pub fn sample_view_pair(x: &Image, policy: &AugmentPolicy, seed: u64) -> Result<(Image, Image)> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (v1, _) = augment(x, policy, &mut rng);
    let (v2, _) = augment(x, policy, &mut rng);
    Ok((v1, v2))
}

pub fn sample_view_pair_from_path(path: &Path, policy: &AugmentPolicy, seed: u64) -> Result<(Image, Image)> {
    let x = Image::load(path)?;
    sample_view_pair(&x, policy, seed)
}

/// Central crop of `crop_frac` of the shorter side, resized to `resolution`.
pub fn center_view(x: &Image, resolution: usize, crop_frac: f64) -> Image {
    let side = (x.height.min(x.width) as f64 * crop_frac).round().max(1.0);
    let top = ((x.height as f64 - side) / 2.0).floor();
    let left = ((x.width as f64 - side) / 2.0).floor();
    x.resample(top, left, side, side, resolution, resolution)
}
