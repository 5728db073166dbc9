//! Synthetic "stacked ingredients" images.
//!
//! Every image is a cluttered scene of small textured blobs scattered
//! uniformly over a smooth, noisy background. Each class owns one texture
//! (stripe orientation, checker or dots, at a class period); a majority of
//! the blobs in a scene carry it and the rest are distractors drawn from the
//! whole texture family. Blob colours, sizes, contrast and positions are
//! random, so the label lives in texture statistics, not colour, and
//! any reasonably sized crop still contains class-relevant blobs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_manifest, DatasetManifest};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seed::{mix, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Texture {
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Dots,
}

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    texture: Texture,
    period: f32,
}

/// Probability that a blob carries its scene's class texture.
const CLASS_BLOB_PROB: f64 = 0.6;
/// Distinct styles in the distractor family.
const STYLE_FAMILY: usize = 12;

fn class_style(class: usize) -> ClassStyle {
    let texture = match class % 4 {
        0 => Texture::HorizontalStripes,
        1 => Texture::VerticalStripes,
        2 => Texture::Checker,
        _ => Texture::Dots,
    };
    ClassStyle {
        texture,
        period: 3.0 + 2.0 * ((class / 4) % 3) as f32,
    }
}

fn pattern(t: Texture, period: f32, y: f32, x: f32) -> f32 {
    let band = |v: f32| ((v / period).floor() as i64).rem_euclid(2) as f32;
    match t {
        Texture::HorizontalStripes => band(y),
        Texture::VerticalStripes => band(x),
        Texture::Checker => (band(y) as i64 ^ band(x) as i64) as f32,
        Texture::Dots => {
            let cy = (y / period).fract() - 0.5;
            let cx = (x / period).fract() - 0.5;
            if cy * cy + cx * cx < 0.1 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn hue_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Blob {
    cy: f32,
    cx: f32,
    radius: f32,
    phase: (f32, f32),
    color: [f32; 3],
    contrast: f32,
}

impl Blob {
    fn shade(&self, style: &ClassStyle, y: f32, x: f32) -> Option<[f32; 3]> {
        let (dy, dx) = (y - self.cy, x - self.cx);
        if dy * dy + dx * dx > self.radius * self.radius {
            return None;
        }
        let p = pattern(style.texture, style.period, dy + self.phase.0, dx + self.phase.1);
        let k = 1.0 - self.contrast + self.contrast * p;
        Some(self.color.map(|c| (c * k).clamp(0.0, 1.0)))
    }
}

fn background<R: Rng>(res: usize, rng: &mut R) -> Image {
    let a = hue_to_rgb(rng.gen(), rng.gen_range(0.0..0.15), rng.gen_range(0.35..0.65));
    let b = hue_to_rgb(rng.gen(), rng.gen_range(0.0..0.15), rng.gen_range(0.35..0.65));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (sin, cos) = angle.sin_cos();
    let mut img = Image::filled(res, res, [0.0; 3]);
    let s = res * res;
    for y in 0..res {
        for x in 0..res {
            let u = ((x as f32 / res as f32 - 0.5) * cos + (y as f32 / res as f32 - 0.5) * sin + 0.5)
                .clamp(0.0, 1.0);
            let noise = rng.gen_range(-0.03..0.03);
            for c in 0..3 {
                img.data[c * s + y * res + x] = (a[c] * (1.0 - u) + b[c] * u + noise).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn paint(img: &mut Image, blob: &Blob, style: &ClassStyle) {
    let res = img.width;
    let s = img.height * img.width;
    let y0 = (blob.cy - blob.radius).floor().max(0.0) as usize;
    let y1 = ((blob.cy + blob.radius).ceil() as usize).min(img.height - 1);
    let x0 = (blob.cx - blob.radius).floor().max(0.0) as usize;
    let x1 = ((blob.cx + blob.radius).ceil() as usize).min(res - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if let Some(rgb) = blob.shade(style, y as f32 + 0.5, x as f32 + 0.5) {
                for c in 0..3 {
                    img.data[c * s + y * res + x] = rgb[c];
                }
            }
        }
    }
}

/// One scene of class `class`, deterministic in `seed`.
pub fn synthetic_image(class: usize, resolution: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = class_style(class);
    let mut img = background(resolution, &mut rng);
    let res = resolution as f32;
    let (r_lo, r_hi) = (res / 10.0, res / 6.0);
    let mean_area = std::f32::consts::PI * ((r_lo + r_hi) / 2.0).powi(2);
    let n_blobs = ((0.7 * res * res / mean_area).round() as usize).max(3);
    for _ in 0..n_blobs {
        let hue: f32 = rng.gen();
        let mut blob_style = if rng.gen_bool(CLASS_BLOB_PROB) {
            style
        } else {
            class_style(rng.gen_range(0..STYLE_FAMILY))
        };
        blob_style.period *= rng.gen_range(0.8..1.25);
        let blob = Blob {
            cy: rng.gen_range(0.0..res),
            cx: rng.gen_range(0.0..res),
            radius: rng.gen_range(r_lo..r_hi),
            phase: (rng.gen_range(0.0..blob_style.period), rng.gen_range(0.0..blob_style.period)),
            color: hue_to_rgb(hue, rng.gen_range(0.0..0.35), rng.gen_range(0.6..1.0)),
            contrast: rng.gen_range(0.3..0.7),
        };
        paint(&mut img, &blob, &blob_style);
    }
    for v in img.data.iter_mut() {
        *v = (*v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    img
}

/// A single high-contrast blob on a flat mid-grey background, with the
/// blob's pixel bounding box.
#[derive(Debug, Clone)]
pub struct BlobImage {
    pub image: Image,
    /// `(top, left, bottom, right)`, bottom/right exclusive.
    pub bbox: (usize, usize, usize, usize),
}

pub fn single_blob_image(class: usize, resolution: usize, seed: u64) -> BlobImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = class_style(class);
    let res = resolution as f32;
    let radius = res / 5.0;
    let blob = Blob {
        cy: rng.gen_range(radius..res - radius),
        cx: rng.gen_range(radius..res - radius),
        radius,
        phase: (0.0, 0.0),
        color: [1.0, 1.0, 1.0],
        contrast: 1.0,
    };
    let mut image = Image::filled(resolution, resolution, [0.5; 3]);
    paint(&mut image, &blob, &style);
    let (mut top, mut left, mut bottom, mut right) = (resolution, resolution, 0, 0);
    for y in 0..resolution {
        for x in 0..resolution {
            if blob.shade(&style, y as f32 + 0.5, x as f32 + 0.5).is_some() {
                top = top.min(y);
                left = left.min(x);
                bottom = bottom.max(y + 1);
                right = right.max(x + 1);
            }
        }
    }
    BlobImage {
        image,
        bbox: (top, left, bottom, right),
    }
}

/// Writes `n_classes x n_per_class` PNG scenes under `root/class_XX/` plus a
/// relocatable `root/manifest.json`, and returns the manifest.
pub fn generate_synthetic(
    root: &Path,
    n_classes: usize,
    n_per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_classes < 2 {
        return Err(Error::validation(format!("n_classes must be at least 2, got {n_classes}")));
    }
    if n_per_class == 0 || resolution < 8 {
        return Err(Error::validation("n_per_class must be positive and resolution at least 8"));
    }
    for class in 0..n_classes {
        let dir = root.join(format!("class_{class:02}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n_per_class {
            let img = synthetic_image(
                class,
                resolution,
                mix(&[seed, stream::SYNTH, class as u64, i as u64]),
            );
            img.save_png(&dir.join(format!("img_{i:04}.png")))?;
        }
    }
    let m = build_manifest(root)?;
    let mut portable = m.clone();
    portable.root = ".".into();
    portable.save(&root.join("manifest.json"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_synthetic(a.path(), 2, 3, 32, 11).unwrap();
        let mb = generate_synthetic(b.path(), 2, 3, 32, 11).unwrap();
        assert_eq!(ma.checksum, mb.checksum);
        for e in &ma.entries {
            let x = std::fs::read(ma.path_of(e)).unwrap();
            let y = std::fs::read(mb.path_of(e)).unwrap();
            assert_eq!(x, y, "{}", e.path);
        }
        assert_ne!(synthetic_image(0, 32, 1), synthetic_image(0, 32, 2));
    }

    #[test]
    fn counts_and_stratification() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(dir.path(), 4, 20, 32, 0).unwrap();
        assert_eq!(m.entries.len(), 80);
        assert_eq!(m.class_counts(Split::Test), vec![5; 4]);
        assert_eq!(m.class_counts(Split::Train), vec![15; 4]);
        let reloaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded.entries, m.entries);
        assert!(generate_synthetic(dir.path(), 1, 5, 32, 0).is_err());
    }

    #[test]
    fn scenes_are_cluttered_everywhere() {
        // every quadrant of a scene should contain textured content
        let img = synthetic_image(2, 64, 5);
        let s = 64 * 64;
        for (qy, qx) in [(0, 0), (0, 32), (32, 0), (32, 32)] {
            let mut vals = Vec::new();
            for y in qy..qy + 32 {
                for x in qx..qx + 32 {
                    vals.push(img.data[y * 64 + x] + img.data[s + y * 64 + x] + img.data[2 * s + y * 64 + x]);
                }
            }
            let mean = vals.iter().sum::<f32>() / vals.len() as f32;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert!(var > 0.01, "quadrant ({qy},{qx}) is flat: {var}");
        }
    }

    #[test]
    fn single_blob_bbox_contains_all_non_background_pixels() {
        let b = single_blob_image(0, 32, 4);
        let (t, l, bo, r) = b.bbox;
        assert!(t < bo && l < r);
        for y in 0..32 {
            for x in 0..32 {
                if b.image.at(0, y, x) != 0.5 {
                    assert!(y >= t && y < bo && x >= l && x < r);
                }
            }
        }
    }
}
