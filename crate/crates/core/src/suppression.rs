//! Response-aware localisation and feature suppression.
//!
//! A feature map `F` (C x H x W) is summed over channels into a response map
//! `M`. The `round(eta * H * W)` highest-responding locations form a binary
//! mask, and the suppressed map keeps `F` only where the mask is 0. The
//! suppression ratio `eta` ramps up from `alpha * e^-5` to `alpha` over the
//! first `beta` epochs.
//!
//! Masks select an exact count (ties go to the lower row-major index), so the
//! threshold is whatever the smallest selected response turns out to be.
//! The mask carries no gradient: backward through [`suppress_features`] is a
//! multiplication by the same `1 - mask`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Real;

/// Per-sample activations, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::validation(format!(
                "feature map of shape {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        check_finite("feature map", &values)?;
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            values: vec![T::zero(); channels * height * width],
        }
    }

    pub fn at(&self, k: usize, i: usize, j: usize) -> T {
        self.values[(k * self.height + i) * self.width + j]
    }
}

/// Channel-summed responses, `H x W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> ResponseMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::validation(format!(
                "response map of shape {height}x{width} cannot hold {} values",
                values.len()
            )));
        }
        check_finite("response map", &values)?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.values[i * self.width + j]
    }
}

/// Binary `H x W` map; 1 marks a location to suppress.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuppressionMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
    pub count_suppressed: usize,
}

impl SuppressionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
            count_suppressed: 0,
        }
    }

    fn from_marked(height: usize, width: usize, marked: impl IntoIterator<Item = usize>) -> Self {
        let mut mask = Self::empty(height, width);
        for idx in marked {
            if mask.values[idx] == 0 {
                mask.values[idx] = 1;
                mask.count_suppressed += 1;
            }
        }
        mask
    }

    pub fn is_marked(&self, i: usize, j: usize) -> bool {
        self.values[i * self.width + j] == 1
    }

    /// `1 - mask`.
    pub fn complement(&self) -> Self {
        let values: Vec<u8> = self.values.iter().map(|&v| 1 - v).collect();
        Self {
            height: self.height,
            width: self.width,
            count_suppressed: self.values.len() - self.count_suppressed,
            values,
        }
    }

    /// Nearest-neighbour upsampling to an `out_h x out_w` pixel grid.
    pub fn upsample_nearest(&self, out_h: usize, out_w: usize) -> Vec<u8> {
        let mut out = vec![0u8; out_h * out_w];
        for y in 0..out_h {
            let sy = (y * self.height / out_h).min(self.height - 1);
            for x in 0..out_w {
                let sx = (x * self.width / out_w).min(self.width - 1);
                out[y * out_w + x] = self.values[sy * self.width + sx];
            }
        }
        out
    }
}

/// Ramp-up parameters for the suppression ratio.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RampSchedule {
    /// Final suppression ratio, in `(0, 1]`.
    pub alpha: f64,
    /// Ramp length in epochs, `>= 1`.
    pub beta: u32,
}

impl RampSchedule {
    pub fn new(alpha: f64, beta: u32) -> Result<Self> {
        let s = Self { alpha, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::validation(format!(
                "ramp alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.beta < 1 {
            return Err(Error::validation("ramp beta must be at least 1"));
        }
        Ok(())
    }

    pub fn eta(&self, epoch: i64) -> Result<f64> {
        ramp_up_eta(epoch, self)
    }
}

/// Number of locations a ratio `eta` selects on an `h x w` grid.
///
/// Rounds half away from zero.
pub fn suppressed_count(eta: f64, height: usize, width: usize) -> usize {
    (eta * (height * width) as f64).round() as usize
}

fn check_finite<T: Real>(what: &'static str, values: &[T]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::validation(format!("eta must lie in [0, 1], got {eta}")))
    }
}

/// Channel sums of one `c x h x w` sample stored contiguously.
pub fn channel_sum<T: Real>(values: &[T], channels: usize, height: usize, width: usize) -> Vec<T> {
    let s = height * width;
    debug_assert_eq!(values.len(), channels * s);
    let mut out = vec![T::zero(); s];
    for plane in values.chunks_exact(s) {
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    out
}

pub fn compute_response_map<T: Real>(f: &FeatureMap<T>) -> Result<ResponseMap<T>> {
    check_finite("feature map", &f.values)?;
    Ok(ResponseMap {
        height: f.height,
        width: f.width,
        values: channel_sum(&f.values, f.channels, f.height, f.width),
    })
}

pub fn ramp_up_eta(epoch: i64, s: &RampSchedule) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::validation(format!(
            "epoch must be non-negative, got {epoch}"
        )));
    }
    s.validate()?;
    let beta = f64::from(s.beta);
    let e = epoch as f64;
    if e < beta {
        let gap = 1.0 - e / beta;
        Ok(s.alpha * (-5.0 * gap * gap).exp())
    } else {
        Ok(s.alpha)
    }
}

/// Row-major indices ordered by response, highest first (`descending`) or
/// lowest first; equal responses keep row-major order.
fn ranked<T: Real>(values: &[T], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a]
            .partial_cmp(&values[b])
            .expect("responses are finite");
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx
}

/// Marks the `round(eta * H * W)` highest responses.
pub fn build_mask<T: Real>(m: &ResponseMap<T>, eta: f64) -> Result<SuppressionMask> {
    check_eta(eta)?;
    check_finite("response map", &m.values)?;
    Ok(top_k_mask(&m.values, m.height, m.width, eta, true))
}

/// Marks the `round(eta * H * W)` lowest responses.
pub fn mask_low_response<T: Real>(m: &ResponseMap<T>, eta: f64) -> Result<SuppressionMask> {
    check_eta(eta)?;
    check_finite("response map", &m.values)?;
    Ok(top_k_mask(&m.values, m.height, m.width, eta, false))
}

pub(crate) fn top_k_mask<T: Real>(
    values: &[T],
    height: usize,
    width: usize,
    eta: f64,
    highest: bool,
) -> SuppressionMask {
    let k = suppressed_count(eta, height, width);
    let order = ranked(values, highest);
    SuppressionMask::from_marked(height, width, order.into_iter().take(k))
}

/// Marks `round(eta * H * W)` locations drawn uniformly without replacement.
pub fn mask_random(height: usize, width: usize, eta: f64, seed: u64) -> Result<SuppressionMask> {
    check_eta(eta)?;
    if height == 0 || width == 0 {
        return Err(Error::validation("mask shape must be positive"));
    }
    let k = suppressed_count(eta, height, width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, height * width, k);
    Ok(SuppressionMask::from_marked(height, width, picked.into_iter()))
}

/// The emergent threshold: smallest response among marked locations.
pub fn mask_threshold<T: Real>(m: &ResponseMap<T>, mask: &SuppressionMask) -> Option<T> {
    m.values
        .iter()
        .zip(&mask.values)
        .filter(|(_, &l)| l == 1)
        .map(|(&v, _)| v)
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.min(v))))
}

/// Multiplies every channel of a contiguous `c x h x w` sample by `1 - mask`.
///
/// The same call is the backward pass: the mask is a constant.
pub fn apply_mask_in_place<T: Real>(values: &mut [T], mask: &SuppressionMask) {
    let s = mask.height * mask.width;
    debug_assert_eq!(values.len() % s, 0);
    for plane in values.chunks_exact_mut(s) {
        for (v, &l) in plane.iter_mut().zip(&mask.values) {
            *v *= T::one() - T::from_u8(l).unwrap();
        }
    }
}

pub fn suppress_features<T: Real>(f: &FeatureMap<T>, loc: &SuppressionMask) -> Result<FeatureMap<T>> {
    if (f.height, f.width) != (loc.height, loc.width) {
        return Err(Error::validation(format!(
            "mask shape {}x{} does not match feature map {}x{}",
            loc.height, loc.width, f.height, f.width
        )));
    }
    let mut out = f.clone();
    apply_mask_in_place(&mut out.values, loc);
    Ok(out)
}

/// Debug grid files: three little-endian `u32` (depth, height, width)
/// followed by the row-major payload, little-endian `f32` or raw bytes.
pub mod grid {
    use super::*;

    pub fn write_f32<W: Write>(out: &mut W, shape: [u32; 3], data: &[f32]) -> std::io::Result<()> {
        assert_eq!(shape.iter().map(|&d| d as usize).product::<usize>(), data.len());
        for d in shape {
            out.write_all(&d.to_le_bytes())?;
        }
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn write_u8<W: Write>(out: &mut W, shape: [u32; 3], data: &[u8]) -> std::io::Result<()> {
        assert_eq!(shape.iter().map(|&d| d as usize).product::<usize>(), data.len());
        for d in shape {
            out.write_all(&d.to_le_bytes())?;
        }
        out.write_all(data)
    }

    fn read_shape<R: Read>(input: &mut R) -> std::io::Result<[u32; 3]> {
        let mut shape = [0u32; 3];
        let mut buf = [0u8; 4];
        for d in &mut shape {
            input.read_exact(&mut buf)?;
            *d = u32::from_le_bytes(buf);
        }
        Ok(shape)
    }

    pub fn read_f32<R: Read>(input: &mut R) -> std::io::Result<([u32; 3], Vec<f32>)> {
        let shape = read_shape(input)?;
        let n = shape.iter().map(|&d| d as usize).product::<usize>();
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok((shape, data))
    }

    pub fn read_u8<R: Read>(input: &mut R) -> std::io::Result<([u32; 3], Vec<u8>)> {
        let shape = read_shape(input)?;
        let n = shape.iter().map(|&d| d as usize).product::<usize>();
        let mut data = vec![0u8; n];
        input.read_exact(&mut data)?;
        Ok((shape, data))
    }
}
