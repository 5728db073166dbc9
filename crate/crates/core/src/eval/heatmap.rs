//! Response-map heatmaps for two sampled views of one image.

use std::path::{Path, PathBuf};

use crate::augment::{sample_view_pair, AugmentPolicy};
use crate::checkpoint::Checkpoint;
use crate::data::to_batch;
use crate::error::{Error, Result};
use crate::imaging::{save_gray_png, Image};
use crate::nn::Encoder;
use crate::suppression::{build_mask, compute_response_map, ramp_up_eta, FeatureMap, ResponseMap, SuppressionMask};

#[derive(Debug, Clone)]
pub struct ViewHeatmap {
    pub view: Image,
    pub response: ResponseMap<f32>,
    /// Response rescaled to `[0, 1]`; all zeros when the map is constant.
    pub normalized: Vec<f32>,
    pub mask: SuppressionMask,
}

#[derive(Debug, Clone)]
pub struct HeatmapArtifact {
    pub eta: f64,
    pub views: [ViewHeatmap; 2],
    pub files: Vec<PathBuf>,
}

pub fn normalize_min_max(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Response map and mask of one (already augmented) view.
pub fn view_heatmap(encoder: &Encoder<f32>, view: &Image, eta: f64) -> Result<ViewHeatmap> {
    let f = encoder.forward_eval(&to_batch(&[view]));
    let fm = FeatureMap::new(f.c, f.h, f.w, f.data)?;
    let response = compute_response_map(&fm)?;
    let mask = build_mask(&response, eta)?;
    Ok(ViewHeatmap {
        view: view.clone(),
        normalized: normalize_min_max(&response.values),
        response,
        mask,
    })
}

pub fn heatmaps(encoder: &Encoder<f32>, image: &Image, policy: &AugmentPolicy, seed: u64, eta: f64) -> Result<[ViewHeatmap; 2]> {
    let (v1, v2) = sample_view_pair(image, policy, seed)?;
    Ok([view_heatmap(encoder, &v1, eta)?, view_heatmap(encoder, &v2, eta)?])
}

/// The view with masked cells tinted red.
pub fn mask_overlay(view: &Image, mask: &SuppressionMask) -> Image {
    let up = mask.upsample_nearest(view.height, view.width);
    let mut out = view.clone();
    let s = view.height * view.width;
    for (i, &m) in up.iter().enumerate() {
        if m != 0 {
            out.data[i] = 0.4 * out.data[i] + 0.6;
            out.data[s + i] *= 0.4;
            out.data[2 * s + i] *= 0.4;
        }
    }
    out
}

/// Writes `view{1,2}.png`, `heatmap{1,2}.png` and `mask_overlay{1,2}.png`.
pub fn write_heatmaps(views: &[ViewHeatmap; 2], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    for (k, v) in views.iter().enumerate() {
        let n = k + 1;
        let scale = (v.view.height / v.response.height).max(1);
        let p = out_dir.join(format!("view{n}.png"));
        v.view.save_png(&p)?;
        files.push(p);
        let p = out_dir.join(format!("heatmap{n}.png"));
        save_gray_png(&v.normalized, v.response.height, v.response.width, scale, &p)?;
        files.push(p);
        let p = out_dir.join(format!("mask_overlay{n}.png"));
        mask_overlay(&v.view, &v.mask).save_png(&p)?;
        files.push(p);
    }
    Ok(files)
}

/// Heatmaps of a checkpoint's online encoder. `eta` defaults to the ramp-up
/// value at the checkpoint's epoch; the views use the run's own
/// augmentation policy.
pub fn export_heatmap(
    checkpoint: &Path,
    image: &Path,
    out_dir: &Path,
    seed: u64,
    eta: Option<f64>,
) -> Result<HeatmapArtifact> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.build_network()?;
    let img = Image::load(image)?;
    let eta = match eta {
        Some(e) => e,
        None => ramp_up_eta(ck.epoch as i64, &ck.config.ramp())?,
    };
    let views = heatmaps(&net.encoder, &img, &ck.config.augment, seed, eta)?;
    let files = write_heatmaps(&views, out_dir)?;
    Ok(HeatmapArtifact { eta, views, files })
}
