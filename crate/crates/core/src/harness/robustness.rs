//! Benign input perturbations and the style drift they cause: random
//! resampling, color jitter, and JPEG recompression, measured as probe
//! origin flips and segmentation argmax churn against the clean inputs.
//!
//! Resampling and JPEG pass through the 8-bit image domain (that's the
//! point of them); color jitter stays in float. Every draw comes from a
//! stream keyed by the caller's seed and the kind, so a report is exactly
//! reproducible.

use image::imageops::FilterType;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::Sample;
use crate::probe::Probe;
use crate::rng::stream;
use crate::segcore::SegModel;
use crate::viz;

/// The benign perturbation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbKind {
    /// No-op control: must produce exactly zero drift.
    Identity,
    /// Rescale by a factor drawn from ±50% and resample back.
    Resample,
    /// Per-channel gain drawn from ±20%.
    ColorJitter,
    /// Re-encode as baseline JPEG at quality drawn from [50, 100].
    Jpeg,
}

impl PerturbKind {
    pub fn name(&self) -> &'static str {
        match self {
            PerturbKind::Identity => "identity",
            PerturbKind::Resample => "resample",
            PerturbKind::ColorJitter => "color-jitter",
            PerturbKind::Jpeg => "jpeg",
        }
    }
}

fn image_to_array(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

/// Apply one draw of `kind` to an image in `[0, 1]`.
pub fn perturb_sample(
    x: &Array3<f32>,
    kind: PerturbKind,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<f32>, HarnessError> {
    let (_, h, w) = x.dim();
    match kind {
        PerturbKind::Identity => Ok(x.clone()),
        PerturbKind::Resample => {
            let s: f32 = rng.gen_range(0.5..=1.5);
            let nh = ((h as f32 * s).round() as u32).max(1);
            let nw = ((w as f32 * s).round() as u32).max(1);
            let img = viz::rgb_image(x);
            let down = image::imageops::resize(&img, nw, nh, FilterType::Triangle);
            let back = image::imageops::resize(&down, w as u32, h as u32, FilterType::Triangle);
            Ok(image_to_array(&back))
        }
        PerturbKind::ColorJitter => {
            let gains: [f32; 3] = [
                rng.gen_range(0.8..=1.2),
                rng.gen_range(0.8..=1.2),
                rng.gen_range(0.8..=1.2),
            ];
            let mut out = x.clone();
            for (c, g) in gains.iter().enumerate() {
                out.index_axis_mut(ndarray::Axis(0), c)
                    .mapv_inplace(|v| (v * g).clamp(0.0, 1.0));
            }
            Ok(out)
        }
        PerturbKind::Jpeg => {
            let q: u8 = rng.gen_range(50..=100);
            let img = viz::rgb_image(x);
            let mut bytes: Vec<u8> = Vec::new();
            let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, q);
            enc.encode_image(&img).map_err(|e| HarnessError::Artifact {
                path: "<jpeg-encode>".into(),
                msg: e.to_string(),
            })?;
            let back = image::load_from_memory(&bytes)
                .map_err(|e| HarnessError::Artifact {
                    path: "<jpeg-decode>".into(),
                    msg: e.to_string(),
                })?
                .to_rgb8();
            Ok(image_to_array(&back))
        }
    }
}

/// Style drift under one perturbation kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub kind: PerturbKind,
    pub n: usize,
    /// Fraction of images whose probe origin changed.
    pub probe_flip_rate: f64,
    /// Mean fraction of pixels whose argmax class changed.
    pub mask_change_rate: f64,
}

/// Measure probe-origin flips and segmentation churn under `kind` over
/// `samples`, one draw per image, streams keyed by `seed` and the kind.
pub fn robustness_perturb(
    model: &SegModel<f32>,
    probe: &Probe,
    samples: &[&Sample],
    kind: PerturbKind,
    seed: u64,
) -> Result<DriftReport, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    probe.check_backbone(model)?;
    let mut rng = stream(seed, &format!("robustness-{}", kind.name()));
    let mut flips = 0usize;
    let mut change_sum = 0.0f64;
    for s in samples {
        let (clean_origin, _) = probe.predict(model, &s.image)?;
        let clean_mask = model.predict_mask(&s.image)?;
        let pert = perturb_sample(&s.image, kind, &mut rng)?;
        let (pert_origin, _) = probe.predict(model, &pert)?;
        let pert_mask = model.predict_mask(&pert)?;
        if pert_origin != clean_origin {
            flips += 1;
        }
        let changed = clean_mask
            .iter()
            .zip(pert_mask.iter())
            .filter(|(a, b)| a != b)
            .count();
        change_sum += changed as f64 / clean_mask.len() as f64;
    }
    Ok(DriftReport {
        kind,
        n: samples.len(),
        probe_flip_rate: flips as f64 / samples.len() as f64,
        mask_change_rate: change_sum / samples.len() as f64,
    })
}
