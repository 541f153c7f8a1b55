//! Conversion artifacts on disk: a viewable PNG, the exact f32 additive
//! delta, and a JSON sidecar with the attack's full bookkeeping.
//!
//! The PNG is quantized for eyes only; reconstruction uses the delta:
//! `x_adv = x_clean + delta`, bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{AttackError, AttackStep, ConversionOutcome};

/// JSON sidecar of one conversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversionRecord {
    pub sample_id: String,
    pub source_style: u16,
    pub target_style: u16,
    pub eps: f32,
    pub steps: usize,
    pub radius: f32,
    pub linf: f32,
    pub success: bool,
    pub initial_pred: u16,
    pub final_pred: u16,
    pub trace: Vec<AttackStep>,
    pub probe_tap: String,
    pub backbone_checksum: String,
}

fn io_err(path: &Path, source: std::io::Error) -> AttackError {
    AttackError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `{id}.png`, `{id}.delta.bin` and `{id}.json` under `dir`.
/// Returns the three paths.
pub fn save_conversion(
    dir: &Path,
    outcome: &ConversionOutcome,
) -> Result<(PathBuf, PathBuf, PathBuf), AttackError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let id = &outcome.record.sample_id;
    let png_path = dir.join(format!("{id}.png"));
    let delta_path = dir.join(format!("{id}.delta.bin"));
    let json_path = dir.join(format!("{id}.json"));

    let (_, h, w) = outcome.x_adv.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (outcome.x_adv[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (outcome.x_adv[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (outcome.x_adv[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(&png_path).map_err(|e| AttackError::Artifact {
        path: png_path.display().to_string(),
        msg: e.to_string(),
    })?;

    let mut bytes = Vec::with_capacity(outcome.delta.len() * 4);
    for &v in outcome.delta.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&delta_path, bytes).map_err(|e| io_err(&delta_path, e))?;

    let text = serde_json::to_string_pretty(&outcome.record).expect("serializable");
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
    Ok((png_path, delta_path, json_path))
}

/// Read an f32-LE delta of the given shape.
pub fn load_delta(path: &Path, shape: (usize, usize, usize)) -> Result<Array3<f32>, AttackError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let want = shape.0 * shape.1 * shape.2 * 4;
    if bytes.len() != want {
        return Err(AttackError::Artifact {
            path: path.display().to_string(),
            msg: format!("expected {want} bytes for shape {shape:?}, got {}", bytes.len()),
        });
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array3::from_shape_vec(shape, vals).expect("length checked"))
}

/// `x_clean + delta`, the exact adversarial image.
pub fn apply_delta(x_clean: &Array3<f32>, delta: &Array3<f32>) -> Array3<f32> {
    x_clean + delta
}

pub fn load_conversion_record(path: &Path) -> Result<ConversionRecord, AttackError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| AttackError::Artifact {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn fake_outcome() -> (Array3<f32>, ConversionOutcome) {
        let mut rng = stream(31, "persist");
        let clean = Array3::<f32>::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..1.0));
        let delta = Array3::<f32>::from_shape_fn((3, 8, 8), |_| rng.gen_range(-0.02..0.02));
        let x_adv = &clean + &delta;
        let outcome = ConversionOutcome {
            x_adv,
            delta,
            record: ConversionRecord {
                sample_id: "scene0003".into(),
                source_style: 0,
                target_style: 1,
                eps: 5e-3,
                steps: 5,
                radius: 5.0 / 255.0,
                linf: 0.0196,
                success: true,
                initial_pred: 0,
                final_pred: 1,
                trace: vec![
                    AttackStep { step: 0, loss: 1.2, pred: 0 },
                    AttackStep { step: 1, loss: 0.4, pred: 1 },
                ],
                probe_tap: "bottleneck".into(),
                backbone_checksum: "cafe".into(),
            },
        };
        (clean, outcome)
    }

    #[test]
    fn delta_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (clean, out) = fake_outcome();
        let (png, delta_path, json) = save_conversion(dir.path(), &out).unwrap();
        assert!(png.exists() && json.exists());
        let delta = load_delta(&delta_path, (3, 8, 8)).unwrap();
        assert_eq!(delta, out.delta);
        // reconstruction identity: clean + stored delta is the adversarial
        // image, bit for bit
        assert_eq!(apply_delta(&clean, &delta), out.x_adv);
    }

    #[test]
    fn record_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, out) = fake_outcome();
        let (_, _, json) = save_conversion(dir.path(), &out).unwrap();
        let rec = load_conversion_record(&json).unwrap();
        assert_eq!(rec.sample_id, out.record.sample_id);
        assert_eq!(rec.trace.len(), 2);
        assert_eq!(rec.final_pred, 1);
        assert!(rec.success);
    }

    #[test]
    fn wrong_length_delta_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.delta.bin");
        std::fs::write(&path, [0u8; 10]).unwrap();
        assert!(matches!(
            load_delta(&path, (3, 8, 8)),
            Err(AttackError::Artifact { .. })
        ));
    }
}
