//! Sweep and uncertainty artifacts on disk.
//!
//! A sweep lands as a two-row strip PNG (mixtures on top, their
//! segmentations below, left to right in α order) plus a CSV with one row
//! per α: the mixing weight, per-class predicted areas, and the probe's
//! origin distribution. An uncertainty map lands as one exact f32-LE raw
//! file and one 8-bit heatmap PNG per class, plus a JSON sidecar with the
//! sampling parameters. Floats in the CSV print in shortest-roundtrip
//! form, so parsing them back loses nothing.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{StyleOpsError, SweepPoint, SweepResult, UncertaintyMap};
use crate::viz;

fn io_err(path: &Path, source: std::io::Error) -> StyleOpsError {
    StyleOpsError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn png_err(path: &Path, e: image::ImageError) -> StyleOpsError {
    StyleOpsError::Artifact {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

pub struct SweepPaths {
    pub strip: PathBuf,
    pub csv: PathBuf,
}

/// Write `strip.png` and `sweep.csv` under `dir`.
pub fn save_sweep(dir: &Path, sweep: &SweepResult) -> Result<SweepPaths, StyleOpsError> {
    save_points(dir, &sweep.points)
}

/// Same artifacts from bare rungs (the loss-space path assembles its own).
pub fn save_points(dir: &Path, points: &[SweepPoint]) -> Result<SweepPaths, StyleOpsError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let strip_path = dir.join("strip.png");
    let csv_path = dir.join("sweep.csv");

    let images: Vec<_> = points.iter().map(|p| viz::rgb_image(&p.x_inter)).collect();
    let masks: Vec<_> = points.iter().map(|p| viz::mask_rgb(&p.mask)).collect();
    let strip = viz::vstack(&[viz::hstack(&images, 2), viz::hstack(&masks, 2)], 2);
    strip.save(&strip_path).map_err(|e| png_err(&strip_path, e))?;

    let n_classes = points.first().map_or(0, |p| p.class_areas.len());
    let n_styles = points.first().map_or(0, |p| p.probe_dist.len());
    let mut text = String::from("alpha");
    for c in 0..n_classes {
        text.push_str(&format!(",area_c{c}"));
    }
    for r in 0..n_styles {
        text.push_str(&format!(",probe_p{r}"));
    }
    text.push('\n');
    for p in points {
        text.push_str(&format!("{}", p.alpha));
        for &a in &p.class_areas {
            text.push_str(&format!(",{a}"));
        }
        for &q in &p.probe_dist {
            text.push_str(&format!(",{q}"));
        }
        text.push('\n');
    }
    fs::write(&csv_path, text).map_err(|e| io_err(&csv_path, e))?;
    Ok(SweepPaths {
        strip: strip_path,
        csv: csv_path,
    })
}

/// JSON sidecar of an uncertainty run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyMeta {
    pub n_a: usize,
    pub target: u16,
    pub seed: u64,
    pub alphas: Vec<f64>,
    /// `(n_classes, h, w)` of the σ maps.
    pub shape: (usize, usize, usize),
}

pub struct UncertaintyPaths {
    /// `sigma_c{c}.f32` — row-major `(h, w)` little-endian f32, exact.
    pub raw: Vec<PathBuf>,
    /// `sigma_c{c}.png` — hot heatmap, normalized per class map.
    pub heatmaps: Vec<PathBuf>,
    pub meta: PathBuf,
}

/// Write per-class σ maps (exact raw + viewable heatmap) and the metadata
/// sidecar under `dir`.
pub fn save_uncertainty(
    dir: &Path,
    um: &UncertaintyMap,
) -> Result<UncertaintyPaths, StyleOpsError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let (n_classes, h, w) = um.sigma.dim();
    let mut raw = Vec::with_capacity(n_classes);
    let mut heatmaps = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let plane = um.sigma.index_axis(ndarray::Axis(0), c);
        let raw_path = dir.join(format!("sigma_c{c}.f32"));
        let mut bytes = Vec::with_capacity(h * w * 4);
        for &v in plane.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw_path, bytes).map_err(|e| io_err(&raw_path, e))?;

        let png_path = dir.join(format!("sigma_c{c}.png"));
        let img = viz::heatmap_rgb(&plane.to_owned(), None);
        img.save(&png_path).map_err(|e| png_err(&png_path, e))?;
        raw.push(raw_path);
        heatmaps.push(png_path);
    }
    let meta_path = dir.join("uncertainty.json");
    let meta = UncertaintyMeta {
        n_a: um.n_a,
        target: um.target,
        seed: um.seed,
        alphas: um.alphas.clone(),
        shape: um.sigma.dim(),
    };
    let text = serde_json::to_string_pretty(&meta).expect("serializable");
    fs::write(&meta_path, text).map_err(|e| io_err(&meta_path, e))?;
    Ok(UncertaintyPaths {
        raw,
        heatmaps,
        meta: meta_path,
    })
}

/// Read one `sigma_c{c}.f32` plane back, shape-checked.
pub fn load_sigma_plane(path: &Path, h: usize, w: usize) -> Result<Array2<f32>, StyleOpsError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != h * w * 4 {
        return Err(StyleOpsError::Artifact {
            path: path.display().to_string(),
            msg: format!("expected {} bytes for ({h}, {w}), got {}", h * w * 4, bytes.len()),
        });
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((h, w), vals).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::super::{SweepPoint, UncertaintyMap};
    use super::*;
    use crate::attack::{AttackResult, AttackStep};
    use crate::rng::stream;
    use ndarray::Array3;
    use rand::Rng;

    fn fake_sweep() -> SweepResult {
        let mut rng = stream(60, "persist-sweep");
        let mk_img = |rng: &mut rand_chacha::ChaCha8Rng| {
            Array3::<f32>::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..1.0))
        };
        let x_adv = mk_img(&mut rng);
        let points = [0.0, 0.5, 1.0]
            .into_iter()
            .map(|alpha| SweepPoint {
                alpha,
                x_inter: mk_img(&mut rng),
                mask: Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..5u8)),
                class_areas: vec![40, 10, 8, 4, 2],
                probe_dist: vec![0.25, 0.75],
            })
            .collect();
        SweepResult {
            target: 1,
            attack: AttackResult {
                x_adv,
                trace: vec![AttackStep {
                    step: 0,
                    loss: 1.0,
                    pred: 0,
                }],
                initial_pred: 0,
                final_pred: 1,
                target: 1,
                success: true,
                linf: 0.01,
            },
            points,
        }
    }

    #[test]
    fn sweep_artifacts_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let sweep = fake_sweep();
        let paths = save_sweep(dir.path(), &sweep).unwrap();
        // strip: 3 panels of 8px + 2 gaps of 2px wide, two rows + gap tall
        let img = image::open(&paths.strip).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (3 * 8 + 2 * 2, 2 * 8 + 2));

        let text = std::fs::read_to_string(&paths.csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "alpha,area_c0,area_c1,area_c2,area_c3,area_c4,probe_p0,probe_p1"
        );
        let mid: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(mid[0].parse::<f64>().unwrap(), 0.5);
        assert_eq!(mid[1].parse::<usize>().unwrap(), 40);
        assert_eq!(mid[7].parse::<f64>().unwrap(), 0.75);
    }

    #[test]
    fn uncertainty_artifacts_round_trip_exactly() {
        let mut rng = stream(61, "persist-sigma");
        let sigma = Array3::<f32>::from_shape_fn((3, 6, 5), |_| rng.gen_range(0.0..0.4));
        let um = UncertaintyMap {
            sigma: sigma.clone(),
            mean: Array3::<f32>::zeros((3, 6, 5)),
            n_a: 20,
            target: 2,
            seed: 777,
            alphas: vec![0.1, 0.9],
        };
        let dir = tempfile::tempdir().unwrap();
        let paths = save_uncertainty(dir.path(), &um).unwrap();
        assert_eq!(paths.raw.len(), 3);
        assert_eq!(paths.heatmaps.len(), 3);

        for (c, p) in paths.raw.iter().enumerate() {
            let plane = load_sigma_plane(p, 6, 5).unwrap();
            for (idx, &v) in plane.indexed_iter() {
                assert_eq!(v.to_bits(), sigma[[c, idx.0, idx.1]].to_bits());
            }
        }
        let meta: UncertaintyMeta =
            serde_json::from_str(&std::fs::read_to_string(&paths.meta).unwrap()).unwrap();
        assert_eq!(meta.n_a, 20);
        assert_eq!(meta.target, 2);
        assert_eq!(meta.seed, 777);
        assert_eq!(meta.shape, (3, 6, 5));
        assert_eq!(meta.alphas, vec![0.1, 0.9]);

        let bad = load_sigma_plane(&paths.raw[0], 7, 5);
        assert!(matches!(bad, Err(StyleOpsError::Artifact { .. })));
    }
}
