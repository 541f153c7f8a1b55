//! Corpus persistence: a directory tree of PNGs plus JSON manifests.
//!
//! Layout:
//!
//! ```text
//! <root>/corpus.json                   # style directory names, in id order
//! <root>/<style>/manifest.json        # palette, splits, severities
//! <root>/<style>/<split>/images/<id>.png
//! <root>/<style>/<split>/masks/<id>.png
//! ```
//!
//! Masks are grayscale PNGs whose byte values go through the manifest's
//! palette (raw byte → class id), so externally produced datasets with
//! arbitrary label encodings load through the same path as saved ones.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Sample, Split, StyleSpec};

/// Byte value used for class id `c` when saving masks.
fn palette_byte(class_id: u8) -> u8 {
    class_id * 60
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default)]
    pub severity: Option<f32>,
}

/// Per-style manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub name: String,
    pub style_id: u16,
    pub image_size: usize,
    /// Raw mask byte (stringified, JSON keys are strings) → class id.
    pub palette: BTreeMap<String, u8>,
    pub style: StyleSpec,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusIndex {
    styles: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn sample_paths(style_dir: &Path, split: Split, id: &str) -> (PathBuf, PathBuf) {
    let base = style_dir.join(split.name());
    (
        base.join("images").join(format!("{id}.png")),
        base.join("masks").join(format!("{id}.png")),
    )
}

fn save_sample(style_dir: &Path, split: Split, s: &Sample) -> Result<(), CorpusError> {
    let (img_path, mask_path) = sample_paths(style_dir, split, &s.sample_id);
    let (_, h, w) = s.image.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (s.image[[0, y, x]] * 255.0).round() as u8,
                (s.image[[1, y, x]] * 255.0).round() as u8,
                (s.image[[2, y, x]] * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(&img_path)
        .map_err(|e| CorpusError::Decode {
            path: img_path.display().to_string(),
            msg: e.to_string(),
        })?;

    let mut m = GrayImage::new(w as u32, h as u32);
    for ((y, x), &c) in s.mask.indexed_iter() {
        m.put_pixel(x as u32, y as u32, image::Luma([palette_byte(c)]));
    }
    m.save(&mask_path).map_err(|e| CorpusError::Decode {
        path: mask_path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Write `corpora` under `root`, creating the directory tree.
pub fn save_corpus(root: &Path, corpora: &[Corpus]) -> Result<(), CorpusError> {
    if corpora.is_empty() {
        return Err(CorpusError::Empty);
    }
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let index = CorpusIndex {
        styles: corpora.iter().map(|c| c.spec.name.clone()).collect(),
    };
    write_json(&root.join("corpus.json"), &index)?;

    for c in corpora {
        let style_dir = root.join(&c.spec.name);
        let mut splits = BTreeMap::new();
        let image_size = c
            .all_samples()
            .next()
            .map(|s| s.image.dim().1)
            .unwrap_or(0);
        for split in Split::ALL {
            let dir = style_dir.join(split.name());
            for sub in ["images", "masks"] {
                let d = dir.join(sub);
                fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
            }
            let mut entries = Vec::new();
            for s in c.split(split) {
                save_sample(&style_dir, split, s)?;
                entries.push(ManifestEntry {
                    id: s.sample_id.clone(),
                    severity: s.severity,
                });
            }
            splits.insert(split.name().to_string(), entries);
        }
        let palette: BTreeMap<String, u8> =
            (0..=4u8).map(|c| (palette_byte(c).to_string(), c)).collect();
        let doc = ManifestDoc {
            name: c.spec.name.clone(),
            style_id: c.style_id,
            image_size,
            palette,
            style: c.spec.clone(),
            splits,
        };
        write_json(&style_dir.join("manifest.json"), &doc)?;
    }
    Ok(())
}

fn load_image(path: &Path) -> Result<Array3<f32>, CorpusError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => io_err(path, io),
        other => CorpusError::Decode {
            path: path.display().to_string(),
            msg: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn load_mask(path: &Path, palette: &BTreeMap<u8, u8>) -> Result<Array2<u8>, CorpusError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => io_err(path, io),
        other => CorpusError::Decode {
            path: path.display().to_string(),
            msg: other.to_string(),
        },
    })?;
    let gray = img.to_luma8();
    let (w, h) = gray.dimensions();
    let mut out = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in gray.enumerate_pixels() {
        let raw = p.0[0];
        let Some(&cid) = palette.get(&raw) else {
            return Err(CorpusError::MaskValue {
                path: path.display().to_string(),
                value: raw,
            });
        };
        out[[y as usize, x as usize]] = cid;
    }
    Ok(out)
}

/// Load a corpus tree previously written by [`save_corpus`] (or assembled by
/// hand in the same layout).
pub fn load_manifest(root: &Path) -> Result<Vec<Corpus>, CorpusError> {
    let index_path = root.join("corpus.json");
    let text = fs::read_to_string(&index_path).map_err(|e| io_err(&index_path, e))?;
    let index: CorpusIndex =
        serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: index_path.display().to_string(),
            msg: e.to_string(),
        })?;
    if index.styles.is_empty() {
        return Err(CorpusError::Empty);
    }

    let mut corpora = Vec::new();
    for name in &index.styles {
        let style_dir = root.join(name);
        let man_path = style_dir.join("manifest.json");
        let text = fs::read_to_string(&man_path).map_err(|e| io_err(&man_path, e))?;
        let doc: ManifestDoc =
            serde_json::from_str(&text).map_err(|e| CorpusError::Manifest {
                path: man_path.display().to_string(),
                msg: e.to_string(),
            })?;
        let mut palette = BTreeMap::new();
        for (k, &v) in &doc.palette {
            let raw: u8 = k.parse().map_err(|_| CorpusError::Manifest {
                path: man_path.display().to_string(),
                msg: format!("palette key {k:?} is not a byte"),
            })?;
            palette.insert(raw, v);
        }

        let mut corpus = Corpus {
            style_id: doc.style_id,
            spec: doc.style.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for split in Split::ALL {
            let entries = doc.splits.get(split.name()).cloned().unwrap_or_default();
            for e in entries {
                let (img_path, mask_path) = sample_paths(&style_dir, split, &e.id);
                let image = load_image(&img_path)?;
                let mask = load_mask(&mask_path, &palette)?;
                let (_, ih, iw) = image.dim();
                let (mh, mw) = mask.dim();
                if (ih, iw) != (mh, mw) {
                    return Err(CorpusError::ShapeMismatch {
                        path: mask_path.display().to_string(),
                        iw: iw as u32,
                        ih: ih as u32,
                        mw: mw as u32,
                        mh: mh as u32,
                    });
                }
                let sample = Sample {
                    image,
                    mask,
                    origin: doc.style_id,
                    severity: e.severity,
                    sample_id: e.id,
                };
                match split {
                    Split::Train => corpus.train.push(sample),
                    Split::Val => corpus.val.push(sample),
                    Split::Test => corpus.test.push(sample),
                }
            }
        }
        corpora.push(corpus);
    }
    Ok(corpora)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn toy() -> Vec<Corpus> {
        generate_corpus(&CorpusSpec {
            n_images: 6,
            image_size: 48,
            styles: vec![
                StyleSpec::fine("fine").with_marker(0.008, 0.0),
                StyleSpec::coarse("coarse", 2, 6.0).with_marker(0.008, 90.0),
            ],
            seed: 5,
            train_frac: 0.5,
            val_frac: 0.25,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let corpora = toy();
        save_corpus(dir.path(), &corpora).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.len(), corpora.len());
        for (a, b) in corpora.iter().zip(loaded.iter()) {
            assert_eq!(a.spec.name, b.spec.name);
            assert_eq!(a.style_id, b.style_id);
            assert_eq!(a.train.len(), b.train.len());
            for (sa, sb) in a.all_samples().zip(b.all_samples()) {
                // images live on the k/255 grid, so PNG bytes are lossless
                assert_eq!(sa.image, sb.image);
                assert_eq!(sa.mask, sb.mask);
                assert_eq!(sa.sample_id, sb.sample_id);
                assert_eq!(sa.severity, sb.severity);
                assert_eq!(sa.origin, sb.origin);
            }
        }
    }

    #[test]
    fn missing_image_is_an_io_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpora = toy();
        save_corpus(dir.path(), &corpora).unwrap();
        let victim = dir
            .path()
            .join("fine/train/images")
            .join(format!("{}.png", corpora[0].train[0].sample_id));
        std::fs::remove_file(&victim).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        match err {
            CorpusError::Io { path, .. } => assert!(path.contains("images")),
            other => panic!("want Io, got {other:?}"),
        }
    }

    #[test]
    fn unmappable_mask_value_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpora = toy();
        save_corpus(dir.path(), &corpora).unwrap();
        // overwrite one mask with a byte outside the palette
        let id = &corpora[0].train[0].sample_id;
        let victim = dir.path().join("fine/train/masks").join(format!("{id}.png"));
        let bad = GrayImage::from_pixel(48, 48, image::Luma([7u8]));
        bad.save(&victim).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        match err {
            CorpusError::MaskValue { path, value } => {
                assert!(path.contains(id.as_str()));
                assert_eq!(value, 7);
            }
            other => panic!("want MaskValue, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let corpora = toy();
        save_corpus(dir.path(), &corpora).unwrap();
        let id = &corpora[0].train[0].sample_id;
        let victim = dir.path().join("fine/train/masks").join(format!("{id}.png"));
        let bad = GrayImage::from_pixel(24, 48, image::Luma([0u8]));
        bad.save(&victim).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, CorpusError::ShapeMismatch { .. }));
    }

    #[test]
    fn malformed_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let corpora = toy();
        save_corpus(dir.path(), &corpora).unwrap();
        std::fs::write(dir.path().join("fine/manifest.json"), "{ nope").unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(matches!(err, CorpusError::Manifest { .. }));
    }
}
