//! Checkpoint container: a small magic header, a JSON block describing the
//! named tensors (shape, offset), and row-major float32 little-endian
//! payloads. The same container carries models, probes and graders,
//! distinguished by `kind`.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{ArchConfig, SegModel};

const MAGIC: &[u8; 8] = b"STYCONV1";

#[derive(thiserror::Error, Debug)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: malformed header: {0}", .source)]
    BadHeader {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: checkpoint kind is '{got}', expected '{want}'")]
    WrongKind {
        path: String,
        got: String,
        want: String,
    },
    #[error("{path}: tensor '{name}' has {got} values, expected {want}")]
    TensorSize {
        path: String,
        name: String,
        got: usize,
        want: usize,
    },
    #[error("{path}: missing tensor '{name}'")]
    MissingTensor { path: String, name: String },
    #[error("{path}: payload truncated")]
    Truncated { path: String },
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload region.
    pub offset: u64,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    /// Free-form metadata: arch config echo, provenance, tap name, ...
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a generic checkpoint with named float32 tensors.
pub fn save_tensors(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in tensors {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: data.len(),
        });
        offset += (data.len() * 4) as u64;
    }
    let header = CheckpointHeader {
        format_version: 1,
        kind: kind.to_string(),
        meta,
        tensors: entries,
    };
    let hjson = serde_json::to_vec(&header).expect("header serialization");
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    f.write_all(&(hjson.len() as u32).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    f.write_all(&hjson).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, _, data) in tensors {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a generic checkpoint; returns the header and each tensor's data in
/// header order.
pub fn load_tensors(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f32>>), CheckpointError> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let mut lenb = [0u8; 4];
    f.read_exact(&mut lenb).map_err(|e| io_err(path, e))?;
    let hlen = u32::from_le_bytes(lenb) as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson).map_err(|e| io_err(path, e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hjson).map_err(|source| CheckpointError::BadHeader {
            path: path.display().to_string(),
            source,
        })?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let start = t.offset as usize;
        let end = start + t.len * 4;
        if end > payload.len() {
            return Err(CheckpointError::Truncated {
                path: path.display().to_string(),
            });
        }
        let mut data = Vec::with_capacity(t.len);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        out.push(data);
    }
    Ok((header, out))
}

/// Save a segmentation model plus provenance.
pub fn save_model(
    path: &Path,
    model: &SegModel<f32>,
    provenance: serde_json::Value,
) -> Result<(), CheckpointError> {
    let meta = serde_json::json!({
        "arch": model.cfg,
        "provenance": provenance,
    });
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .visit()
        .into_iter()
        .flat_map(|(name, c)| {
            [
                (
                    format!("{name}.weight"),
                    vec![c.w.dim().0, c.w.dim().1],
                    c.w.iter().cloned().collect::<Vec<f32>>(),
                ),
                (
                    format!("{name}.bias"),
                    vec![c.b.len()],
                    c.b.to_vec(),
                ),
            ]
        })
        .collect();
    save_tensors(path, "model", meta, &tensors)
}

/// Load a segmentation model; reconstructs the architecture from the header
/// and validates every tensor's name and shape.
pub fn load_model(path: &Path) -> Result<(SegModel<f32>, CheckpointHeader), CheckpointError> {
    let (header, data) = load_tensors(path)?;
    if header.kind != "model" {
        return Err(CheckpointError::WrongKind {
            path: path.display().to_string(),
            got: header.kind.clone(),
            want: "model".into(),
        });
    }
    let arch: ArchConfig = serde_json::from_value(header.meta["arch"].clone()).map_err(|source| {
        CheckpointError::BadHeader {
            path: path.display().to_string(),
            source,
        }
    })?;
    let mut model = SegModel::<f32>::init(arch);
    let by_name: std::collections::BTreeMap<&str, usize> = header
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.as_str(), i))
        .collect();
    let mut flat = Vec::with_capacity(model.n_params());
    for (name, c) in model.visit() {
        for (suffix, want) in [(".weight", c.w.len()), (".bias", c.b.len())] {
            let full = format!("{name}{suffix}");
            let &i = by_name
                .get(full.as_str())
                .ok_or_else(|| CheckpointError::MissingTensor {
                    path: path.display().to_string(),
                    name: full.clone(),
                })?;
            if data[i].len() != want {
                return Err(CheckpointError::TensorSize {
                    path: path.display().to_string(),
                    name: full,
                    got: data[i].len(),
                    want,
                });
            }
            flat.extend_from_slice(&data[i]);
        }
    }
    model.load_flat(&flat);
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segcore::ArchConfig;

    fn tiny() -> SegModel<f32> {
        SegModel::init(ArchConfig {
            in_channels: 3,
            n_classes: 5,
            stages: 2,
            width: 4,
            seed: 77,
        })
    }

    #[test]
    fn model_roundtrip_preserves_weights_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let model = tiny();
        save_model(&p, &model, serde_json::json!({"note": "unit"})).unwrap();
        let (loaded, header) = load_model(&p).unwrap();
        assert_eq!(model.weights_checksum(), loaded.weights_checksum());
        assert_eq!(header.kind, "model");
        assert_eq!(header.meta["provenance"]["note"], "unit");
        assert_eq!(header.meta["arch"]["stages"], 2);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.ckpt");
        std::fs::write(&p, b"NOTMAGIC________junk").unwrap();
        assert!(matches!(
            load_model(&p),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.ckpt");
        save_tensors(
            &p,
            "probe",
            serde_json::json!({}),
            &[("w".into(), vec![2, 2], vec![0.0; 4])],
        )
        .unwrap();
        assert!(matches!(
            load_model(&p),
            Err(CheckpointError::WrongKind { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        save_model(&p, &tiny(), serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_model(&p),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn generic_tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.ckpt");
        let tensors = vec![
            ("a".to_string(), vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("b".to_string(), vec![2], vec![-1.5f32, 0.25]),
        ];
        save_tensors(&p, "probe", serde_json::json!({"tap": "bottleneck"}), &tensors).unwrap();
        let (h, data) = load_tensors(&p).unwrap();
        assert_eq!(h.meta["tap"], "bottleneck");
        assert_eq!(data[0], tensors[0].2);
        assert_eq!(data[1], tensors[1].2);
        assert_eq!(h.tensors[1].shape, vec![2]);
    }
}
