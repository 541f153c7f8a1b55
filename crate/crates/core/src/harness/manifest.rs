//! The experiment manifest: one JSON file recording the seed, the resolved
//! configuration, and a SHA-256 per artifact, so a rerun can be checked for
//! bitwise reproduction. Wall-clock timings are deliberately a separate
//! file (`timing.json`) and excluded from hashing — they are the one output
//! that legitimately differs between identical runs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{io_err, HarnessError};

/// Files never hashed into a manifest: the manifest itself and timings.
pub const MANIFEST_EXCLUDES: [&str; 2] = ["experiment.json", "timing.json"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub seed: u64,
    /// The fully-resolved run configuration, round-tripped as JSON.
    pub config: serde_json::Value,
    /// Relative path (forward slashes) → SHA-256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String, HarnessError> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, PathBuf>) -> Result<(), HarnessError> {
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            out.insert(rel, path);
        }
    }
    Ok(())
}

/// Hash every file under `root` (recursively), keyed by relative path with
/// forward slashes; `extra_excludes` plus [`MANIFEST_EXCLUDES`] are skipped
/// by file name. The BTreeMap makes the listing order-independent.
pub fn collect_artifact_hashes(
    root: &Path,
    extra_excludes: &[&str],
) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut files = BTreeMap::new();
    walk(root, root, &mut files)?;
    let mut out = BTreeMap::new();
    for (rel, path) in files {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if MANIFEST_EXCLUDES.contains(&name.as_str())
            || extra_excludes.contains(&name.as_str())
        {
            continue;
        }
        out.insert(rel, hash_file(&path)?);
    }
    Ok(out)
}

pub fn write_experiment_manifest(
    path: &Path,
    manifest: &ExperimentManifest,
) -> Result<(), HarnessError> {
    let body =
        serde_json::to_string_pretty(manifest).map_err(|e| HarnessError::Artifact {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

pub fn load_experiment_manifest(path: &Path) -> Result<ExperimentManifest, HarnessError> {
    let body = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&body).map_err(|e| HarnessError::Artifact {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Wall-clock seconds per pipeline stage. Lives next to the manifest but
/// never inside it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimingLog {
    pub entries: BTreeMap<String, f64>,
}

pub fn write_timing(path: &Path, log: &TimingLog) -> Result<(), HarnessError> {
    let body = serde_json::to_string_pretty(log).map_err(|e| HarnessError::Artifact {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}
