//! The experiment suite at desk scale: cross-dataset evaluation matrices,
//! style-adoption checks, benign-perturbation robustness, attack-success
//! grids, conversion gains, per-lesion mixed evaluation, and semantic
//! integrity under conversion.
//!
//! Everything here computes from explicit inputs and returns plain data;
//! artifact emission (CSV/JSON/PNG) lives in thin `save_*` functions so
//! every number stays recomputable from what's on disk. Corpus-level scores
//! accumulate pixel confusion across images first and derive ratios once,
//! which keeps cells exactly reproducible regardless of image order.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackError;
use crate::corpus::Sample;
use crate::probe::ProbeError;
use crate::segcore::{add_confusion, miou_from_confusion, SegError, SegModel};
use crate::styleops::StyleOpsError;

mod attack_table;
mod gain;
mod integrity;
mod manifest;
mod mixed;
mod robustness;

pub use attack_table::{
    attack_success_table, save_attack_table, AttackCell, AttackSetting, AttackTable,
    SettingTiming,
};
pub use gain::{
    conversion_gain, distillation_experiment, mixed_style_pool, save_gain, DistillConfig,
    DistillReport, GainPaths, GainReport,
};
pub use integrity::{
    boundary_distance, discrete_grade, integrity_check, log_residual, train_grader, FlipCase,
    Grader, GraderConfig, IntegrityReport,
};
pub use manifest::{
    collect_artifact_hashes, hash_file, load_experiment_manifest, write_experiment_manifest,
    write_timing, ExperimentManifest, TimingLog, MANIFEST_EXCLUDES,
};
pub use mixed::{mixed_lesion_eval, select_targets, ClassTarget, MixedReport, MixedRow};
pub use robustness::{perturb_sample, robustness_perturb, DriftReport, PerturbKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    StyleOps(#[from] StyleOpsError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("training failed: {0}")]
    Train(String),
    #[error("empty evaluation set")]
    EmptySet,
    #[error("{what} out of range: {got} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Artifact { path: String, msg: String },
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Corpus-level mIoU of `model` over `samples`: pixel confusion accumulated
/// across every image, per-class IoU derived once.
pub fn eval_miou(model: &SegModel<f32>, samples: &[&Sample]) -> Result<f64, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    let n_classes = model.cfg.n_classes;
    let mut acc = vec![(0u64, 0u64, 0u64); n_classes];
    for s in samples {
        let pred = model.predict_mask(&s.image)?;
        add_confusion(&mut acc, &pred, &s.mask);
    }
    Ok(miou_from_confusion(&acc))
}

/// Same score from already-computed prediction masks — the recompute path
/// for persisted artifacts.
pub fn miou_from_masks(pairs: &[(Array2<u8>, Array2<u8>)], n_classes: usize) -> f64 {
    let mut acc = vec![(0u64, 0u64, 0u64); n_classes];
    for (pred, gt) in pairs {
        add_confusion(&mut acc, pred, gt);
    }
    miou_from_confusion(&acc)
}

/// One row of a cross-evaluation: a named model, flagged by whether it is a
/// single-style specialist (column spreads are taken over specialists only).
pub struct MatrixEntry<'a> {
    pub name: String,
    pub model: &'a SegModel<f32>,
    pub specialist: bool,
}

/// Cross-dataset mIoU grid with the derived column spreads and row means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub row_labels: Vec<String>,
    pub specialist_rows: Vec<usize>,
    pub col_labels: Vec<String>,
    /// `cells[r][c]` = mIoU of model `r` on corpus `c`.
    pub cells: Vec<Vec<f64>>,
    /// Population std over each column's specialist rows.
    pub col_std: Vec<f64>,
    pub row_mean: Vec<f64>,
}

/// Population standard deviation of the given cells.
fn column_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// Evaluate every model on every corpus.
pub fn cross_matrix(
    entries: &[MatrixEntry<'_>],
    corpora: &[(String, Vec<&Sample>)],
) -> Result<EvalMatrix, HarnessError> {
    if entries.is_empty() || corpora.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    let mut cells = Vec::with_capacity(entries.len());
    for e in entries {
        let mut row = Vec::with_capacity(corpora.len());
        for (_, samples) in corpora {
            row.push(eval_miou(e.model, samples)?);
        }
        cells.push(row);
    }
    let specialist_rows: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.specialist)
        .map(|(i, _)| i)
        .collect();
    let col_std: Vec<f64> = (0..corpora.len())
        .map(|c| {
            let vals: Vec<f64> = specialist_rows.iter().map(|&r| cells[r][c]).collect();
            column_std(&vals)
        })
        .collect();
    let row_mean: Vec<f64> = cells
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    Ok(EvalMatrix {
        row_labels: entries.iter().map(|e| e.name.clone()).collect(),
        specialist_rows,
        col_labels: corpora.iter().map(|(n, _)| n.clone()).collect(),
        cells,
        col_std,
        row_mean,
    })
}

/// Write `matrix.csv`, `matrix.json`, and a blocky `matrix.png` heatmap.
pub fn save_matrix(
    dir: &std::path::Path,
    m: &EvalMatrix,
) -> Result<std::path::PathBuf, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv_path = dir.join("matrix.csv");
    let mut text = String::from("model");
    for c in &m.col_labels {
        text.push_str(&format!(",{c}"));
    }
    text.push_str(",row_mean\n");
    for (r, row) in m.cells.iter().enumerate() {
        text.push_str(&m.row_labels[r]);
        for v in row {
            text.push_str(&format!(",{v}"));
        }
        text.push_str(&format!(",{}\n", m.row_mean[r]));
    }
    text.push_str("col_std");
    for v in &m.col_std {
        text.push_str(&format!(",{v}"));
    }
    text.push('\n');
    std::fs::write(&csv_path, text).map_err(|e| io_err(&csv_path, e))?;

    let json_path = dir.join("matrix.json");
    let body = serde_json::to_string_pretty(m).expect("serializable");
    std::fs::write(&json_path, body).map_err(|e| io_err(&json_path, e))?;

    let png_path = dir.join("matrix.png");
    let grid = Array2::from_shape_fn((m.cells.len(), m.col_labels.len()), |(r, c)| {
        m.cells[r][c] as f32
    });
    let img = crate::viz::upscale(&crate::viz::heatmap_rgb(&grid, Some(1.0)), 24);
    img.save(&png_path).map_err(|e| HarnessError::Artifact {
        path: png_path.display().to_string(),
        msg: e.to_string(),
    })?;
    Ok(csv_path)
}

/// One per-style comparison from [`style_adoption_check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdoptionRow {
    pub style: String,
    pub generalist_miou: f64,
    pub specialist_miou: f64,
    /// Generalist matches (within `margin`) or beats the style's own
    /// specialist on that style's test set.
    pub adopted: bool,
}

/// Report of the adoption check: the generalist against each style's
/// specialist on that style's ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdoptionReport {
    pub rows: Vec<AdoptionRow>,
    pub margin: f64,
    pub all_adopted: bool,
}

/// Compare a generalist against per-style specialists, style by style.
/// `specialists[k]` must be the model trained on `corpora[k]`'s style.
pub fn style_adoption_check(
    generalist: &SegModel<f32>,
    specialists: &[(String, &SegModel<f32>)],
    corpora: &[Vec<&Sample>],
    margin: f64,
) -> Result<AdoptionReport, HarnessError> {
    if specialists.len() != corpora.len() {
        return Err(HarnessError::Invalid(format!(
            "{} specialists vs {} corpora",
            specialists.len(),
            corpora.len()
        )));
    }
    let mut rows = Vec::with_capacity(specialists.len());
    for ((name, spec), samples) in specialists.iter().zip(corpora.iter()) {
        let g = eval_miou(generalist, samples)?;
        let s = eval_miou(spec, samples)?;
        rows.push(AdoptionRow {
            style: name.clone(),
            generalist_miou: g,
            specialist_miou: s,
            adopted: g >= s - margin,
        });
    }
    let all = rows.iter().all(|r| r.adopted);
    Ok(AdoptionReport {
        rows,
        margin,
        all_adopted: all,
    })
}
