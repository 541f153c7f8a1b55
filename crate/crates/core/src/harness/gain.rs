//! Conversion gain and the style-distillation experiment: train on a
//! lopsided fine/coarse mix, then measure whether converting test images
//! toward the scarce fine style recovers segmentation quality on fine
//! ground truth.
//!
//! `conversion_gain` is the paired before/after evaluation (corpus-level
//! IoU, per class and mean). `distillation_experiment` is the whole loop:
//! corpus → mixed pool → training → probe → gain. All of its seeds derive
//! from one knob so a seed sweep re-rolls geometry, weights, and batch
//! order together.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError};
use crate::attack::{convert, AttackConfig};
use crate::corpus::{generate_corpus, CorpusSpec, Sample, Split, StyleSpec};
use crate::probe::{train_probe, Probe, ProbeConfig};
use crate::rng::stream;
use crate::segcore::{
    add_confusion, iou_from_confusion, miou_from_confusion, train, ArchConfig, SegModel,
    TapPoint, TrainConfig, TrainedModel,
};
use crate::viz;

/// Paired before/after evaluation of one conversion target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainReport {
    pub target: u16,
    pub n: usize,
    pub miou_before: f64,
    pub miou_after: f64,
    /// `miou_after - miou_before`.
    pub gain: f64,
    /// Per-class IoU; `None` where the class is absent from both prediction
    /// and ground truth across the whole set.
    pub per_class_before: Vec<Option<f64>>,
    pub per_class_after: Vec<Option<f64>>,
    /// Fraction of conversions whose final probe prediction hit `target`.
    pub conversion_success_rate: f64,
}

/// Evaluate `samples` against their own masks before and after converting
/// every image toward `target`. Corpus-level IoU: confusion accumulates
/// over all pixels of all images, then divides once.
pub fn conversion_gain(
    model: &SegModel<f32>,
    probe: &Probe,
    samples: &[&Sample],
    target: u16,
    cfg: &AttackConfig,
) -> Result<GainReport, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    if target as usize >= probe.n_styles {
        return Err(HarnessError::OutOfRange {
            what: "conversion target",
            got: target as usize,
            limit: probe.n_styles,
        });
    }
    probe.check_backbone(model)?;
    let k = model.cfg.n_classes;
    let mut acc_before = vec![(0u64, 0u64, 0u64); k];
    let mut acc_after = vec![(0u64, 0u64, 0u64); k];
    let mut successes = 0usize;
    for s in samples {
        let clean_mask = model.predict_mask(&s.image)?;
        add_confusion(&mut acc_before, &clean_mask, &s.mask);
        let outcome = convert(model, probe, s, target as usize, cfg)?;
        if outcome.record.success {
            successes += 1;
        }
        let conv_mask = model.predict_mask(&outcome.x_adv)?;
        add_confusion(&mut acc_after, &conv_mask, &s.mask);
    }
    let miou_before = miou_from_confusion(&acc_before);
    let miou_after = miou_from_confusion(&acc_after);
    Ok(GainReport {
        target,
        n: samples.len(),
        miou_before,
        miou_after,
        gain: miou_after - miou_before,
        per_class_before: iou_from_confusion(&acc_before),
        per_class_after: iou_from_confusion(&acc_after),
        conversion_success_rate: successes as f64 / samples.len() as f64,
    })
}

pub struct GainPaths {
    pub json: PathBuf,
    pub plot: PathBuf,
}

/// Write `gain.json` and a paired-bar plot `gain.png` (one pair per class,
/// then the mean).
pub fn save_gain(dir: &Path, report: &GainReport) -> Result<GainPaths, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let json = dir.join("gain.json");
    let body = serde_json::to_string_pretty(report).map_err(|e| HarnessError::Artifact {
        path: json.display().to_string(),
        msg: e.to_string(),
    })?;
    std::fs::write(&json, body).map_err(|e| io_err(&json, e))?;
    let mut pairs: Vec<(f32, f32)> = report
        .per_class_before
        .iter()
        .zip(&report.per_class_after)
        .map(|(b, a)| (b.unwrap_or(0.0) as f32, a.unwrap_or(0.0) as f32))
        .collect();
    pairs.push((report.miou_before as f32, report.miou_after as f32));
    let plot = dir.join("gain.png");
    viz::bar_pairs(&pairs, 120)
        .save(&plot)
        .map_err(|e| HarnessError::Artifact {
            path: plot.display().to_string(),
            msg: e.to_string(),
        })?;
    Ok(GainPaths { json, plot })
}

/// Build a scene-disjoint mixed pool: a `fine_frac` fraction of scene
/// indices (at least one) takes the fine rendering, the rest take coarse.
/// Both inputs must render the same scenes in the same order, which is how
/// [`generate_corpus`] lays them out. Returns the pool and the chosen fine
/// indices (sorted).
pub fn mixed_style_pool(
    fine: &[Sample],
    coarse: &[Sample],
    fine_frac: f64,
    seed: u64,
    split: Split,
) -> Result<(Vec<Sample>, Vec<usize>), HarnessError> {
    if fine.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    if fine.len() != coarse.len() {
        return Err(HarnessError::Invalid(format!(
            "mixed pool needs paired renderings: {} fine vs {} coarse",
            fine.len(),
            coarse.len()
        )));
    }
    if !(0.0 < fine_frac && fine_frac < 1.0) {
        return Err(HarnessError::Invalid(format!(
            "fine_frac must be in (0, 1), got {fine_frac}"
        )));
    }
    let n = fine.len();
    let n_fine = ((n as f64 * fine_frac).round() as usize).clamp(1, n - 1);
    let mut rng = stream(seed, &format!("mixed-pool-{}", split.name()));
    // Partial Fisher-Yates: the first n_fine entries of the shuffled index
    // vector are the fine picks.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n_fine {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    let mut fine_idx: Vec<usize> = idx[..n_fine].to_vec();
    fine_idx.sort_unstable();
    let mut pool = Vec::with_capacity(n);
    let mut next_fine = fine_idx.iter().peekable();
    for i in 0..n {
        if next_fine.peek() == Some(&&i) {
            pool.push(fine[i].clone());
            next_fine.next();
        } else {
            pool.push(coarse[i].clone());
        }
    }
    Ok((pool, fine_idx))
}

/// Everything the distillation replica needs; [`DistillConfig::toy`] is the
/// desk-scale preset. `seed` re-rolls corpus geometry, architecture init,
/// and batch order together.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub fine_frac: f64,
    pub marker_amplitude: f32,
    pub dilation_radius: u32,
    pub merge_distance: f64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub probe_cfg: ProbeConfig,
    pub probe_tap: TapPoint,
    pub attack: AttackConfig,
    pub seed: u64,
}

impl DistillConfig {
    pub fn toy(seed: u64) -> Self {
        DistillConfig {
            n_images: 48,
            image_size: 48,
            fine_frac: 0.05,
            marker_amplitude: 0.01,
            dilation_radius: 2,
            merge_distance: 6.0,
            arch: ArchConfig {
                in_channels: 3,
                n_classes: 5,
                stages: 2,
                width: 8,
                seed: 0,
            },
            train: TrainConfig::default(),
            probe_cfg: ProbeConfig::default(),
            probe_tap: TapPoint::Bottleneck,
            attack: AttackConfig::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    pub seed: u64,
    pub fine_frac: f64,
    pub n_train: usize,
    pub n_fine_train: usize,
    pub probe_train_accuracy: f64,
    pub best_val_loss: f64,
    /// Gain of converting the fine test set toward the fine style.
    pub gain: GainReport,
}

/// Run the full distillation replica: generate a two-style corpus (fine 0,
/// coarse 1), train one model on a scene-disjoint `fine_frac` mix, fit a
/// probe on the balanced union of both train sets, and measure conversion
/// gain on the fine test split toward the fine style.
pub fn distillation_experiment(
    cfg: &DistillConfig,
) -> Result<(DistillReport, TrainedModel, Probe), HarnessError> {
    if !(0.0 < cfg.fine_frac && cfg.fine_frac < 1.0) {
        return Err(HarnessError::Invalid(format!(
            "fine_frac must be in (0, 1), got {}",
            cfg.fine_frac
        )));
    }
    let spec = CorpusSpec {
        n_images: cfg.n_images,
        image_size: cfg.image_size,
        styles: vec![
            StyleSpec::fine("fine").with_marker(cfg.marker_amplitude, 0.0),
            StyleSpec::coarse("coarse", cfg.dilation_radius, cfg.merge_distance)
                .with_marker(cfg.marker_amplitude, 90.0),
        ],
        seed: cfg.seed,
        train_frac: 0.7,
        val_frac: 0.15,
    };
    let corpora = generate_corpus(&spec)?;
    let (fine, coarse) = (&corpora[0], &corpora[1]);

    let (train_pool, fine_idx) =
        mixed_style_pool(&fine.train, &coarse.train, cfg.fine_frac, cfg.seed, Split::Train)?;
    let (val_pool, _) =
        mixed_style_pool(&fine.val, &coarse.val, cfg.fine_frac, cfg.seed, Split::Val)?;

    let mut arch = cfg.arch.clone();
    arch.seed = stream(cfg.seed, "distill-arch").gen();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = stream(cfg.seed, "distill-train").gen();
    let trained = train(&arch, &[&train_pool], &[&val_pool], &train_cfg)?;

    let probe_samples: Vec<&Sample> = fine.train.iter().chain(coarse.train.iter()).collect();
    let fit = train_probe(&trained.model, cfg.probe_tap, &probe_samples, &cfg.probe_cfg)?;

    let fine_test: Vec<&Sample> = fine.test.iter().collect();
    let gain = conversion_gain(&trained.model, &fit.probe, &fine_test, 0, &cfg.attack)?;

    let report = DistillReport {
        seed: cfg.seed,
        fine_frac: cfg.fine_frac,
        n_train: train_pool.len(),
        n_fine_train: fine_idx.len(),
        probe_train_accuracy: fit.train_accuracy,
        best_val_loss: trained.best_val_loss,
        gain,
    };
    Ok((report, trained, fit.probe))
}
