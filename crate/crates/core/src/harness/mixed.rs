//! Per-lesion targeted conversion: each lesion class gets its own
//! conversion target (a style, or none), the model predicts under that
//! class's assignment, and the class is scored by pooled AUC-PR of its
//! probability channel. Targets are chosen on a validation split by the
//! same machinery, replacing "no conversion" only on a strict win.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attack::{convert, AttackConfig};
use crate::corpus::Sample;
use crate::probe::Probe;
use crate::segcore::{auc_pr, SegModel, CLASS_NAMES};

/// Conversion assignment for one lesion class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassTarget {
    NoConversion,
    Style(u16),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedRow {
    pub class_id: u8,
    pub class_name: String,
    pub target: ClassTarget,
    /// Pooled AUC-PR under the assignment; `None` when the class has no
    /// positive pixels in the set (depends only on ground truth).
    pub auc_pr: Option<f64>,
    /// Same class, no conversion, for the paired comparison.
    pub auc_pr_unconverted: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedReport {
    pub rows: Vec<MixedRow>,
    /// Mean over classes that have positives.
    pub mean_auc: f64,
    pub mean_auc_unconverted: f64,
    pub n: usize,
}

/// Class-probability maps for every sample: plain predictions plus one
/// converted prediction per distinct target style.
struct PredCache {
    plain: Vec<ndarray::Array3<f32>>,
    by_style: BTreeMap<u16, Vec<ndarray::Array3<f32>>>,
}

impl PredCache {
    fn build(
        model: &SegModel<f32>,
        probe: &Probe,
        samples: &[&Sample],
        styles: &[u16],
        cfg: &AttackConfig,
    ) -> Result<PredCache, HarnessError> {
        let mut plain = Vec::with_capacity(samples.len());
        for s in samples {
            plain.push(model.predict_probs(&s.image)?);
        }
        let mut by_style = BTreeMap::new();
        for &t in styles {
            let mut preds = Vec::with_capacity(samples.len());
            for s in samples {
                let outcome = convert(model, probe, s, t as usize, cfg)?;
                preds.push(model.predict_probs(&outcome.x_adv)?);
            }
            by_style.insert(t, preds);
        }
        Ok(PredCache { plain, by_style })
    }

    fn preds(&self, target: ClassTarget) -> &[ndarray::Array3<f32>] {
        match target {
            ClassTarget::NoConversion => &self.plain,
            ClassTarget::Style(t) => &self.by_style[&t],
        }
    }
}

/// Pooled AUC-PR of class channel `c` over all samples' predictions.
fn pooled_auc(preds: &[ndarray::Array3<f32>], samples: &[&Sample], c: u8) -> Option<f64> {
    let mut scores = Vec::new();
    let mut pos = Vec::new();
    for (p, s) in preds.iter().zip(samples) {
        let ch = p.index_axis(ndarray::Axis(0), c as usize);
        scores.extend(ch.iter().map(|&v| v as f64));
        pos.extend(s.mask.iter().map(|&g| g == c));
    }
    auc_pr(&scores, &pos)
}

fn check_targets(targets: &[ClassTarget], n_classes: usize, n_styles: usize) -> Result<(), HarnessError> {
    if targets.len() != n_classes - 1 {
        return Err(HarnessError::Invalid(format!(
            "need one target per lesion class ({}), got {}",
            n_classes - 1,
            targets.len()
        )));
    }
    for t in targets {
        if let ClassTarget::Style(s) = t {
            if *s as usize >= n_styles {
                return Err(HarnessError::OutOfRange {
                    what: "class target style",
                    got: *s as usize,
                    limit: n_styles,
                });
            }
        }
    }
    Ok(())
}

/// Evaluate per-lesion targeted conversion: class `c` (1-based lesion
/// classes; background is never converted) is scored from the prediction
/// produced under `per_class_targets[c-1]`.
pub fn mixed_lesion_eval(
    model: &SegModel<f32>,
    probe: &Probe,
    samples: &[&Sample],
    per_class_targets: &[ClassTarget],
    cfg: &AttackConfig,
) -> Result<MixedReport, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    check_targets(per_class_targets, model.cfg.n_classes, probe.n_styles)?;
    probe.check_backbone(model)?;
    let mut styles: Vec<u16> = per_class_targets
        .iter()
        .filter_map(|t| match t {
            ClassTarget::Style(s) => Some(*s),
            ClassTarget::NoConversion => None,
        })
        .collect();
    styles.sort_unstable();
    styles.dedup();
    let cache = PredCache::build(model, probe, samples, &styles, cfg)?;

    let mut rows = Vec::new();
    for (i, &target) in per_class_targets.iter().enumerate() {
        let c = (i + 1) as u8;
        rows.push(MixedRow {
            class_id: c,
            class_name: CLASS_NAMES[c as usize].to_string(),
            target,
            auc_pr: pooled_auc(cache.preds(target), samples, c),
            auc_pr_unconverted: pooled_auc(&cache.plain, samples, c),
        });
    }
    let present: Vec<&MixedRow> = rows.iter().filter(|r| r.auc_pr.is_some()).collect();
    if present.is_empty() {
        return Err(HarnessError::Invalid(
            "no lesion class has positive pixels in this set".into(),
        ));
    }
    let mean = |f: fn(&MixedRow) -> Option<f64>| {
        present.iter().map(|r| f(r).expect("present")).sum::<f64>() / present.len() as f64
    };
    Ok(MixedReport {
        mean_auc: mean(|r| r.auc_pr),
        mean_auc_unconverted: mean(|r| r.auc_pr_unconverted),
        n: samples.len(),
        rows,
    })
}

/// Choose per-class targets on a validation split: for each lesion class,
/// keep "no conversion" unless some style's pooled AUC-PR is strictly
/// greater.
pub fn select_targets(
    model: &SegModel<f32>,
    probe: &Probe,
    val_samples: &[&Sample],
    cfg: &AttackConfig,
) -> Result<Vec<ClassTarget>, HarnessError> {
    if val_samples.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    probe.check_backbone(model)?;
    let styles: Vec<u16> = (0..probe.n_styles as u16).collect();
    let cache = PredCache::build(model, probe, val_samples, &styles, cfg)?;
    let mut targets = Vec::new();
    for c in 1..model.cfg.n_classes as u8 {
        let mut best_target = ClassTarget::NoConversion;
        let mut best = pooled_auc(&cache.plain, val_samples, c);
        for &t in &styles {
            let auc = pooled_auc(&cache.by_style[&t], val_samples, c);
            let wins = match (auc, best) {
                (Some(a), Some(b)) => a > b,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if wins {
                best = auc;
                best_target = ClassTarget::Style(t);
            }
        }
        targets.push(best_target);
    }
    Ok(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::segcore::{ArchConfig, TapPoint};
    use ndarray::{Array1, Array2, Array3};
    use rand::Rng;

    fn fixture(seed: u64, n: usize) -> (SegModel<f32>, Probe, Vec<Sample>) {
        let model = SegModel::<f32>::init(ArchConfig {
            in_channels: 3,
            n_classes: 5,
            stages: 2,
            width: 2,
            seed,
        });
        let mut rng = stream(seed, "mixed-fixture");
        let probe = Probe {
            tap: TapPoint::Bottleneck,
            w: Array2::from_shape_fn((2, 8), |_| rng.gen_range(-0.5..0.5)),
            b: Array1::zeros(2),
            backbone_checksum: model.weights_checksum(),
            n_styles: 2,
        };
        let samples = (0..n)
            .map(|k| Sample {
                image: Array3::from_shape_fn((3, 16, 16), |_| {
                    (rng.gen_range(0.0..1.0f32) * 255.0).round() / 255.0
                }),
                mask: Array2::from_shape_fn((16, 16), |_| rng.gen_range(0u8..5)),
                origin: (k % 2) as u16,
                severity: None,
                sample_id: format!("m{k}"),
            })
            .collect();
        (model, probe, samples)
    }

    /// All classes assigned "no conversion" must reproduce the plain
    /// evaluation exactly.
    #[test]
    fn all_no_conversion_equals_plain_eval() {
        let (model, probe, samples) = fixture(21, 3);
        let refs: Vec<&Sample> = samples.iter().collect();
        let targets = vec![ClassTarget::NoConversion; 4];
        let rep =
            mixed_lesion_eval(&model, &probe, &refs, &targets, &AttackConfig::default()).unwrap();
        assert_eq!(rep.mean_auc.to_bits(), rep.mean_auc_unconverted.to_bits());
        for r in &rep.rows {
            assert_eq!(r.auc_pr, r.auc_pr_unconverted);
        }
    }

    #[test]
    fn mixed_eval_rejects_bad_targets() {
        let (model, probe, samples) = fixture(22, 2);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = AttackConfig::default();
        assert!(matches!(
            mixed_lesion_eval(&model, &probe, &refs, &[ClassTarget::NoConversion; 3], &cfg),
            Err(HarnessError::Invalid(_))
        ));
        let bad = vec![
            ClassTarget::Style(2),
            ClassTarget::NoConversion,
            ClassTarget::NoConversion,
            ClassTarget::NoConversion,
        ];
        assert!(matches!(
            mixed_lesion_eval(&model, &probe, &refs, &bad, &cfg),
            Err(HarnessError::OutOfRange { .. })
        ));
        assert!(matches!(
            mixed_lesion_eval(&model, &probe, &[], &[ClassTarget::NoConversion; 4], &cfg),
            Err(HarnessError::EmptySet)
        ));
    }

    /// A class absent from every mask scores None and is excluded from the
    /// mean without poisoning it.
    #[test]
    fn absent_class_scores_none() {
        let (model, probe, mut samples) = fixture(23, 3);
        for s in &mut samples {
            s.mask.mapv_inplace(|v| if v == 4 { 0 } else { v });
        }
        let refs: Vec<&Sample> = samples.iter().collect();
        let targets = vec![ClassTarget::NoConversion; 4];
        let rep =
            mixed_lesion_eval(&model, &probe, &refs, &targets, &AttackConfig::default()).unwrap();
        assert!(rep.rows[3].auc_pr.is_none());
        assert!(rep.rows[..3].iter().all(|r| r.auc_pr.is_some()));
        assert!(rep.mean_auc.is_finite());
    }

    #[test]
    fn select_targets_is_deterministic_and_valid() {
        let (model, probe, samples) = fixture(24, 3);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = AttackConfig {
            eps: 5e-3,
            steps: 2,
            radius: 5.0 / 255.0,
        };
        let a = select_targets(&model, &probe, &refs, &cfg).unwrap();
        let b = select_targets(&model, &probe, &refs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        check_targets(&a, 5, probe.n_styles).unwrap();
        // chosen targets evaluate without error on a disjoint set
        let (_, _, more) = fixture(25, 2);
        let more_refs: Vec<&Sample> = more.iter().collect();
        let _ = mixed_lesion_eval(&model, &probe, &more_refs, &a, &cfg).unwrap();
    }

    /// Selection never picks a style that strictly loses to no-conversion:
    /// with steps = 0 every conversion is the identity, all candidates tie,
    /// and the tie must resolve to NoConversion.
    #[test]
    fn ties_resolve_to_no_conversion() {
        let (model, probe, samples) = fixture(26, 3);
        let refs: Vec<&Sample> = samples.iter().collect();
        let cfg = AttackConfig {
            eps: 5e-3,
            steps: 0,
            radius: 5.0 / 255.0,
        };
        let targets = select_targets(&model, &probe, &refs, &cfg).unwrap();
        assert!(targets.iter().all(|t| *t == ClassTarget::NoConversion));
    }
}
