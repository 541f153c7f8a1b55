//! Continuous style conversion: convex mixing between an image and its
//! converted counterpart, attacks against a blended objective, and
//! perturbation-sampling uncertainty maps along the mixing path.
//!
//! Two interpolation modes exist. Input-space mixes pixels directly,
//!
//! ```text
//! x_inter = (1 − α) · x + α · (x→j)
//! ```
//!
//! and is the default. Loss-space re-runs PGD under the blended objective
//! `(1−α)·L(·,i) + α·L(·,j)`, i.e. cross-entropy against the soft target
//! distribution placing mass `1−α` on origin `i` and `α` on `j`; at
//! α ∈ {0, 1} that distribution is exactly one-hot, so the endpoints
//! reproduce the plain targeted attack bit for bit.
//!
//! Uncertainty maps draw `N_A` mixing weights α ~ U(0,1) (seeded, all up
//! front), segment each mixture, and report the per-pixel per-class
//! *population* standard deviation of the probability maps together with
//! their mean. Per-pixel samples are sorted before the two-pass reduction,
//! so the aggregate is exactly independent of evaluation order — samples
//! could be segmented concurrently without changing a single bit — and
//! pixels where all samples agree get σ = 0.0 exactly, no epsilon.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{pgd_attack, pgd_attack_soft, AttackConfig, AttackError, AttackResult};
use crate::corpus::morph::dilate;
use crate::nn::NdFloat;
use crate::probe::{Probe, ProbeError};
use crate::rng::stream;
use crate::segcore::{argmax_mask, pool_spatial, SegError, SegModel};
use rand::Rng;

mod persist;
pub use persist::{load_sigma_plane, save_points, save_sweep, save_uncertainty, SweepPaths, UncertaintyMeta, UncertaintyPaths};

/// Default Monte-Carlo sample count for [`uncertainty_map`].
pub const DEFAULT_N_A: usize = 20;

#[derive(Debug, Error)]
pub enum StyleOpsError {
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("mixing weight {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("mixing weights must be sorted ascending")]
    UnsortedAlphas,
    #[error("mixing weight list is empty")]
    EmptyAlphas,
    #[error("origin pair ({i}, {j}) invalid for {n_styles} styles")]
    BadPair {
        i: usize,
        j: usize,
        n_styles: usize,
    },
    #[error("loss-space interpolation needs an origin pair")]
    MissingOrigins,
    #[error("uncertainty sampling needs at least one draw")]
    NoSamples,
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize, usize),
        b: (usize, usize, usize),
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Artifact { path: String, msg: String },
}

/// How to travel between two styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMode {
    /// Mix the clean image and its conversion pixelwise (the default).
    InputSpace,
    /// Re-run the attack against a blended cross-entropy objective.
    LossSpace,
}

/// Scalar description of one interpolation request; the endpoint images
/// travel as explicit arguments to the operations below.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InterpolationSpec {
    /// Mixing weight toward the converted endpoint.
    pub alpha: f64,
    pub mode: InterpMode,
    /// Source/target origin pair — required by loss-space mode.
    pub origins: Option<(u16, u16)>,
}

impl InterpolationSpec {
    pub fn validate(&self, n_styles: usize) -> Result<(), StyleOpsError> {
        check_alpha(self.alpha)?;
        if self.mode == InterpMode::LossSpace {
            let (i, j) = self.origins.ok_or(StyleOpsError::MissingOrigins)?;
            check_pair(i as usize, j as usize, n_styles)?;
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<(), StyleOpsError> {
    // NaN fails the range test too
    if !(0.0..=1.0).contains(&alpha) {
        return Err(StyleOpsError::BadAlpha(alpha));
    }
    Ok(())
}

fn check_pair(i: usize, j: usize, n_styles: usize) -> Result<(), StyleOpsError> {
    if i == j || i >= n_styles || j >= n_styles {
        return Err(StyleOpsError::BadPair { i, j, n_styles });
    }
    Ok(())
}

/// Pixelwise convex combination `(1−α)·x + α·x_to_j`.
///
/// α = 0 and α = 1 return exact clones of the corresponding endpoint.
/// Interior values are clamped into `[min(x, x_to_j), max(x, x_to_j)]`
/// per pixel, so convexity — and with it `‖x_inter − x‖∞ ≤ ‖x_to_j − x‖∞`
/// — holds exactly rather than up to rounding.
pub fn interpolate_input<F: NdFloat>(
    x: &Array3<F>,
    x_to_j: &Array3<F>,
    alpha: f64,
) -> Result<Array3<F>, StyleOpsError> {
    check_alpha(alpha)?;
    if x.dim() != x_to_j.dim() {
        return Err(StyleOpsError::ShapeMismatch {
            a: x.dim(),
            b: x_to_j.dim(),
        });
    }
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    if alpha == 1.0 {
        return Ok(x_to_j.clone());
    }
    let a = F::from(alpha).unwrap();
    let na = F::one() - a;
    let mut out = Array3::zeros(x.dim());
    ndarray::Zip::from(&mut out)
        .and(x)
        .and(x_to_j)
        .for_each(|o, &u, &v| {
            *o = (na * u + a * v).max(u.min(v)).min(u.max(v));
        });
    Ok(out)
}

/// PGD against the blended objective `(1−α)·L(·,i) + α·L(·,j)`.
///
/// Delegates to [`pgd_attack_soft`] with the two-point target distribution,
/// so α = 0 is bit-identical to a plain attack toward `i` and α = 1 toward
/// `j`. No backbone check here — this is inner math like the rest of the
/// attack layer; user-facing callers go through checked entry points.
pub fn interpolate_loss_attack<F: NdFloat>(
    model: &SegModel<F>,
    probe: &Probe,
    x: &Array3<F>,
    i: usize,
    j: usize,
    alpha: f64,
    cfg: &AttackConfig,
) -> Result<AttackResult<F>, StyleOpsError> {
    check_alpha(alpha)?;
    check_pair(i, j, probe.n_styles)?;
    let mut q = vec![0.0; probe.n_styles];
    q[i] = 1.0 - alpha;
    q[j] = alpha;
    Ok(pgd_attack_soft(model, probe, x, &q, cfg)?)
}

/// One rung of an interpolation sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub alpha: f64,
    pub x_inter: Array3<f32>,
    /// Hard segmentation of `x_inter`.
    pub mask: Array2<u8>,
    /// Predicted pixel count per class id.
    pub class_areas: Vec<usize>,
    /// Probe softmax over origins at this rung.
    pub probe_dist: Vec<f64>,
}

/// An input-space sweep: the conversion toward `target` computed once,
/// then one segmentation per requested mixing weight.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub target: u16,
    /// The underlying attack; its `x_adv` is in canonical `x + δ` form,
    /// byte-identical to what conversion persistence reconstructs.
    pub attack: AttackResult<f32>,
    pub points: Vec<SweepPoint>,
}

/// Sweep the input-space path from `x` to its conversion toward style `j`.
///
/// `alphas` must be non-empty, sorted ascending, and within `[0, 1]`.
/// Checks the probe/backbone pairing once up front. A rung at α = 0 segments
/// the clean bytes exactly; a rung at α = 1 segments the canonical converted
/// image exactly.
pub fn interpolation_sweep(
    model: &SegModel<f32>,
    probe: &Probe,
    x: &Array3<f32>,
    j: usize,
    alphas: &[f64],
    cfg: &AttackConfig,
) -> Result<SweepResult, StyleOpsError> {
    if alphas.is_empty() {
        return Err(StyleOpsError::EmptyAlphas);
    }
    for &a in alphas {
        check_alpha(a)?;
    }
    if alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(StyleOpsError::UnsortedAlphas);
    }
    probe.check_backbone(model)?;

    let mut res = pgd_attack(model, probe, x, j, cfg)?;
    // canonical form: the exact bytes `x + δ` that conversion artifacts
    // round-trip through
    let delta = &res.x_adv - x;
    res.x_adv = x + &delta;

    let n_classes = model.cfg.n_classes;
    let mut points = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let x_inter = interpolate_input(x, &res.x_adv, alpha)?;
        let cache = model.forward_cached(&x_inter, None, false)?;
        let probs = cache.probs.as_ref().expect("full forward has probs");
        let mask = argmax_mask(probs);
        let mut class_areas = vec![0usize; n_classes];
        for &m in mask.iter() {
            class_areas[m as usize] += 1;
        }
        let t = cache.tap_value(probe.tap).ok_or(SegError::TapNotCached {
            name: probe.tap.name(),
        })?;
        let f = pool_spatial(t).mapv(|v| v as f64);
        let (_, dist) = probe.predict_features(&f);
        points.push(SweepPoint {
            alpha,
            x_inter,
            mask,
            class_areas,
            probe_dist: dist.to_vec(),
        });
    }
    Ok(SweepResult {
        target: j as u16,
        attack: res,
        points,
    })
}

/// Monte-Carlo uncertainty along the mixing path toward one target style.
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    /// Per-class per-pixel population standard deviation `(n_classes, h, w)`.
    pub sigma: Array3<f32>,
    /// Per-class per-pixel mean probability.
    pub mean: Array3<f32>,
    pub n_a: usize,
    pub target: u16,
    pub seed: u64,
    /// The mixing weights actually drawn, in draw order.
    pub alphas: Vec<f64>,
}

/// Mean and population standard deviation across probability maps,
/// per pixel and class.
///
/// Each pixel's samples are sorted before a two-pass f64 reduction, which
/// buys two exact properties: the output is invariant to sample order, and
/// agreement across all samples yields σ = 0.0 exactly (any run of equal
/// values sums to an exact multiple, so the mean is the value itself and
/// every squared deviation is a true zero).
pub fn aggregate_samples(
    samples: &[Array3<f32>],
) -> Result<(Array3<f32>, Array3<f32>), StyleOpsError> {
    let first = samples.first().ok_or(StyleOpsError::NoSamples)?;
    let dim = first.dim();
    for s in samples {
        if s.dim() != dim {
            return Err(StyleOpsError::ShapeMismatch { a: dim, b: s.dim() });
        }
    }
    let n = samples.len();
    let inv_n = 1.0 / n as f64;
    let mut mean = Array3::<f32>::zeros(dim);
    let mut sigma = Array3::<f32>::zeros(dim);
    let mut vals = vec![0f32; n];
    for c in 0..dim.0 {
        for y in 0..dim.1 {
            for x in 0..dim.2 {
                for (k, s) in samples.iter().enumerate() {
                    vals[k] = s[[c, y, x]];
                }
                vals.sort_unstable_by(f32::total_cmp);
                let m = vals.iter().map(|&v| v as f64).sum::<f64>() * inv_n;
                let var = vals
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - m;
                        d * d
                    })
                    .sum::<f64>()
                    * inv_n;
                mean[[c, y, x]] = m as f32;
                sigma[[c, y, x]] = var.sqrt() as f32;
            }
        }
    }
    Ok((mean, sigma))
}

/// Segment every mixture `(1−α)·x + α·x_to_j` with a caller-supplied
/// segmenter and aggregate. The seam tests need: synthetic responders go
/// through the exact production path.
pub fn uncertainty_core<S>(
    x: &Array3<f32>,
    x_to_j: &Array3<f32>,
    alphas: &[f64],
    mut segment: S,
) -> Result<(Array3<f32>, Array3<f32>), StyleOpsError>
where
    S: FnMut(&Array3<f32>) -> Result<Array3<f32>, StyleOpsError>,
{
    if alphas.is_empty() {
        return Err(StyleOpsError::NoSamples);
    }
    let mut samples = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let xa = interpolate_input(x, x_to_j, a)?;
        samples.push(segment(&xa)?);
    }
    aggregate_samples(&samples)
}

/// Full uncertainty pipeline: convert `x` toward style `j`, draw `n_a`
/// mixing weights α ~ U(0,1) from a stream keyed by `seed` (all up front),
/// segment each mixture, and aggregate.
pub fn uncertainty_map(
    model: &SegModel<f32>,
    probe: &Probe,
    x: &Array3<f32>,
    j: usize,
    n_a: usize,
    seed: u64,
    cfg: &AttackConfig,
) -> Result<UncertaintyMap, StyleOpsError> {
    if n_a == 0 {
        return Err(StyleOpsError::NoSamples);
    }
    probe.check_backbone(model)?;
    let res = pgd_attack(model, probe, x, j, cfg)?;
    let delta = &res.x_adv - x;
    let x_to_j = x + &delta;

    let mut rng = stream(seed, "uncertainty-alphas");
    let alphas: Vec<f64> = (0..n_a).map(|_| rng.gen::<f64>()).collect();
    let (mean, sigma) = uncertainty_core(x, &x_to_j, &alphas, |xi| {
        Ok(model.predict_probs(xi)?)
    })?;
    Ok(UncertaintyMap {
        sigma,
        mean,
        n_a,
        target: j as u16,
        seed,
        alphas,
    })
}

/// Pixels within `radius` (Euclidean) of a lesion/background boundary.
/// A boundary pixel is one whose 4-neighborhood crosses the foreground
/// (`mask > 0`) / background divide.
pub fn boundary_band(mask: &Array2<u8>, radius: u32) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut boundary = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let fg = mask[[y, x]] > 0;
            let crossing = (y > 0 && (mask[[y - 1, x]] > 0) != fg)
                || (x > 0 && (mask[[y, x - 1]] > 0) != fg)
                || (y + 1 < h && (mask[[y + 1, x]] > 0) != fg)
                || (x + 1 < w && (mask[[y, x + 1]] > 0) != fg);
            if crossing {
                boundary[[y, x]] = true;
            }
        }
    }
    dilate(&boundary, radius)
}

/// Mean per-pixel total σ (summed over classes) inside the boundary band
/// versus over background pixels away from it. `None` when either region
/// is empty (e.g. a lesion-free mask).
pub fn band_sigma_stats(
    sigma: &Array3<f32>,
    mask: &Array2<u8>,
    radius: u32,
) -> Option<(f64, f64)> {
    let band = boundary_band(mask, radius);
    let (c, h, w) = sigma.dim();
    assert_eq!((h, w), mask.dim(), "σ and mask must share spatial dims");
    let total = |y: usize, x: usize| -> f64 {
        (0..c).map(|k| sigma[[k, y, x]] as f64).sum()
    };
    let (mut band_sum, mut band_n) = (0.0, 0usize);
    let (mut bg_sum, mut bg_n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if band[[y, x]] {
                band_sum += total(y, x);
                band_n += 1;
            } else if mask[[y, x]] == 0 {
                bg_sum += total(y, x);
                bg_n += 1;
            }
        }
    }
    if band_n == 0 || bg_n == 0 {
        return None;
    }
    Some((band_sum / band_n as f64, bg_sum / bg_n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::segcore::{ArchConfig, TapPoint};
    use ndarray::{Array1, Array2};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn tiny_model(seed: u64) -> SegModel<f32> {
        SegModel::<f32>::init(ArchConfig {
            in_channels: 3,
            n_classes: 5,
            stages: 2,
            width: 2,
            seed,
        })
    }

    /// Hand-built probe whose checksum matches `model` (bottleneck tap,
    /// 2 << 2 = 8 channels).
    fn probe_for(model: &SegModel<f32>, n_styles: usize, seed: u64) -> Probe {
        let mut rng = stream(seed, "styleops-probe");
        Probe {
            tap: TapPoint::Bottleneck,
            w: ndarray::Array2::from_shape_fn((n_styles, 8), |_| rng.gen_range(-0.8..0.8)),
            b: Array1::from_shape_fn(n_styles, |_| rng.gen_range(-0.2..0.2)),
            backbone_checksum: model.weights_checksum(),
            n_styles,
        }
    }

    fn rand_image(rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |_| {
            (rng.gen_range(0.0..1.0f32) * 255.0).round() / 255.0
        })
    }

    fn bits_equal(a: &Array3<f32>, b: &Array3<f32>) -> bool {
        a.dim() == b.dim()
            && a.iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn interpolate_endpoints_are_exact_clones() {
        let mut rng = stream(40, "interp-endpoints");
        let x = rand_image(&mut rng, 9, 7);
        let y = rand_image(&mut rng, 9, 7);
        assert!(bits_equal(&interpolate_input(&x, &y, 0.0).unwrap(), &x));
        assert!(bits_equal(&interpolate_input(&x, &y, 1.0).unwrap(), &y));
    }

    #[test]
    fn interpolate_midpoint_arithmetic() {
        let x = Array3::<f64>::from_elem((1, 2, 2), 0.2);
        let y = Array3::<f64>::from_elem((1, 2, 2), 0.4);
        let m = interpolate_input(&x, &y, 0.5).unwrap();
        for &v in m.iter() {
            assert!((v - 0.3).abs() < 1e-12, "midpoint {v}");
        }
    }

    #[test]
    fn interpolate_rejects_bad_alpha_and_shape() {
        let x = Array3::<f32>::zeros((1, 2, 2));
        let y = Array3::<f32>::zeros((1, 2, 2));
        for bad in [-0.01, 1.01, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                interpolate_input(&x, &y, bad),
                Err(StyleOpsError::BadAlpha(_))
            ));
        }
        let z = Array3::<f32>::zeros((1, 3, 2));
        assert!(matches!(
            interpolate_input(&x, &z, 0.5),
            Err(StyleOpsError::ShapeMismatch { .. })
        ));
    }

    /// Convexity and the attack-ball bound hold exactly (the combination is
    /// clamped per pixel), across random pairs and an α grid.
    #[test]
    fn interpolate_convexity_and_ball_invariants() {
        let mut rng = stream(41, "interp-invariants");
        for _ in 0..10 {
            let x = rand_image(&mut rng, 6, 6);
            let mut y = x.clone();
            // y = x plus a bounded perturbation, like a real conversion
            for v in y.iter_mut() {
                *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
            }
            let ball: f32 = x
                .iter()
                .zip(y.iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(0.0, f32::max);
            for k in 0..=10 {
                let alpha = k as f64 / 10.0;
                let m = interpolate_input(&x, &y, alpha).unwrap();
                for ((&u, &v), &o) in x.iter().zip(y.iter()).zip(m.iter()) {
                    assert!(o >= u.min(v) && o <= u.max(v), "convexity at α={alpha}");
                    assert!((o - u).abs() <= ball, "ball bound at α={alpha}");
                }
            }
        }
    }

    #[test]
    fn loss_attack_endpoints_match_plain_attacks_bit_for_bit() {
        let model = tiny_model(42);
        let probe = probe_for(&model, 3, 42);
        let mut rng = stream(42, "loss-endpoints");
        let x = rand_image(&mut rng, 16, 16);
        let cfg = AttackConfig::default();

        let plain_i = pgd_attack(&model, &probe, &x, 0, &cfg).unwrap();
        let blend0 = interpolate_loss_attack(&model, &probe, &x, 0, 2, 0.0, &cfg).unwrap();
        assert!(bits_equal(&plain_i.x_adv, &blend0.x_adv));
        assert_eq!(
            plain_i.trace.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(),
            blend0.trace.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
        );

        let plain_j = pgd_attack(&model, &probe, &x, 2, &cfg).unwrap();
        let blend1 = interpolate_loss_attack(&model, &probe, &x, 0, 2, 1.0, &cfg).unwrap();
        assert!(bits_equal(&plain_j.x_adv, &blend1.x_adv));
        assert_eq!(plain_j.final_pred, blend1.final_pred);
    }

    #[test]
    fn loss_attack_rejects_degenerate_pairs() {
        let model = tiny_model(43);
        let probe = probe_for(&model, 3, 43);
        let x = Array3::<f32>::from_elem((3, 16, 16), 0.5);
        let cfg = AttackConfig::default();
        assert!(matches!(
            interpolate_loss_attack(&model, &probe, &x, 1, 1, 0.5, &cfg),
            Err(StyleOpsError::BadPair { .. })
        ));
        assert!(matches!(
            interpolate_loss_attack(&model, &probe, &x, 0, 3, 0.5, &cfg),
            Err(StyleOpsError::BadPair { .. })
        ));
        assert!(matches!(
            interpolate_loss_attack(&model, &probe, &x, 0, 1, 1.5, &cfg),
            Err(StyleOpsError::BadAlpha(_))
        ));
    }

    /// Blended attack at α = 0.5 moves probe mass onto the two blended
    /// origins and off everything else, and the blend loss descends —
    /// checked on three seeds. (That the pair ends up holding the two
    /// *largest* masses needs a trained backbone; the integration suite
    /// covers it.)
    #[test]
    fn loss_attack_midpoint_shifts_mass_onto_the_pair() {
        for seed in [7u64, 8, 9] {
            let model = tiny_model(seed);
            let probe = probe_for(&model, 3, seed);
            let mut rng = stream(seed, "loss-midpoint");
            let x = rand_image(&mut rng, 16, 16);
            let cfg = AttackConfig {
                eps: 8e-3,
                steps: 25,
                radius: 0.2,
            };
            let (_, before) = probe.predict(&model, &x).unwrap();
            let res = interpolate_loss_attack(&model, &probe, &x, 1, 2, 0.5, &cfg).unwrap();
            let (_, after) = probe.predict(&model, &res.x_adv).unwrap();
            assert!(
                after[1] + after[2] > before[1] + before[2],
                "seed {seed}: pair mass {} -> {}",
                before[1] + before[2],
                after[1] + after[2]
            );
            assert!(after[0] < before[0], "seed {seed}: off-pair mass grew");
            let first = res.trace.first().unwrap().loss;
            let last = res.trace.last().unwrap().loss;
            assert!(last < first, "seed {seed}: blend loss {first} -> {last}");
        }
    }

    #[test]
    fn sweep_validates_inputs() {
        let model = tiny_model(44);
        let probe = probe_for(&model, 2, 44);
        let x = Array3::<f32>::from_elem((3, 16, 16), 0.5);
        let cfg = AttackConfig::default();
        assert!(matches!(
            interpolation_sweep(&model, &probe, &x, 1, &[], &cfg),
            Err(StyleOpsError::EmptyAlphas)
        ));
        assert!(matches!(
            interpolation_sweep(&model, &probe, &x, 1, &[0.5, 0.2], &cfg),
            Err(StyleOpsError::UnsortedAlphas)
        ));
        assert!(matches!(
            interpolation_sweep(&model, &probe, &x, 1, &[-0.1, 0.5], &cfg),
            Err(StyleOpsError::BadAlpha(_))
        ));
        let mut stale = probe_for(&model, 2, 44);
        stale.backbone_checksum = "something-else".into();
        assert!(matches!(
            interpolation_sweep(&model, &stale, &x, 1, &[0.0, 1.0], &cfg),
            Err(StyleOpsError::Probe(ProbeError::BackboneMismatch { .. }))
        ));
    }

    #[test]
    fn sweep_endpoints_reproduce_clean_and_converted_predictions() {
        let model = tiny_model(45);
        let probe = probe_for(&model, 2, 45);
        let mut rng = stream(45, "sweep-endpoints");
        let x = rand_image(&mut rng, 16, 16);
        let cfg = AttackConfig::default();
        let sweep =
            interpolation_sweep(&model, &probe, &x, 1, &[0.0, 0.25, 0.5, 0.75, 1.0], &cfg)
                .unwrap();

        assert_eq!(sweep.points.len(), 5);
        assert!(bits_equal(&sweep.points[0].x_inter, &x));
        assert!(bits_equal(&sweep.points[4].x_inter, &sweep.attack.x_adv));
        assert_eq!(sweep.points[0].mask, model.predict_mask(&x).unwrap());
        assert_eq!(
            sweep.points[4].mask,
            model.predict_mask(&sweep.attack.x_adv).unwrap()
        );
        for p in &sweep.points {
            assert_eq!(p.class_areas.iter().sum::<usize>(), 16 * 16);
            assert_eq!(p.probe_dist.len(), 2);
            let s: f64 = p.probe_dist.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // canonical x_adv: re-deriving clean + delta is a no-op
        let delta = &sweep.attack.x_adv - &x;
        assert!(bits_equal(&(&x + &delta), &sweep.attack.x_adv));
    }

    #[test]
    fn aggregate_rejects_empty_and_mismatched() {
        assert!(matches!(
            aggregate_samples(&[]),
            Err(StyleOpsError::NoSamples)
        ));
        let a = Array3::<f32>::zeros((2, 2, 2));
        let b = Array3::<f32>::zeros((2, 3, 2));
        assert!(matches!(
            aggregate_samples(&[a, b]),
            Err(StyleOpsError::ShapeMismatch { .. })
        ));
    }

    /// Agreement produces exact zeros — per pixel, not just when whole maps
    /// coincide.
    #[test]
    fn sigma_is_exactly_zero_wherever_samples_agree() {
        let mut rng = stream(46, "sigma-zero");
        let mut samples = Vec::new();
        for k in 0..7 {
            let mut s = Array3::<f32>::from_elem((2, 3, 3), 0.137);
            // one pixel varies, everything else agrees
            s[[1, 2, 2]] = 0.1 + 0.05 * k as f32 + rng.gen_range(0.0..0.01);
            samples.push(s);
        }
        let (mean, sigma) = aggregate_samples(&samples).unwrap();
        for (idx, &v) in sigma.indexed_iter() {
            if idx == (1, 2, 2) {
                assert!(v > 0.0);
            } else {
                assert_eq!(v.to_bits(), 0.0f32.to_bits(), "σ at {idx:?}");
            }
        }
        assert_eq!(mean[[0, 0, 0]].to_bits(), 0.137f32.to_bits());
    }

    #[test]
    fn single_sample_sigma_is_zero() {
        let mut rng = stream(47, "sigma-single");
        let s = Array3::<f32>::from_shape_fn((3, 4, 4), |_| rng.gen_range(0.0..1.0));
        let (mean, sigma) = aggregate_samples(std::slice::from_ref(&s)).unwrap();
        assert!(sigma.iter().all(|&v| v.to_bits() == 0.0f32.to_bits()));
        assert!(bits_equal(&mean, &s));
    }

    /// Monte-Carlo oracle: a responder whose probability equals α at one
    /// pixel must recover the U(0,1) population std 1/√12 ≈ 0.2887.
    #[test]
    fn linear_responder_hits_uniform_std() {
        let x = Array3::<f32>::zeros((3, 1, 1));
        let y = Array3::<f32>::ones((3, 1, 1));
        let mut rng = stream(48, "sigma-uniform");
        let alphas: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let (mean, sigma) = uncertainty_core(&x, &y, &alphas, |xi| {
            let a = xi[[0, 0, 0]];
            let mut p = Array3::<f32>::zeros((2, 1, 1));
            p[[0, 0, 0]] = a;
            p[[1, 0, 0]] = 1.0 - a;
            Ok(p)
        })
        .unwrap();
        let target = 1.0 / 12.0f64.sqrt();
        for c in 0..2 {
            let got = sigma[[c, 0, 0]] as f64;
            assert!(
                (got - target).abs() < 0.02,
                "class {c}: σ = {got}, want {target} ± 0.02"
            );
        }
        assert!((mean[[0, 0, 0]] as f64 - 0.5).abs() < 0.03);
    }

    #[test]
    fn aggregation_is_invariant_to_sample_order() {
        let model = tiny_model(49);
        let mut rng = stream(49, "sigma-order");
        let x = rand_image(&mut rng, 16, 16);
        let y = {
            let mut y = x.clone();
            for v in y.iter_mut() {
                *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
            }
            y
        };
        let mut alphas: Vec<f64> = (0..9).map(|_| rng.gen::<f64>()).collect();
        let segment = |xi: &Array3<f32>| Ok(model.predict_probs(xi)?);
        let (m1, s1) = uncertainty_core(&x, &y, &alphas, segment).unwrap();
        alphas.reverse();
        let (m2, s2) = uncertainty_core(&x, &y, &alphas, segment).unwrap();
        alphas.shuffle(&mut rng);
        let (m3, s3) = uncertainty_core(&x, &y, &alphas, segment).unwrap();
        assert!(bits_equal(&s1, &s2) && bits_equal(&s1, &s3));
        assert!(bits_equal(&m1, &m2) && bits_equal(&m1, &m3));
    }

    /// End-to-end σ ≡ 0 for a constant model: zero weights make the
    /// backbone blind to its input, the attack gradient vanishes, and every
    /// sample along the path produces the same probability map.
    #[test]
    fn constant_model_yields_identically_zero_sigma() {
        let mut model = tiny_model(50);
        let n = model.n_params();
        model.load_flat(&vec![0.0f32; n]);
        let probe = probe_for(&model, 2, 50);
        let mut rng = stream(50, "sigma-const");
        let x = rand_image(&mut rng, 16, 16);
        let um = uncertainty_map(&model, &probe, &x, 1, 6, 123, &AttackConfig::default()).unwrap();
        assert!(um.sigma.iter().all(|&v| v.to_bits() == 0.0f32.to_bits()));
        assert_eq!(um.alphas.len(), 6);
    }

    #[test]
    fn uncertainty_map_is_deterministic_and_validates() {
        let model = tiny_model(51);
        let probe = probe_for(&model, 2, 51);
        let mut rng = stream(51, "sigma-determinism");
        let x = rand_image(&mut rng, 16, 16);
        let cfg = AttackConfig::default();
        assert!(matches!(
            uncertainty_map(&model, &probe, &x, 1, 0, 5, &cfg),
            Err(StyleOpsError::NoSamples)
        ));
        let a = uncertainty_map(&model, &probe, &x, 1, 5, 99, &cfg).unwrap();
        let b = uncertainty_map(&model, &probe, &x, 1, 5, 99, &cfg).unwrap();
        assert!(bits_equal(&a.sigma, &b.sigma));
        assert!(bits_equal(&a.mean, &b.mean));
        assert_eq!(a.alphas, b.alphas);
        assert!(a.alphas.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert!(a.sigma.iter().all(|&v| v >= 0.0));
        // N_A = 1 through the production path
        let single = uncertainty_map(&model, &probe, &x, 1, 1, 7, &cfg).unwrap();
        assert!(single.sigma.iter().all(|&v| v.to_bits() == 0.0f32.to_bits()));
    }

    #[test]
    fn boundary_band_matches_naive_oracle() {
        let mut mask = Array2::<u8>::zeros((20, 20));
        for y in 0..20i32 {
            for x in 0..20i32 {
                if (y - 10).pow(2) + (x - 10).pow(2) <= 16 {
                    mask[[y as usize, x as usize]] = 2;
                }
            }
        }
        let radius = 3u32;
        let band = boundary_band(&mask, radius);

        // independent reconstruction: mark 4-neighbor crossings, then take
        // every pixel within Euclidean distance `radius` of one
        let (h, w) = mask.dim();
        let mut expected = Array2::from_elem((h, w), false);
        for y in 0..h {
            for x in 0..w {
                let mut near = false;
                'scan: for by in 0..h {
                    for bx in 0..w {
                        let fg = mask[[by, bx]] > 0;
                        let crossing = (by > 0 && (mask[[by - 1, bx]] > 0) != fg)
                            || (bx > 0 && (mask[[by, bx - 1]] > 0) != fg)
                            || (by + 1 < h && (mask[[by + 1, bx]] > 0) != fg)
                            || (bx + 1 < w && (mask[[by, bx + 1]] > 0) != fg);
                        if !crossing {
                            continue;
                        }
                        let dy = by as i64 - y as i64;
                        let dx = bx as i64 - x as i64;
                        if dy * dy + dx * dx <= (radius as i64).pow(2) {
                            near = true;
                            break 'scan;
                        }
                    }
                }
                expected[[y, x]] = near;
            }
        }
        assert_eq!(band, expected);
        assert!(band.iter().any(|&b| b), "disc mask must have a band");
    }

    #[test]
    fn band_stats_separate_band_from_background() {
        let mut mask = Array2::<u8>::zeros((20, 20));
        for y in 6..14 {
            for x in 6..14 {
                mask[[y, x]] = 1;
            }
        }
        let band = boundary_band(&mask, 3);
        let mut sigma = Array3::<f32>::zeros((2, 20, 20));
        for y in 0..20 {
            for x in 0..20 {
                let v = if band[[y, x]] { 0.5 } else { 0.05 };
                sigma[[0, y, x]] = v;
                sigma[[1, y, x]] = v;
            }
        }
        let (band_mean, bg_mean) = band_sigma_stats(&sigma, &mask, 3).unwrap();
        assert!((band_mean - 1.0).abs() < 1e-6, "band {band_mean}");
        assert!((bg_mean - 0.1).abs() < 1e-6, "bg {bg_mean}");
        assert!(band_mean >= 2.0 * bg_mean);

        let empty = Array2::<u8>::zeros((20, 20));
        assert!(band_sigma_stats(&sigma, &empty, 3).is_none());
    }
}
