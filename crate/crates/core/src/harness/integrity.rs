//! Semantic-integrity checks for style conversion: a small convolutional
//! severity regressor (the proxy grader), the guarded log-residual map, and
//! the before/after stability report with discrete-grade flip analysis.
//!
//! The grader is generic over the float type for the same reason the
//! backbone is: gradients are hand-derived, so the f64 instantiation gets
//! checked against finite differences while training runs in f32.

use ndarray::{Array1, Array3, NdFloat};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::Sample;
use crate::nn::{maxpool2, maxpool2_backward, relu, relu_backward, Adam, Conv, ConvGrad};
use crate::rng::stream;

/// Severity boundaries sit halfway between adjacent integer grades.
const GRADE_BOUNDARIES: [f32; 4] = [0.5, 1.5, 2.5, 3.5];

/// Convolutional severity regressor: three 3x3 stages with two 2x
/// poolings, global mean pool, linear head. Fully convolutional, so any
/// input whose spatial dims are multiples of 4 works.
#[derive(Debug, Clone)]
pub struct Grader<F> {
    pub c1: Conv<F>,
    pub c2: Conv<F>,
    pub c3: Conv<F>,
    pub head_w: Array1<F>,
    pub head_b: F,
}

struct GraderCache<F> {
    cols1: ndarray::Array2<F>,
    a1: Array3<F>,
    idx1: Array3<u8>,
    cols2: ndarray::Array2<F>,
    a2: Array3<F>,
    idx2: Array3<u8>,
    cols3: ndarray::Array2<F>,
    a3: Array3<F>,
    features: Array1<F>,
}

impl<F: NdFloat> Grader<F> {
    pub fn init(seed: u64) -> Self {
        let mut rng = stream(seed, "grader-init");
        let c1 = Conv::init(3, 8, 3, &mut rng);
        let c2 = Conv::init(8, 16, 3, &mut rng);
        let c3 = Conv::init(16, 16, 3, &mut rng);
        let std = (1.0f64 / 16.0).sqrt();
        let head_w = Array1::from_shape_fn(16, |_| {
            F::from((stream_norm(&mut rng)) * std).unwrap()
        });
        Grader {
            c1,
            c2,
            c3,
            head_w,
            head_b: F::zero(),
        }
    }

    fn check_input(&self, x: &Array3<F>) -> Result<(), HarnessError> {
        let (c, h, w) = x.dim();
        if c != 3 || h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(HarnessError::Invalid(format!(
                "grader input must be (3, 4k, 4k), got ({c}, {h}, {w})"
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Array3<F>) -> (F, GraderCache<F>) {
        let (z1, cols1) = self.c1.forward_cached(x);
        let a1 = relu(&z1);
        let (p1, idx1) = maxpool2(&a1);
        let (z2, cols2) = self.c2.forward_cached(&p1);
        let a2 = relu(&z2);
        let (p2, idx2) = maxpool2(&a2);
        let (z3, cols3) = self.c3.forward_cached(&p2);
        let a3 = relu(&z3);
        let (_, h4, w4) = a3.dim();
        let denom = F::from(h4 * w4).unwrap();
        let features = Array1::from_shape_fn(16, |c| {
            a3.index_axis(ndarray::Axis(0), c).sum() / denom
        });
        let pred = self.head_w.dot(&features) + self.head_b;
        (
            pred,
            GraderCache {
                cols1,
                a1,
                idx1,
                cols2,
                a2,
                idx2,
                cols3,
                a3,
                features,
            },
        )
    }

    /// Continuous severity score.
    pub fn predict(&self, x: &Array3<F>) -> Result<F, HarnessError> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    /// Gradient of `(pred - y)^2` with respect to every parameter, packed
    /// in flat order.
    fn loss_grad(&self, x: &Array3<F>, y: F) -> (F, Vec<F>) {
        let (pred, cache) = self.forward_cached(x);
        let diff = pred - y;
        let loss = diff * diff;
        let dpred = diff + diff;

        let d_head_w = cache.features.mapv(|f| f * dpred);
        let d_head_b = dpred;

        let (_, h4, w4) = cache.a3.dim();
        let denom = F::from(h4 * w4).unwrap();
        let da3 = Array3::from_shape_fn(cache.a3.dim(), |(c, _, _)| {
            dpred * self.head_w[c] / denom
        });
        let dz3 = relu_backward(&cache.a3, &da3);
        let mut g3 = self.c3.zero_grad();
        let dp2 = self.c3.backward(&cache.cols3, &dz3, &mut g3);

        let da2 = maxpool2_backward(&cache.idx2, &dp2, cache.a2.dim());
        let dz2 = relu_backward(&cache.a2, &da2);
        let mut g2 = self.c2.zero_grad();
        let dp1 = self.c2.backward(&cache.cols2, &dz2, &mut g2);

        let da1 = maxpool2_backward(&cache.idx1, &dp1, cache.a1.dim());
        let dz1 = relu_backward(&cache.a1, &da1);
        let mut g1 = self.c1.zero_grad();
        let _ = self.c1.backward(&cache.cols1, &dz1, &mut g1);

        (loss, pack(&g1, &g2, &g3, &d_head_w, d_head_b))
    }

    pub fn n_params(&self) -> usize {
        self.c1.n_params() + self.c2.n_params() + self.c3.n_params() + self.head_w.len() + 1
    }

    pub fn flat_params(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.n_params());
        for c in [&self.c1, &self.c2, &self.c3] {
            v.extend(c.w.iter().cloned());
            v.extend(c.b.iter().cloned());
        }
        v.extend(self.head_w.iter().cloned());
        v.push(self.head_b);
        v
    }

    pub fn load_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter().cloned();
        for c in [&mut self.c1, &mut self.c2, &mut self.c3] {
            for w in c.w.iter_mut() {
                *w = it.next().unwrap();
            }
            for b in c.b.iter_mut() {
                *b = it.next().unwrap();
            }
        }
        for w in self.head_w.iter_mut() {
            *w = it.next().unwrap();
        }
        self.head_b = it.next().unwrap();
    }
}

fn stream_norm(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn pack<F: NdFloat>(
    g1: &ConvGrad<F>,
    g2: &ConvGrad<F>,
    g3: &ConvGrad<F>,
    d_head_w: &Array1<F>,
    d_head_b: F,
) -> Vec<F> {
    let mut v = Vec::new();
    for g in [g1, g2, g3] {
        v.extend(g.w.iter().cloned());
        v.extend(g.b.iter().cloned());
    }
    v.extend(d_head_w.iter().cloned());
    v.push(d_head_b);
    v
}

/// Round to the nearest integer grade in `[0, 4]`.
pub fn discrete_grade(score: f32) -> u8 {
    score.clamp(0.0, 4.0).round() as u8
}

/// Distance from a (clamped) score to the nearest grade boundary.
pub fn boundary_distance(score: f32) -> f32 {
    let s = score.clamp(0.0, 4.0);
    GRADE_BOUNDARIES
        .iter()
        .map(|b| (s - b).abs())
        .fold(f32::INFINITY, f32::min)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraderConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for GraderConfig {
    fn default() -> Self {
        GraderConfig {
            steps: 300,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

/// Fit the proxy grader by Adam on mean squared error against each
/// sample's severity label. Every sample must carry one.
pub fn train_grader(
    samples: &[&Sample],
    cfg: &GraderConfig,
) -> Result<(Grader<f32>, f64), HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    for s in samples {
        if s.severity.is_none() {
            return Err(HarnessError::Invalid(format!(
                "sample '{}' has no severity label",
                s.sample_id
            )));
        }
    }
    let mut grader = Grader::<f32>::init(cfg.seed);
    grader.check_input(&samples[0].image)?;
    let mut params = grader.flat_params();
    let mut adam = Adam::new(params.len(), cfg.lr, cfg.weight_decay);
    let mut rng = stream(cfg.seed, "grader-train");
    use rand::Rng;
    for _ in 0..cfg.steps {
        let mut grads = vec![0.0f32; params.len()];
        for _ in 0..cfg.batch_size {
            let s = samples[rng.gen_range(0..samples.len())];
            let (_, g) = grader.loss_grad(&s.image, s.severity.expect("checked"));
            for (acc, gi) in grads.iter_mut().zip(&g) {
                *acc += gi / cfg.batch_size as f32;
            }
        }
        adam.step(&mut params, &grads);
        grader.load_flat(&params);
    }
    let mut mse = 0.0f64;
    for s in samples {
        let pred = grader.predict(&s.image)?;
        mse += (pred - s.severity.expect("checked")).powi(2) as f64;
    }
    Ok((grader, mse / samples.len() as f64))
}

/// `10·log10(x_conv² / x²)` per pixel, with a validity mask excluding
/// pixels where `x < 1/255` (the division guard). The ratio itself is
/// floored at 1e-12 so a zeroed converted pixel stays finite.
pub fn log_residual(
    x: &Array3<f32>,
    x_conv: &Array3<f32>,
) -> Result<(Array3<f32>, Array3<bool>), HarnessError> {
    if x.dim() != x_conv.dim() {
        return Err(HarnessError::Invalid(format!(
            "log_residual shape mismatch: {:?} vs {:?}",
            x.dim(),
            x_conv.dim()
        )));
    }
    let mut r = Array3::<f32>::zeros(x.dim());
    let mut valid = Array3::<bool>::from_elem(x.dim(), false);
    let floor = 1.0f32 / 255.0;
    for ((i, &xv), &cv) in x.indexed_iter().zip(x_conv.iter()) {
        if xv >= floor {
            valid[i] = true;
            let ratio = ((cv * cv) / (xv * xv)).max(1e-12);
            r[i] = 10.0 * ratio.log10();
        }
    }
    Ok((r, valid))
}

/// One discrete-grade flip, with how close the clean score sat to a grade
/// boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipCase {
    pub index: usize,
    pub pre: f32,
    pub post: f32,
    pub pre_grade: u8,
    pub post_grade: u8,
    pub boundary_dist: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub n: usize,
    pub pre: Vec<f32>,
    pub post: Vec<f32>,
    /// Mean squared difference between post- and pre-conversion scores.
    pub mse: f64,
    pub flips: Vec<FlipCase>,
    pub retained: usize,
    /// Mean |log-residual| in dB over valid pixels, pooled over images.
    pub mean_abs_residual_db: f64,
    /// Fraction of pixels excluded by the `x < 1/255` guard.
    pub masked_frac: f64,
}

/// Score every image before and after conversion and report stability:
/// MSE of the continuous score, discrete flips with boundary distances,
/// and pooled log-residual statistics.
pub fn integrity_check(
    grader: &Grader<f32>,
    images: &[&Sample],
    conversions: &[Array3<f32>],
) -> Result<IntegrityReport, HarnessError> {
    if images.is_empty() {
        return Err(HarnessError::EmptySet);
    }
    if images.len() != conversions.len() {
        return Err(HarnessError::Invalid(format!(
            "{} images but {} conversions",
            images.len(),
            conversions.len()
        )));
    }
    let mut pre = Vec::with_capacity(images.len());
    let mut post = Vec::with_capacity(images.len());
    let mut flips = Vec::new();
    let mut mse = 0.0f64;
    let mut abs_db_sum = 0.0f64;
    let mut valid_count = 0u64;
    let mut total_count = 0u64;
    for (i, (s, conv)) in images.iter().zip(conversions).enumerate() {
        let a = grader.predict(&s.image)?;
        let b = grader.predict(conv)?;
        pre.push(a);
        post.push(b);
        mse += ((b - a) as f64).powi(2);
        let (ga, gb) = (discrete_grade(a), discrete_grade(b));
        if ga != gb {
            flips.push(FlipCase {
                index: i,
                pre: a,
                post: b,
                pre_grade: ga,
                post_grade: gb,
                boundary_dist: boundary_distance(a),
            });
        }
        let (r, valid) = log_residual(&s.image, conv)?;
        for (rv, &ok) in r.iter().zip(valid.iter()) {
            total_count += 1;
            if ok {
                valid_count += 1;
                abs_db_sum += rv.abs() as f64;
            }
        }
    }
    let n = images.len();
    Ok(IntegrityReport {
        n,
        retained: n - flips.len(),
        mse: mse / n as f64,
        flips,
        pre,
        post,
        mean_abs_residual_db: if valid_count > 0 {
            abs_db_sum / valid_count as f64
        } else {
            0.0
        },
        masked_frac: 1.0 - valid_count as f64 / total_count as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn sample_with(image: Array3<f32>, severity: f32, id: &str) -> Sample {
        let (_, h, w) = image.dim();
        Sample {
            image,
            mask: Array2::zeros((h, w)),
            origin: 0,
            severity: Some(severity),
            sample_id: id.into(),
        }
    }

    /// Brightness-coded severity: mean intensity times four, a function the
    /// grader can actually learn.
    fn brightness_set(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = stream(seed, "grader-test-set");
        (0..n)
            .map(|k| {
                let level: f32 = rng.gen_range(0.05..0.95);
                let image = Array3::from_shape_fn((3, 8, 8), |_| {
                    (level + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0)
                });
                let sev = (image.mean().unwrap() * 4.0).clamp(0.0, 4.0);
                sample_with(image, sev, &format!("b{k}"))
            })
            .collect()
    }

    /// Hand gradient vs central differences on the f64 grader.
    #[test]
    fn grader_gradient_matches_finite_differences() {
        let mut grader = Grader::<f64>::init(31);
        let mut rng = stream(31, "grader-fd");
        let x = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.05..0.95));
        let y = 2.3f64;
        let params = grader.flat_params();
        let (_, grads) = grader.loss_grad(&x, y);
        let eps = 1e-6;
        let mut checked = 0;
        let stride = (params.len() / 37).max(1);
        for i in (0..params.len()).step_by(stride) {
            let mut p = params.clone();
            p[i] += eps;
            grader.load_flat(&p);
            let (lp, _) = grader.loss_grad(&x, y);
            p[i] -= 2.0 * eps;
            grader.load_flat(&p);
            let (lm, _) = grader.loss_grad(&x, y);
            grader.load_flat(&params);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(grads[i].abs()).max(1e-8);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-5,
                "param {i}: fd {fd} vs analytic {}",
                grads[i]
            );
            checked += 1;
        }
        assert!(checked >= 30);
    }

    #[test]
    fn training_reduces_mse_and_is_deterministic() {
        let samples = brightness_set(12, 32);
        let refs: Vec<&Sample> = samples.iter().collect();
        let init = Grader::<f32>::init(0);
        let mut init_mse = 0.0f64;
        for s in &refs {
            init_mse += (init.predict(&s.image).unwrap() - s.severity.unwrap()).powi(2) as f64;
        }
        init_mse /= refs.len() as f64;
        let cfg = GraderConfig {
            steps: 120,
            ..GraderConfig::default()
        };
        let (g1, mse1) = train_grader(&refs, &cfg).unwrap();
        let (g2, mse2) = train_grader(&refs, &cfg).unwrap();
        assert!(mse1 < init_mse * 0.5, "no learning: {init_mse} -> {mse1}");
        assert_eq!(mse1.to_bits(), mse2.to_bits());
        let (p1, p2) = (g1.flat_params(), g2.flat_params());
        assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn train_grader_rejects_bad_inputs() {
        assert!(matches!(
            train_grader(&[], &GraderConfig::default()),
            Err(HarnessError::EmptySet)
        ));
        let mut s = sample_with(Array3::zeros((3, 8, 8)), 1.0, "x");
        s.severity = None;
        assert!(matches!(
            train_grader(&[&s], &GraderConfig::default()),
            Err(HarnessError::Invalid(_))
        ));
        let odd = sample_with(Array3::zeros((3, 6, 6)), 1.0, "odd");
        assert!(train_grader(&[&odd], &GraderConfig::default()).is_err());
    }

    #[test]
    fn grades_and_boundaries() {
        assert_eq!(discrete_grade(1.49), 1);
        assert_eq!(discrete_grade(1.51), 2);
        assert_eq!(discrete_grade(-3.0), 0);
        assert_eq!(discrete_grade(9.0), 4);
        assert!((boundary_distance(1.49) - 0.01).abs() < 1e-6);
        assert!((boundary_distance(2.0) - 0.5).abs() < 1e-6);
        // clamping means out-of-range scores measure from the clamped value
        assert!((boundary_distance(9.0) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn log_residual_identity_zero_and_known_value() {
        let x = Array3::from_elem((3, 4, 4), 0.1f32);
        let (r, valid) = log_residual(&x, &x).unwrap();
        assert!(valid.iter().all(|&v| v));
        assert!(r.iter().all(|&v| v == 0.0));
        let mut xc = x.clone();
        xc[[0, 0, 0]] = 0.2;
        let (r, _) = log_residual(&x, &xc).unwrap();
        assert!((r[[0, 0, 0]] - 10.0 * 4.0f32.log10()).abs() < 1e-4);

        // dark pixels are masked, zeroed conversions stay finite
        let mut dark = x.clone();
        dark[[1, 2, 2]] = 0.0;
        let (r, valid) = log_residual(&dark, &xc).unwrap();
        assert!(!valid[[1, 2, 2]]);
        assert_eq!(r[[1, 2, 2]], 0.0);
        let zeroed = Array3::zeros(x.dim());
        let (r, _) = log_residual(&x, &zeroed).unwrap();
        assert!(r.iter().all(|v| v.is_finite()));

        let bad = Array3::<f32>::zeros((3, 8, 8));
        assert!(log_residual(&x, &bad).is_err());
    }

    /// Identity conversions: MSE exactly zero, no flips, zero residual.
    #[test]
    fn unconverted_images_are_perfectly_stable() {
        let samples = brightness_set(5, 33);
        let refs: Vec<&Sample> = samples.iter().collect();
        let grader = Grader::<f32>::init(34);
        let conversions: Vec<Array3<f32>> = refs.iter().map(|s| s.image.clone()).collect();
        let rep = integrity_check(&grader, &refs, &conversions).unwrap();
        assert_eq!(rep.mse, 0.0);
        assert!(rep.flips.is_empty());
        assert_eq!(rep.retained, 5);
        assert_eq!(rep.mean_abs_residual_db, 0.0);
        assert_eq!(rep.pre, rep.post);
    }

    #[test]
    fn integrity_check_flags_flips_near_boundary() {
        let samples = brightness_set(4, 35);
        let refs: Vec<&Sample> = samples.iter().collect();
        let grader = Grader::<f32>::init(36);
        // nudge brightness enough to move the score a little
        let conversions: Vec<Array3<f32>> = refs
            .iter()
            .map(|s| s.image.mapv(|v| (v * 1.08).clamp(0.0, 1.0)))
            .collect();
        let rep = integrity_check(&grader, &refs, &conversions).unwrap();
        assert_eq!(rep.n, 4);
        assert!(rep.mse > 0.0);
        for f in &rep.flips {
            // a flip requires crossing a boundary, so the clean score must
            // sit within |post - pre| of one
            assert!(f.boundary_dist <= (f.post - f.pre).abs() + 1e-6);
        }
        assert!(integrity_check(&grader, &refs, &conversions[..2].to_vec()).is_err());
    }
}
