//! Origin probes: linear classifiers that read a tap of a frozen
//! segmentation model and predict which style corpus an input came from.
//!
//! A probe is a pure affine map on channel-pooled tap features. Training
//! standardizes features for conditioning, then folds the standardization
//! back into the weights, so the stored probe is exactly `softmax(Wf + b)`
//! on raw features — the form the attack differentiates through.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::nn::NdFloat;
use crate::segcore::{pool_spatial, SegError, SegModel, TapPoint};

mod sweep;
pub use sweep::{best_row, placement_sweep, SweepConfig, SweepRow};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error("probe was trained on backbone {expected} but got {got}")]
    BackboneMismatch { expected: String, got: String },
    #[error("no features to train on")]
    EmptyFeatures,
    #[error("need at least two origin labels, got {0}")]
    TooFewClasses(usize),
    #[error("label {0} out of range for {1} classes")]
    LabelRange(u16, usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed probe file {path}: {msg}")]
    Format { path: String, msg: String },
}

/// A trained linear origin classifier attached to one tap.
#[derive(Debug, Clone)]
pub struct Probe {
    pub tap: TapPoint,
    /// `(n_styles, n_features)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// Checksum of the backbone this probe was fit against.
    pub backbone_checksum: String,
    pub n_styles: usize,
}

/// JSON image of a probe; f64 values round-trip exactly through serde_json.
#[derive(Serialize, Deserialize)]
struct ProbeDoc {
    tap: String,
    n_styles: usize,
    n_features: usize,
    backbone_checksum: String,
    w: Vec<f64>,
    b: Vec<f64>,
}

/// Write a probe to `path` as JSON.
pub fn save_probe(path: &std::path::Path, probe: &Probe) -> Result<(), ProbeError> {
    let doc = ProbeDoc {
        tap: probe.tap.name(),
        n_styles: probe.n_styles,
        n_features: probe.w.ncols(),
        backbone_checksum: probe.backbone_checksum.clone(),
        w: probe.w.iter().cloned().collect(),
        b: probe.b.to_vec(),
    };
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    std::fs::write(path, text).map_err(|e| ProbeError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Load a probe previously written by [`save_probe`].
pub fn load_probe(path: &std::path::Path) -> Result<Probe, ProbeError> {
    let fmt = |msg: String| ProbeError::Format {
        path: path.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(path).map_err(|e| ProbeError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let doc: ProbeDoc = serde_json::from_str(&text).map_err(|e| fmt(e.to_string()))?;
    let tap = TapPoint::parse(&doc.tap)
        .map_err(|_| fmt(format!("unknown tap {:?}", doc.tap)))?;
    if doc.w.len() != doc.n_styles * doc.n_features || doc.b.len() != doc.n_styles {
        return Err(fmt("weight lengths disagree with declared shape".into()));
    }
    Ok(Probe {
        tap,
        w: Array2::from_shape_vec((doc.n_styles, doc.n_features), doc.w).expect("checked"),
        b: Array1::from_vec(doc.b),
        backbone_checksum: doc.backbone_checksum,
        n_styles: doc.n_styles,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub max_iters: usize,
    /// Convergence: L∞ norm of the full-batch gradient falls below this.
    pub tol: f64,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            max_iters: 20_000,
            tol: 1e-6,
            lr: 0.5,
            l2: 0.0,
        }
    }
}

/// Outcome of a probe fit.
pub struct ProbeFit {
    pub probe: Probe,
    pub iters: usize,
    pub grad_linf: f64,
    pub converged: bool,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Pooled tap features for a set of samples: one row per sample, channel
/// means of the tap activation, plus the origin labels.
pub fn extract_features(
    model: &SegModel<f32>,
    tap: TapPoint,
    samples: &[&Sample],
) -> Result<(Array2<f64>, Vec<u16>), SegError> {
    if samples.is_empty() {
        return Err(SegError::EmptyPool);
    }
    let mut rows: Vec<Array1<f64>> = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let cache = model.forward_cached(&s.image, Some(tap), false)?;
        let t = cache.tap_value(tap).ok_or(SegError::TapNotCached {
            name: tap.name(),
        })?;
        rows.push(pool_spatial(t).mapv(|v| v as f64));
        labels.push(s.origin);
    }
    let d = rows[0].len();
    let mut x = Array2::<f64>::zeros((rows.len(), d));
    for (i, r) in rows.into_iter().enumerate() {
        x.row_mut(i).assign(&r);
    }
    Ok((x, labels))
}

/// Mean CE loss, its gradient, and the predictions for a weight setting.
fn ce_loss_grad(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: &Array2<f64>,
    y: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut logits = x.dot(&w.t()); // (n, k)
    logits += &b.view().insert_axis(Axis(0));
    let mut loss = 0.0;
    // softmax rows in place -> residual p - onehot
    for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let zy = row[y[i]];
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        loss -= zy - m - s.ln(); // log-softmax, exact even when saturated
        row.mapv_inplace(|v| v / s);
        row[y[i]] -= 1.0;
    }
    loss /= n;
    let mut gw = logits.t().dot(x); // (k, d)
    gw.mapv_inplace(|v| v / n);
    let mut gb = logits.sum_axis(Axis(0));
    gb.mapv_inplace(|v| v / n);
    if l2 > 0.0 {
        loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
        gw += &w.mapv(|v| l2 * v);
    }
    (loss, gw, gb)
}

fn linf(gw: &Array2<f64>, gb: &Array1<f64>) -> f64 {
    gw.iter()
        .chain(gb.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// Fit a probe on pre-extracted features with full-batch gradient descent
/// and a backtracking step size, iterating until the gradient's L∞ norm
/// drops below `cfg.tol` (or `max_iters`).
pub fn fit_probe_on_features(
    x: &Array2<f64>,
    labels: &[u16],
    tap: TapPoint,
    backbone_checksum: String,
    cfg: &ProbeConfig,
) -> Result<ProbeFit, ProbeError> {
    if x.nrows() == 0 {
        return Err(ProbeError::EmptyFeatures);
    }
    let k = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    if k < 2 {
        return Err(ProbeError::TooFewClasses(k));
    }
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let d = x.ncols();

    // standardize (population std, floored) for conditioning
    let mu = x.mean_axis(Axis(0)).expect("nonempty");
    let mut sd = x
        .var_axis(Axis(0), 0.0)
        .mapv(f64::sqrt);
    sd.mapv_inplace(|v| v.max(1e-6));
    let mut xs = x.clone();
    for mut row in xs.rows_mut() {
        row -= &mu;
        row /= &sd;
    }

    let mut w = Array2::<f64>::zeros((k, d));
    let mut b = Array1::<f64>::zeros(k);
    let mut lr = cfg.lr;
    let (mut loss, mut gw, mut gb) = ce_loss_grad(&w, &b, &xs, &y, cfg.l2);
    let mut iters = 0;
    while iters < cfg.max_iters {
        let g = linf(&gw, &gb);
        if g < cfg.tol {
            break;
        }
        let wt = &w - &gw.mapv(|v| lr * v);
        let bt = &b - &gb.mapv(|v| lr * v);
        let (lt, gwt, gbt) = ce_loss_grad(&wt, &bt, &xs, &y, cfg.l2);
        iters += 1;
        if lt <= loss {
            w = wt;
            b = bt;
            loss = lt;
            gw = gwt;
            gb = gbt;
            lr *= 1.1;
        } else {
            lr *= 0.5;
            if lr < 1e-14 {
                break;
            }
        }
    }
    let grad_linf = linf(&gw, &gb);

    // fold standardization back: logits = Ws((x-μ)/σ) + bs = (Ws/σ)x + bs - Ws(μ/σ)
    let mut wf = w.clone();
    for mut row in wf.rows_mut() {
        row /= &sd;
    }
    let shift = w.dot(&(&mu / &sd));
    let bf = &b - &shift;

    let probe = Probe {
        tap,
        w: wf,
        b: bf,
        backbone_checksum,
        n_styles: k,
    };
    let mut correct = 0usize;
    for (i, &yi) in y.iter().enumerate() {
        let f = x.row(i).to_owned();
        if probe.predict_features(&f).0 as usize == yi {
            correct += 1;
        }
    }
    Ok(ProbeFit {
        probe,
        iters,
        grad_linf,
        converged: grad_linf < cfg.tol,
        final_loss: loss,
        train_accuracy: correct as f64 / y.len() as f64,
    })
}

/// Extract features from the frozen `model` and fit a probe at `tap`.
pub fn train_probe(
    model: &SegModel<f32>,
    tap: TapPoint,
    samples: &[&Sample],
    cfg: &ProbeConfig,
) -> Result<ProbeFit, ProbeError> {
    let (x, labels) = extract_features(model, tap, samples)?;
    fit_probe_on_features(&x, &labels, tap, model.weights_checksum(), cfg)
}

impl Probe {
    /// Logits for one raw feature vector.
    pub fn logits_f64(&self, f: &Array1<f64>) -> Array1<f64> {
        self.w.dot(f) + &self.b
    }

    /// Predicted label and softmax probabilities for one feature vector.
    pub fn predict_features(&self, f: &Array1<f64>) -> (u16, Array1<f64>) {
        let mut z = self.logits_f64(f);
        let m = z.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        z.mapv_inplace(|v| (v - m).exp());
        let s = z.sum();
        z.mapv_inplace(|v| v / s);
        let (mut best, mut bv) = (0usize, f64::NEG_INFINITY);
        for (i, &p) in z.iter().enumerate() {
            if p > bv {
                best = i;
                bv = p;
            }
        }
        (best as u16, z)
    }

    /// Fail unless `model` is byte-identical to the backbone this probe was
    /// fit against.
    pub fn check_backbone(&self, model: &SegModel<f32>) -> Result<(), ProbeError> {
        let got = model.weights_checksum();
        if got != self.backbone_checksum {
            return Err(ProbeError::BackboneMismatch {
                expected: self.backbone_checksum.clone(),
                got,
            });
        }
        Ok(())
    }

    /// Predict the origin of one image through the frozen backbone. Checks
    /// the backbone checksum first.
    pub fn predict(
        &self,
        model: &SegModel<f32>,
        image: &Array3<f32>,
    ) -> Result<(u16, Array1<f64>), ProbeError> {
        self.check_backbone(model)?;
        let cache = model.forward_cached(image, Some(self.tap), false)?;
        let t = cache
            .tap_value(self.tap)
            .ok_or(SegError::TapNotCached {
                name: self.tap.name(),
            })?;
        let f = pool_spatial(t).mapv(|v| v as f64);
        Ok(self.predict_features(&f))
    }

    /// Accuracy over a set of samples (labels = `Sample::origin`).
    pub fn accuracy(
        &self,
        model: &SegModel<f32>,
        samples: &[&Sample],
    ) -> Result<f64, ProbeError> {
        if samples.is_empty() {
            return Err(ProbeError::EmptyFeatures);
        }
        let mut ok = 0usize;
        for s in samples {
            if self.predict(model, &s.image)?.0 == s.origin {
                ok += 1;
            }
        }
        Ok(ok as f64 / samples.len() as f64)
    }

    /// CE loss against a target *distribution* `q` over styles,
    /// `L = -Σ_r q_r ln p_r`, and its gradient with respect to the tap
    /// activation the probe reads — the seed an input-space attack injects.
    /// Zero-weight terms are skipped, so a one-hot `q` reproduces plain
    /// targeted CE bit for bit. Works in the model's own float type so f64
    /// oracles can run end to end.
    pub fn loss_grad_wrt_tap_soft<F: NdFloat>(
        &self,
        tap_value: &Array3<F>,
        q: &[f64],
    ) -> (F, Array3<F>, u16) {
        assert_eq!(q.len(), self.n_styles, "target distribution length");
        let (c, h, w) = tap_value.dim();
        let f = pool_spatial(tap_value);
        // logits in F
        let k = self.n_styles;
        let mut logits: Vec<F> = Vec::with_capacity(k);
        for r in 0..k {
            let mut acc = F::from(self.b[r]).unwrap();
            for j in 0..c {
                acc = acc + F::from(self.w[[r, j]]).unwrap() * f[j];
            }
            logits.push(acc);
        }
        let m = logits.iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = logits.iter().map(|&z| (z - m).exp()).collect();
        let sum: F = exps.iter().cloned().fold(F::zero(), |a, v| a + v);
        let probs: Vec<F> = exps.iter().map(|&e| e / sum).collect();
        // log-softmax: finite for any finite logits, even when a saturated
        // gap underflows exp() to zero (sum >= 1, so ln(sum) is safe)
        let log_sum = sum.ln();
        let mut loss = F::zero();
        for r in 0..k {
            if q[r] != 0.0 {
                loss = loss - F::from(q[r]).unwrap() * (logits[r] - m - log_sum);
            }
        }
        let (mut pred, mut pv) = (0usize, F::neg_infinity());
        for (i, &p) in probs.iter().enumerate() {
            if p > pv {
                pred = i;
                pv = p;
            }
        }
        // dL/dfeat_j = Σ_r (p_r - q_r) w[r, j]
        let inv_hw = F::from(1.0 / (h * w) as f64).unwrap();
        let mut seed = Array3::<F>::zeros((c, h, w));
        for j in 0..c {
            let mut g = F::zero();
            for r in 0..k {
                let err = probs[r] - F::from(q[r]).unwrap();
                g = g + err * F::from(self.w[[r, j]]).unwrap();
            }
            // pooled mean spreads the gradient uniformly over the map
            let gs = g * inv_hw;
            seed.slice_mut(ndarray::s![j, .., ..]).fill(gs);
        }
        (loss, seed, pred as u16)
    }

    /// One-hot convenience wrapper over [`Probe::loss_grad_wrt_tap_soft`].
    pub fn loss_grad_wrt_tap<F: NdFloat>(
        &self,
        tap_value: &Array3<F>,
        target: usize,
    ) -> (F, Array3<F>, u16) {
        let mut q = vec![0.0f64; self.n_styles];
        q[target] = 1.0;
        self.loss_grad_wrt_tap_soft(tap_value, &q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, StyleSpec};
    use crate::rng::stream;
    use crate::segcore::ArchConfig;
    use rand::Rng;

    /// Linearly separable 2-D blobs: the probe must hit 100% train accuracy
    /// and meet the gradient tolerance.
    #[test]
    fn separable_blobs_converge() {
        let mut rng = stream(5, "probe-blobs");
        let n = 60;
        let mut x = Array2::<f64>::zeros((2 * n, 2));
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let c = (i >= n) as usize;
            let cx = if c == 0 { -2.0 } else { 2.0 };
            x[[i, 0]] = cx + rng.gen_range(-0.8..0.8);
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
            labels.push(c as u16);
        }
        let fit = fit_probe_on_features(
            &x,
            &labels,
            TapPoint::Bottleneck,
            "test".into(),
            &ProbeConfig { l2: 1e-3, ..ProbeConfig::default() },
        )
        .unwrap();
        assert!(fit.converged, "grad_linf {}", fit.grad_linf);
        assert_eq!(fit.train_accuracy, 1.0);
    }

    /// CE gradient against central finite differences.
    #[test]
    fn ce_gradient_matches_fd() {
        let mut rng = stream(6, "probe-fd");
        let (n, d, k) = (7usize, 3usize, 3usize);
        let x = Array2::<f64>::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let w = Array2::<f64>::from_shape_fn((k, d), |_| rng.gen_range(-0.5..0.5));
        let b = Array1::<f64>::from_shape_fn(k, |_| rng.gen_range(-0.5..0.5));
        let (_, gw, gb) = ce_loss_grad(&w, &b, &x, &y, 0.01);
        let h = 1e-6;
        for &(r, c) in &[(0usize, 0usize), (1, 2), (2, 1)] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[[r, c]] += h;
            wm[[r, c]] -= h;
            let (lp, _, _) = ce_loss_grad(&wp, &b, &x, &y, 0.01);
            let (lm, _, _) = ce_loss_grad(&wm, &b, &x, &y, 0.01);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gw[[r, c]]).abs() < 1e-8, "fd={fd} an={}", gw[[r, c]]);
        }
        for r in 0..k {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[r] += h;
            bm[r] -= h;
            let (lp, _, _) = ce_loss_grad(&w, &bp, &x, &y, 0.01);
            let (lm, _, _) = ce_loss_grad(&w, &bm, &x, &y, 0.01);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gb[r]).abs() < 1e-8);
        }
    }

    /// The folded probe on raw features must match the standardized-space
    /// predictor bit-for-bit in exact arithmetic terms.
    #[test]
    fn standardization_folding_is_exact() {
        let mut rng = stream(7, "probe-fold");
        // features with very different scales per dimension
        let n = 40;
        let mut x = Array2::<f64>::zeros((n, 3));
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 2) as f64;
            x[[i, 0]] = 1000.0 * (c + rng.gen_range(-0.2..0.2));
            x[[i, 1]] = 0.001 * (1.0 - c + rng.gen_range(-0.2..0.2));
            x[[i, 2]] = rng.gen_range(-1.0..1.0);
            labels.push((i % 2) as u16);
        }
        let fit = fit_probe_on_features(
            &x,
            &labels,
            TapPoint::Enc(1),
            "t".into(),
            &ProbeConfig { max_iters: 4000, ..Default::default() },
        )
        .unwrap();
        // the folded probe must be a pure affine map on raw features:
        // logits(x) - logits(x') == W (x - x') for every pair
        for i in 0..n {
            let raw = x.row(i).to_owned();
            let raw2 = x.row((i + 1) % n).to_owned();
            let lhs = &fit.probe.logits_f64(&raw) - &fit.probe.logits_f64(&raw2);
            let rhs = fit.probe.w.dot(&(&raw - &raw2));
            for (a, b) in lhs.iter().zip(rhs.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(fit.train_accuracy > 0.9);
    }

    /// loss_grad_wrt_tap against finite differences through pooling+CE.
    #[test]
    fn tap_gradient_matches_fd() {
        let mut rng = stream(8, "probe-tapfd");
        let (c, hh, ww) = (4usize, 3usize, 3usize);
        let probe = Probe {
            tap: TapPoint::Bottleneck,
            w: Array2::from_shape_fn((3, c), |_| rng.gen_range(-0.7..0.7)),
            b: Array1::from_shape_fn(3, |_| rng.gen_range(-0.3..0.3)),
            backbone_checksum: "t".into(),
            n_styles: 3,
        };
        let tap = Array3::<f64>::from_shape_fn((c, hh, ww), |_| rng.gen_range(-1.0..1.0));
        let (_, seed, _) = probe.loss_grad_wrt_tap(&tap, 1);
        let h = 1e-6;
        for &(ci, y, x) in &[(0usize, 0usize, 0usize), (3, 2, 2), (1, 1, 0)] {
            let mut tp = tap.clone();
            let mut tm = tap.clone();
            tp[[ci, y, x]] += h;
            tm[[ci, y, x]] -= h;
            let (lp, _, _) = probe.loss_grad_wrt_tap(&tp, 1);
            let (lm, _, _) = probe.loss_grad_wrt_tap(&tm, 1);
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - seed[[ci, y, x]]).abs() < 1e-8, "fd={fd}");
        }
    }

    fn tiny_setup() -> (Vec<crate::corpus::Corpus>, SegModel<f32>) {
        let corpora = generate_corpus(&CorpusSpec {
            n_images: 12,
            image_size: 32,
            styles: vec![
                StyleSpec::fine("fine").with_marker(0.012, 0.0),
                StyleSpec::coarse("coarse", 2, 6.0).with_marker(0.012, 90.0),
            ],
            seed: 13,
            train_frac: 0.5,
            val_frac: 0.25,
        })
        .unwrap();
        let model = SegModel::<f32>::init(ArchConfig {
            in_channels: 3,
            n_classes: 5,
            stages: 2,
            width: 4,
            seed: 3,
        });
        (corpora, model)
    }

    #[test]
    fn extract_features_pools_channel_means() {
        let (corpora, model) = tiny_setup();
        let refs: Vec<&Sample> = corpora[0].train.iter().collect();
        let (x, labels) = extract_features(&model, TapPoint::Enc(1), &refs).unwrap();
        assert_eq!(x.nrows(), refs.len());
        assert_eq!(labels, vec![0u16; refs.len()]);
        // spot-check row 0 against a manual forward + mean
        let cache = model
            .forward_cached(&refs[0].image, Some(TapPoint::Enc(1)), false)
            .unwrap();
        let t = cache.tap_value(TapPoint::Enc(1)).unwrap();
        let manual = pool_spatial(t);
        for (a, b) in x.row(0).iter().zip(manual.iter()) {
            assert!((a - *b as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn backbone_mismatch_is_refused() {
        let (corpora, model) = tiny_setup();
        let refs: Vec<&Sample> = corpora
            .iter()
            .flat_map(|c| c.train.iter())
            .collect();
        let fit = train_probe(&model, TapPoint::Bottleneck, &refs, &ProbeConfig {
            max_iters: 200,
            ..Default::default()
        })
        .unwrap();
        let other = SegModel::<f32>::init(ArchConfig {
            in_channels: 3,
            n_classes: 5,
            stages: 2,
            width: 4,
            seed: 99,
        });
        let err = fit.probe.predict(&other, &corpora[0].train[0].image);
        assert!(matches!(err, Err(ProbeError::BackboneMismatch { .. })));
        // and the right backbone is accepted
        fit.probe.predict(&model, &corpora[0].train[0].image).unwrap();
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = stream(9, "probe-det");
        let x = Array2::<f64>::from_shape_fn((30, 4), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<u16> = (0..30).map(|i| (i % 3) as u16).collect();
        let cfg = ProbeConfig { max_iters: 500, ..Default::default() };
        let a = fit_probe_on_features(&x, &labels, TapPoint::Dec(1), "t".into(), &cfg).unwrap();
        let b = fit_probe_on_features(&x, &labels, TapPoint::Dec(1), "t".into(), &cfg).unwrap();
        assert_eq!(a.probe.w, b.probe.w);
        assert_eq!(a.probe.b, b.probe.b);
        assert_eq!(a.iters, b.iters);
    }

    #[test]
    fn probe_file_roundtrip_is_exact() {
        let mut rng = stream(10, "probe-io");
        let probe = Probe {
            tap: TapPoint::Dec(2),
            w: Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0..1.0f64)),
            b: Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0f64)),
            backbone_checksum: "abc123".into(),
            n_styles: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.json");
        save_probe(&path, &probe).unwrap();
        let back = load_probe(&path).unwrap();
        assert_eq!(back.tap, probe.tap);
        assert_eq!(back.w, probe.w); // f64 through JSON is lossless
        assert_eq!(back.b, probe.b);
        assert_eq!(back.backbone_checksum, probe.backbone_checksum);
    }

    #[test]
    fn too_few_classes_rejected() {
        let x = Array2::<f64>::zeros((4, 2));
        let labels = vec![0u16; 4];
        assert!(matches!(
            fit_probe_on_features(&x, &labels, TapPoint::Bottleneck, "t".into(), &Default::default()),
            Err(ProbeError::TooFewClasses(1))
        ));
    }

    /// Weights big enough to underflow exp() in f32 (logit gap ~ 4e4) must
    /// still give a finite loss and gradient: the loss is the log-softmax
    /// of finite logits, which for a two-class saturated gap equals the gap.
    #[test]
    fn saturated_softmax_stays_finite_in_f32() {
        let mut w = Array2::<f64>::zeros((2, 2));
        w[[0, 0]] = 2e4;
        w[[1, 0]] = -2e4;
        let probe = Probe {
            tap: TapPoint::Bottleneck,
            w,
            b: Array1::zeros(2),
            backbone_checksum: "unchecked".into(),
            n_styles: 2,
        };
        // pooled feature = (1.0, 0.0) -> logits (2e4, -2e4)
        let mut tap = Array3::<f32>::zeros((2, 2, 2));
        tap.slice_mut(ndarray::s![0, .., ..]).fill(1.0);
        let (loss, seed, pred) = probe.loss_grad_wrt_tap::<f32>(&tap, 1);
        assert_eq!(pred, 0);
        assert!(loss.is_finite(), "loss {loss}");
        assert!((loss - 4e4).abs() < 1.0, "loss {loss} want ~4e4");
        assert!(seed.iter().all(|v| v.is_finite()));
        // gradient of CE toward the losing class: (p - q) @ w = -w[1] + w[0]
        // per channel, spread over 4 pixels
        assert!((seed[[0, 0, 0]] - 4e4 / 4.0).abs() < 1e-2, "{}", seed[[0, 0, 0]]);
    }
}
