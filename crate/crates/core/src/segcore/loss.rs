//! Soft Dice loss over smoothed one-hot targets.

use ndarray::{Array3, NdFloat};

/// Dice configuration. `smoothing` redistributes target mass uniformly over
/// classes (`g' = g·(1−s) + s/K`); `eps` only guards empty-class 0/0 cases.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DiceCfg {
    pub smoothing: f64,
    pub eps: f64,
}

impl Default for DiceCfg {
    fn default() -> Self {
        DiceCfg {
            smoothing: 0.4,
            eps: 1e-7,
        }
    }
}

/// Soft Dice loss (macro-averaged over classes) and its gradient w.r.t. the
/// probabilities. `probs` is `(K, h, w)`, `mask` holds class ids.
pub fn dice_loss_grad<F: NdFloat>(
    probs: &Array3<F>,
    mask: &ndarray::Array2<u8>,
    cfg: DiceCfg,
) -> (F, Array3<F>) {
    let (k, h, w) = probs.dim();
    assert_eq!(mask.dim(), (h, w), "mask/probs spatial mismatch");
    let s = F::from(cfg.smoothing).unwrap();
    let eps = F::from(cfg.eps).unwrap();
    let uniform = s / F::from(k).unwrap();
    let hot = F::one() - s + uniform;
    let kf = F::from(k).unwrap();

    let mut dprobs = Array3::<F>::zeros((k, h, w));
    let mut loss = F::one();
    for c in 0..k {
        let mut num = F::zero();
        let mut psum = F::zero();
        let mut gsum = F::zero();
        for y in 0..h {
            for x in 0..w {
                let p = probs[[c, y, x]];
                let g = if mask[[y, x]] as usize == c { hot } else { uniform };
                num = num + p * g;
                psum = psum + p;
                gsum = gsum + g;
            }
        }
        let num = num + num + eps;
        let den = psum + gsum + eps;
        let dice = num / den;
        loss = loss - dice / kf;
        // d dice / d p_i = (2 g_i den - num) / den^2
        let den2 = den * den;
        for y in 0..h {
            for x in 0..w {
                let g = if mask[[y, x]] as usize == c { hot } else { uniform };
                let two_g = g + g;
                dprobs[[c, y, x]] = -(two_g * den - num) / den2 / kf;
            }
        }
    }
    (loss, dprobs)
}
