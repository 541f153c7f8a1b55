//! Dice training loop with uniform union sampling, light augmentation, and
//! periodic validation with best-checkpoint selection.

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dice_loss_grad, DiceCfg};
use super::metrics::miou;
use super::model::{argmax_mask, ArchConfig, GradSeeds, SegModel};
use super::SegError;
use crate::corpus::Sample;
use crate::nn::Adam;
use crate::rng::stream;

/// Augmentation aggressiveness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentLevel {
    None,
    /// Horizontal flip, mild brightness jitter.
    Light,
    /// Both flips, stronger brightness/channel jitter.
    Medium,
    /// Both flips, strong jitter, additive pixel noise.
    Heavy,
}

/// Flip/jitter one (image, mask) pair in place-of (returns new arrays).
/// Geometric ops apply to both; photometric ops only to the image.
pub fn augment_sample(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    level: AugmentLevel,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array2<u8>) {
    let mut img = image.clone();
    let mut msk = mask.clone();
    if level == AugmentLevel::None {
        return (img, msk);
    }
    if rng.gen_bool(0.5) {
        img = img.slice(s![.., .., ..;-1]).to_owned();
        msk = msk.slice(s![.., ..;-1]).to_owned();
    }
    if level != AugmentLevel::Light && rng.gen_bool(0.5) {
        img = img.slice(s![.., ..;-1, ..]).to_owned();
        msk = msk.slice(s![..;-1, ..]).to_owned();
    }
    let (gain_j, bias_j) = match level {
        AugmentLevel::None => unreachable!(),
        AugmentLevel::Light => (0.05f32, 0.02f32),
        AugmentLevel::Medium => (0.10, 0.04),
        AugmentLevel::Heavy => (0.20, 0.06),
    };
    for c in 0..3 {
        let gain = 1.0 + rng.gen_range(-gain_j..gain_j);
        let bias = rng.gen_range(-bias_j..bias_j);
        img.slice_mut(s![c, .., ..])
            .mapv_inplace(|v| (v * gain + bias).clamp(0.0, 1.0));
    }
    if level == AugmentLevel::Heavy {
        img.mapv_inplace(|v| (v + rand_pixel_noise(rng)).clamp(0.0, 1.0));
    }
    (img, msk)
}

fn rand_pixel_noise(rng: &mut ChaCha8Rng) -> f32 {
    rng.gen_range(-0.01..0.01)
}

/// Uniform sampler over the union of several training pools. Each *sample*
/// is equally likely, so a pool's share of draws equals its share of the
/// union.
pub struct BatchSampler<'a> {
    pools: Vec<&'a [Sample]>,
    total: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(pools: Vec<&'a [Sample]>) -> Result<Self, SegError> {
        let total = pools.iter().map(|p| p.len()).sum();
        if total == 0 {
            return Err(SegError::EmptyPool);
        }
        Ok(BatchSampler { pools, total })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Draw one sample uniformly from the union. Also reports which pool it
    /// came from.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (&'a Sample, usize) {
        let mut idx = rng.gen_range(0..self.total);
        for (pi, p) in self.pools.iter().enumerate() {
            if idx < p.len() {
                return (&p[idx], pi);
            }
            idx -= p.len();
        }
        unreachable!("index in range");
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Random square crop side; `None` trains on full images. Must keep the
    /// divisibility the architecture needs.
    pub crop: Option<usize>,
    pub augment: AugmentLevel,
    /// Validate (and consider checkpointing) every this many steps.
    pub checkpoint_every: usize,
    /// Seed for sampling, cropping and augmentation (model init uses the
    /// architecture's own seed).
    pub seed: u64,
    pub dice: DiceCfg,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 6,
            lr: 3e-3,
            weight_decay: 1e-5,
            crop: None,
            augment: AugmentLevel::Light,
            checkpoint_every: 50,
            seed: 0,
            dice: DiceCfg::default(),
        }
    }
}

/// One validation checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub is_best: bool,
}

pub struct TrainedModel {
    pub model: SegModel<f32>,
    pub history: Vec<TrainRecord>,
    pub best_step: usize,
    pub best_val_loss: f64,
}

fn val_scores(
    model: &SegModel<f32>,
    val: &[&[Sample]],
    dice: &DiceCfg,
) -> Result<(f64, f64), SegError> {
    let mut loss_sum = 0.0f64;
    let mut miou_sum = 0.0f64;
    let mut n = 0usize;
    for pool in val {
        for s in *pool {
            let probs = model.predict_probs(&s.image)?;
            let (l, _) = dice_loss_grad(&probs, &s.mask, *dice);
            loss_sum += l as f64;
            miou_sum += miou(&argmax_mask(&probs), &s.mask, model.cfg.n_classes);
            n += 1;
        }
    }
    if n == 0 {
        return Err(SegError::EmptyPool);
    }
    Ok((loss_sum / n as f64, miou_sum / n as f64))
}

fn crop_pair(
    image: &Array3<f32>,
    mask: &Array2<u8>,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array2<u8>) {
    let (_, h, w) = image.dim();
    if side >= h && side >= w {
        return (image.clone(), mask.clone());
    }
    let y0 = rng.gen_range(0..=h - side);
    let x0 = rng.gen_range(0..=w - side);
    (
        image.slice(s![.., y0..y0 + side, x0..x0 + side]).to_owned(),
        mask.slice(s![y0..y0 + side, x0..x0 + side]).to_owned(),
    )
}

/// Train a fresh model on the union of `train_pools`, validating on the
/// union of `val_pools`. Returns the parameters of the best validation
/// checkpoint (earliest wins ties). Aborts with [`SegError::Diverged`] if
/// the loss goes non-finite.
pub fn train(
    arch: &ArchConfig,
    train_pools: &[&[Sample]],
    val_pools: &[&[Sample]],
    cfg: &TrainConfig,
) -> Result<TrainedModel, SegError> {
    let sampler = BatchSampler::new(train_pools.to_vec())?;
    let mut model = SegModel::<f32>::init(arch.clone());
    let mut rng = stream(cfg.seed, "train");
    let mut adam = Adam::new(model.n_params(), cfg.lr, cfg.weight_decay);
    let mut params = model.flat_params();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<f32>)> = None;
    let mut since_eval = 0.0f64;
    let mut since_n = 0usize;

    for step in 1..=cfg.steps {
        let mut grads = model.zero_grads();
        let mut batch_loss = 0.0f32;
        for _ in 0..cfg.batch_size {
            let (sample, _) = sampler.draw(&mut rng);
            let (mut img, mut msk) = match cfg.crop {
                Some(side) => crop_pair(&sample.image, &sample.mask, side, &mut rng),
                None => (sample.image.clone(), sample.mask.clone()),
            };
            (img, msk) = augment_sample(&img, &msk, cfg.augment, &mut rng);
            let cache = model.forward_cached(&img, None, true)?;
            let probs = cache.probs.as_ref().expect("full forward has probs");
            let (loss, d_probs) = dice_loss_grad(probs, &msk, cfg.dice);
            batch_loss += loss;
            let seeds = GradSeeds {
                d_probs: Some(d_probs),
                d_taps: Vec::new(),
            };
            model.backward(&cache, &seeds, Some(&mut grads))?;
        }
        let bl = batch_loss / cfg.batch_size as f32;
        if !bl.is_finite() {
            return Err(SegError::Diverged { step });
        }
        since_eval += bl as f64;
        since_n += 1;
        grads.scale(1.0 / cfg.batch_size as f32);
        adam.step(&mut params, &grads.flat());
        model.load_flat(&params);

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let (val_loss, val_miou) = val_scores(&model, val_pools, &cfg.dice)?;
            if !val_loss.is_finite() {
                return Err(SegError::Diverged { step });
            }
            let is_best = best.as_ref().map_or(true, |(_, b, _)| val_loss < *b);
            if is_best {
                best = Some((step, val_loss, params.clone()));
            }
            history.push(TrainRecord {
                step,
                train_loss: since_eval / since_n.max(1) as f64,
                val_loss,
                val_miou,
                is_best,
            });
            since_eval = 0.0;
            since_n = 0;
        }
    }

    let (best_step, best_val_loss, best_params) = best.expect("at least one eval");
    model.load_flat(&best_params);
    Ok(TrainedModel {
        model,
        history,
        best_step,
        best_val_loss,
    })
}
